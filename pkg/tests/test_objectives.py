import math

import numpy as np
import pytest

import viewlm.numerics as nm
from conftest import make_model
from oracles import max_relative_error, numeric_gradient
from viewlm.data import Batch, build_item
from viewlm.errors import ContractError, DegenerateInputError
from viewlm.masking import causal_mask
from viewlm.numerics import Tape, Tensor, backward
from viewlm.objectives import (LossBreakdown, ObjectiveConfig, dropout_schedule,
                               llm_jepa_loss, ntp_loss, view_distance)


def make_batch(objective: ObjectiveConfig, pairs=None, max_seq_len=64) -> Batch:
    pairs = pairs or [("ab", "xy"), ("cde", "uv")]
    items = [build_item(t, c, f"ex{i}", objective, max_seq_len)
             for i, (t, c) in enumerate(pairs)]
    return Batch(items=items)


class TestObjectiveConfig:
    def test_negative_weights_rejected(self):
        with pytest.raises(ContractError):
            ObjectiveConfig(lambda_=-0.5)
        with pytest.raises(ContractError):
            ObjectiveConfig(gamma=-1.0)

    def test_tau_positive(self):
        with pytest.raises(ContractError):
            ObjectiveConfig(tau=0.0)

    def test_dropout_range(self):
        with pytest.raises(ContractError):
            ObjectiveConfig(loss_dropout=1.5)

    def test_monitor_requires_lambda_zero(self):
        with pytest.raises(ContractError):
            ObjectiveConfig(lambda_=1.0, monitor=True)
        ObjectiveConfig(lambda_=0.0, monitor=True)

    def test_sweep_protocol_validated(self):
        with pytest.raises(ContractError):
            ObjectiveConfig(lambda_=0.5, gamma=0.5, gamma_sweep=True)
        ObjectiveConfig(lambda_=1.0, gamma=0.0, gamma_sweep=True)
        ObjectiveConfig(lambda_=0.5, gamma=1.0, gamma_sweep=True)


class TestNtpLoss:
    def test_uniform_logits_give_log_vocab(self):
        L, V = 5, 261
        logits = Tensor(np.zeros((L, V)))
        mask = np.ones(L - 1, dtype=bool)
        out = ntp_loss(logits, np.arange(L), mask)
        assert out.item() == pytest.approx(math.log(V), rel=1e-12)

    def test_single_position_reduces_to_cross_entropy(self, rng):
        logits = Tensor(rng.normal(size=(4, 10)))
        tokens = np.array([1, 2, 3, 4])
        mask = np.array([False, True, False])
        got = ntp_loss(logits, tokens, mask).item()
        want = nm.cross_entropy(Tensor(logits.data[1]), 3).item()
        assert got == pytest.approx(want, rel=1e-12)

    def test_three_token_case_matches_direct_sum(self, rng):
        """Mean over both targets, recomputed by hand from softmax rows."""
        logits = Tensor(rng.normal(size=(3, 7)))
        tokens = np.array([2, 5, 1])
        mask = np.array([True, True])
        got = ntp_loss(logits, tokens, mask).item()
        total = 0.0
        for row, target in ((0, 5), (1, 1)):
            z = logits.data[row]
            total += math.log(np.exp(z).sum()) - z[target]
        assert got == pytest.approx(total / 2, rel=1e-12)

    def test_empty_mask_rejected(self):
        with pytest.raises(ContractError):
            ntp_loss(Tensor(np.zeros((3, 5))), np.arange(3), np.zeros(2, dtype=bool))


class TestViewDistance:
    def test_cosine_aligned_is_zero(self):
        v = Tensor([1.0, 2.0, 3.0])
        assert view_distance(v, Tensor([2.0, 4.0, 6.0]), "cosine").item() == pytest.approx(0.0, abs=1e-12)

    def test_cosine_orthogonal_is_one(self):
        d = view_distance(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]), "cosine")
        assert d.item() == pytest.approx(1.0, rel=1e-12)

    def test_cosine_known_value(self):
        d = view_distance(Tensor([1.0, 2.0]), Tensor([2.0, 1.0]), "cosine")
        assert d.item() == pytest.approx(0.2, rel=1e-12)

    def test_cosine_range(self, rng):
        for _ in range(20):
            p, c = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
            assert 0.0 <= view_distance(p, c, "cosine").item() <= 2.0

    def test_l2_and_mse(self):
        p, c = Tensor([1.0, 2.0, 2.0]), Tensor([1.0, 0.0, 0.0])
        assert view_distance(p, c, "l2").item() == pytest.approx(math.sqrt(8))
        assert view_distance(p, c, "mse").item() == pytest.approx(8 / 3)

    def test_zero_norm_degenerate(self):
        with pytest.raises(DegenerateInputError):
            view_distance(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]), "cosine")

    def test_infonce_batch_of_one_is_zero(self):
        d = view_distance(Tensor([1.0, 2.0]), Tensor([2.0, 1.0]), "infonce", tau=0.07)
        assert d.item() == 0.0

    def test_infonce_matches_direct_formula(self, rng):
        tau = 0.07
        pairs = [(Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4)))
                 for _ in range(3)]
        got = view_distance(pairs[0][0], pairs[0][1], "infonce", tau,
                            batch_context=pairs).item()
        P = np.stack([p.data / np.linalg.norm(p.data) for p, _ in pairs])
        C = np.stack([c.data / np.linalg.norm(c.data) for _, c in pairs])
        S = P @ C.T / tau
        want = np.mean([-(S[i, i] - math.log(np.exp(S[i]).sum())) for i in range(3)])
        assert got == pytest.approx(want, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            view_distance(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]), "cosine")

    @pytest.mark.parametrize("metric", ["cosine", "l2", "mse"])
    def test_metric_gradcheck(self, metric, rng):
        p = Tensor(rng.normal(size=6), requires_grad=True)
        c = Tensor(rng.normal(size=6), requires_grad=True)
        with Tape() as tape:
            loss = view_distance(p, c, metric)
            backward(loss, tape)
        for t in (p, c):
            grad = t.grad.copy()
            num = numeric_gradient(lambda: view_distance(p, c, metric).item(), t)
            assert max_relative_error(grad, num) < 1e-5

    def test_infonce_gradcheck(self, rng):
        pairs = [(Tensor(rng.normal(size=4), requires_grad=True),
                  Tensor(rng.normal(size=4), requires_grad=True)) for _ in range(3)]

        def make_loss():
            return view_distance(pairs[0][0], pairs[0][1], "infonce", 0.07,
                                 batch_context=pairs)

        with Tape() as tape:
            backward(make_loss(), tape)
        for t in (pairs[0][0], pairs[2][1]):
            grad = t.grad.copy()
            num = numeric_gradient(lambda: make_loss().item(), t)
            assert max_relative_error(grad, num) < 1e-5


class TestDropoutSchedule:
    def test_alpha_zero_always_keeps(self):
        assert all(dropout_schedule(82, 0.0, i) for i in range(500))

    def test_alpha_one_always_drops(self):
        assert not any(dropout_schedule(82, 1.0, i) for i in range(500))

    def test_counter_based_recomputation(self):
        """Any batch's decision is addressable without replaying the stream."""
        stream = [dropout_schedule(37, 0.5, i) for i in range(100)]
        assert dropout_schedule(37, 0.5, 57) == stream[57]

    def test_drop_fraction_converges(self):
        kept = sum(dropout_schedule(84, 0.75, i) for i in range(10000))
        assert abs(kept / 10000 - 0.25) < 0.02

    def test_invalid_rate_rejected(self):
        with pytest.raises(ContractError):
            dropout_schedule(82, -0.1, 0)


def grads_bytes(model):
    return [p.grad.tobytes() for _, p in model.weights.parameters()]


class TestLlmJepaLoss:
    def test_pure_ntp_total_and_passes(self):
        model = make_model(seed=3)
        config = ObjectiveConfig(lambda_=0.0, gamma=1.0)
        bd = llm_jepa_loss(make_batch(config), model, config)
        assert bd.total == pytest.approx(bd.ntp_loss, rel=1e-12)
        assert bd.jepa_distance is None
        assert not bd.jepa_active
        assert bd.forward_passes == 1

    def test_lambda_zero_grads_match_ntp_bitwise(self):
        config = ObjectiveConfig(lambda_=0.0, gamma=1.0)
        ref_config = ObjectiveConfig(lambda_=1.0, gamma=1.0, k=0)

        def run(cfg, keep):
            model = make_model(seed=3)
            with Tape() as tape:
                bd = llm_jepa_loss(make_batch(cfg), model, cfg, jepa_keep=keep)
                backward(bd.loss, tape)
            return grads_bytes(model)

        assert run(config, True) == run(ref_config, False)

    def test_monitor_reports_distance_with_ntp_identical_grads(self):
        plain = ObjectiveConfig(lambda_=0.0)
        monitored = ObjectiveConfig(lambda_=0.0, monitor=True, k=1)

        def run(cfg):
            model = make_model(seed=5)
            with Tape() as tape:
                bd = llm_jepa_loss(make_batch(cfg), model, cfg)
                backward(bd.loss, tape)
            return bd, grads_bytes(model)

        bd_plain, g_plain = run(plain)
        bd_mon, g_mon = run(monitored)
        assert bd_mon.jepa_distance is not None
        assert bd_mon.forward_passes == 2
        assert bd_mon.total == pytest.approx(bd_plain.total, rel=1e-12)
        assert g_mon == g_plain

    def test_gamma_zero_total_is_alignment_only(self):
        model = make_model(seed=7)
        config = ObjectiveConfig(lambda_=1.0, gamma=0.0, k=1, gamma_sweep=True)
        bd = llm_jepa_loss(make_batch(config), model, config)
        assert bd.total == pytest.approx(bd.jepa_distance, rel=1e-12)
        assert bd.ntp_loss > 0  # still reported

    def test_dropped_batch_reports_absent_distance(self):
        model = make_model(seed=7)
        config = ObjectiveConfig(lambda_=1.0, gamma=1.0, k=1)
        bd = llm_jepa_loss(make_batch(config), model, config, jepa_keep=False)
        assert bd.jepa_distance is None
        assert not bd.jepa_active
        assert bd.forward_passes == 1
        assert bd.total == pytest.approx(bd.ntp_loss)

    def test_total_invariant_when_active(self):
        model = make_model(seed=9)
        config = ObjectiveConfig(lambda_=2.0, gamma=0.5, k=2)
        bd = llm_jepa_loss(make_batch(config), model, config)
        assert bd.jepa_active and bd.forward_passes == 2
        assert bd.total == pytest.approx(0.5 * bd.ntp_loss + 2.0 * bd.jepa_distance,
                                         rel=1e-12)

    def test_full_model_loss_gradcheck_random_coordinates(self):
        """Spot-check the end-to-end gradient at random parameter coordinates."""
        from oracles import numeric_gradient_at
        model = make_model(seed=11, n_layers=1, d_model=8, n_heads=2, d_ff=16)
        config = ObjectiveConfig(lambda_=1.0, gamma=1.0, k=1)
        batch = make_batch(config, pairs=[("ab", "xy")])

        def loss_value():
            return llm_jepa_loss(batch, model, config).loss.item()

        with Tape() as tape:
            backward(llm_jepa_loss(batch, model, config).loss, tape)
        rng = np.random.default_rng(0)
        params = dict(model.weights.parameters())
        for name in ("tok_emb", "layer0.wq", "layer0.w1", "final_norm"):
            p = params[name]
            idx = rng.choice(p.data.size, size=min(3, p.data.size), replace=False)
            num = numeric_gradient_at(loss_value, p, idx)
            for i, n in num.items():
                a = p.grad.reshape(-1)[i]
                assert max_relative_error([a], [n]) < 1e-5, name

    def test_stop_gradient_target_changes_grads_not_value(self):
        both = ObjectiveConfig(lambda_=1.0, gamma=1.0, k=1)
        stopped = ObjectiveConfig(lambda_=1.0, gamma=1.0, k=1, stop_gradient_target=True)

        def run(cfg):
            model = make_model(seed=13)
            with Tape() as tape:
                bd = llm_jepa_loss(make_batch(cfg), model, cfg)
                backward(bd.loss, tape)
            return bd.total, grads_bytes(model)

        total_a, grads_a = run(both)
        total_b, grads_b = run(stopped)
        assert total_a == pytest.approx(total_b, rel=1e-12)
        assert grads_a != grads_b

    def test_empty_batch_rejected(self):
        model = make_model(seed=3)
        config = ObjectiveConfig()
        with pytest.raises(ContractError):
            llm_jepa_loss(Batch(items=[]), model, config)
