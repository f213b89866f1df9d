"""Training objectives: next-token loss, view-alignment distance, and their blend.

The combined loss is gamma * ntp + lambda * distance(predictor output,
target-view embedding), with the alignment term computed on a second,
packed forward pass. A batch-level dropout stream can skip that pass,
and monitor mode reports the distance without letting it touch the
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ContractError, DegenerateInputError
from .masking import DIRECTIONS, PLACEMENTS, block_causal_mask, causal_mask
from .model import Model, read_view
from .numerics import Tensor

METRICS = ("cosine", "l2", "mse", "infonce")
MASK_MODES = ("completion_only", "full_sequence")


@dataclass
class ObjectiveConfig:
    """Weights and variant switches for the combined objective.

    ``monitor`` runs the alignment pass for logging while training
    exactly like lambda_=0; it therefore requires lambda_ == 0.
    ``gamma_sweep`` enforces the max(gamma, lambda) = 1 sweep protocol.
    """

    lambda_: float = 0.0
    gamma: float = 1.0
    k: int = 1
    metric: str = "cosine"
    tau: float = 0.07
    direction: str = "text_to_code"
    placement: str = "append"
    loss_dropout: float = 0.0
    loss_mask_mode: str = "completion_only"
    monitor: bool = False
    stop_gradient_target: bool = False
    gamma_sweep: bool = False

    def __post_init__(self):
        if self.lambda_ < 0 or self.gamma < 0:
            raise ContractError("lambda and gamma must be nonnegative")
        if self.k < 0:
            raise ContractError(f"k must be >= 0, got {self.k}")
        if self.metric not in METRICS:
            raise ContractError(f"unknown metric {self.metric!r}")
        if self.tau <= 0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        if self.direction not in DIRECTIONS:
            raise ContractError(f"unknown direction {self.direction!r}")
        if self.placement not in PLACEMENTS:
            raise ContractError(f"unknown placement {self.placement!r}")
        if not 0.0 <= self.loss_dropout <= 1.0:
            raise ContractError(f"loss_dropout must be in [0, 1], got {self.loss_dropout}")
        if self.loss_mask_mode not in MASK_MODES:
            raise ContractError(f"unknown loss_mask_mode {self.loss_mask_mode!r}")
        if self.monitor and self.lambda_ != 0.0:
            raise ContractError("monitor mode trains without the alignment term; set lambda_=0")
        if self.gamma_sweep and max(self.gamma, self.lambda_) != 1.0:
            raise ContractError(
                f"sweep protocol needs max(gamma, lambda) == 1, got ({self.gamma}, {self.lambda_})")


@dataclass
class LossBreakdown:
    ntp_loss: float
    jepa_distance: float | None
    total: float
    jepa_active: bool
    forward_passes: int
    loss: Tensor = field(repr=False)


def _mean(terms: list[Tensor]) -> Tensor:
    if len(terms) == 1:
        return terms[0]
    stacked = nm.concat([nm.reshape(t, (1,)) for t in terms], axis=0)
    return nm.scale(nm.sum_all(stacked), 1.0 / len(terms))


def ntp_loss(logits: Tensor, tokens, loss_mask) -> Tensor:
    """Mean cross-entropy of predicting token i+1 from rows 0..L-2.

    ``loss_mask`` has one flag per target row (length L-1); at least one
    must be set.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    L = tokens.shape[0]
    if L < 2:
        raise ContractError("next-token loss needs at least two tokens")
    if logits.shape[0] != L:
        raise ContractError(f"logits rows {logits.shape[0]} != sequence length {L}")
    if loss_mask.shape != (L - 1,):
        raise ContractError(f"loss_mask shape {loss_mask.shape} != ({L - 1},)")
    if not loss_mask.any():
        raise ContractError("loss_mask marks no target positions")
    return nm.masked_mean_cross_entropy(nm.slice_rows(logits, 0, L - 1), tokens[1:], loss_mask)


def _norm(v: Tensor) -> Tensor:
    sq = float(np.dot(v.data, v.data))
    if sq == 0.0:
        raise DegenerateInputError("zero-norm embedding under a cosine-based metric")
    return nm.sqrt(nm.sum_all(nm.mul(v, v)))


def _cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    dot = nm.sum_all(nm.mul(a, b))
    return nm.div(dot, nm.mul(_norm(a), _norm(b)))


def _normalize(v: Tensor) -> Tensor:
    return nm.scalar_mul(v, nm.div(Tensor(1.0), _norm(v)))


def _infonce(pairs: list[tuple[Tensor, Tensor]], tau: float) -> Tensor:
    n = len(pairs)
    d = pairs[0][0].shape[0]
    pred_rows = [nm.reshape(_normalize(p), (1, d)) for p, _ in pairs]
    code_rows = [nm.reshape(_normalize(c), (1, d)) for _, c in pairs]
    sims = nm.matmul(nm.concat(pred_rows, axis=0),
                     nm.transpose(nm.concat(code_rows, axis=0)))
    logits = nm.scale(sims, 1.0 / tau)
    return nm.masked_mean_cross_entropy(logits, np.arange(n), np.ones(n, dtype=bool))


def view_distance(pred: Tensor, code: Tensor, metric: str, tau: float = 0.07,
                  batch_context: list[tuple[Tensor, Tensor]] | None = None) -> Tensor:
    """Distance between a predictor output and a target-view embedding.

    cosine: 1 - cos; l2: euclidean norm of the difference; mse: squared
    norm over dimension; infonce: cross-entropy of the matching pair
    against in-batch negatives (``batch_context`` supplies all pairs,
    defaulting to just this one, which scores exactly 0).
    """
    if pred.shape != code.shape or pred.data.ndim != 1:
        raise ContractError(f"view embeddings must be equal-length vectors, "
                            f"got {pred.shape} and {code.shape}")
    if metric == "cosine":
        return nm.sub(Tensor(1.0), _cosine_sim(pred, code))
    if metric == "l2":
        diff = nm.sub(pred, code)
        return nm.sqrt(nm.sum_all(nm.mul(diff, diff)))
    if metric == "mse":
        diff = nm.sub(pred, code)
        return nm.scale(nm.sum_all(nm.mul(diff, diff)), 1.0 / pred.shape[0])
    if metric == "infonce":
        return _infonce(batch_context if batch_context else [(pred, code)], tau)
    raise ContractError(f"unknown metric {metric!r}")


def dropout_schedule(seed: int, rate: float, batch_index: int) -> bool:
    """Deterministic keep/drop decision for one batch; True means keep.

    Counter-based: the stream is addressed by (seed, batch_index), so
    any batch's decision can be recomputed in isolation.
    """
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"dropout rate must be in [0, 1], got {rate}")
    bits = np.random.Generator(np.random.Philox(key=int(seed), counter=int(batch_index)))
    return bool(bits.random() >= rate)


def llm_jepa_loss(batch, model: Model, config: ObjectiveConfig,
                  jepa_keep: bool = True) -> LossBreakdown:
    """Combined loss over one batch.

    Pass 1 scores every item's raw causal sequence; pass 2, when kept,
    runs each item's packed two-block sequence and measures the
    predictor-to-target distance. The returned ``loss`` tensor backs
    only the terms that should train: monitor mode and dropped batches
    contribute no alignment gradient at all.
    """
    items = batch.items
    if not items:
        raise ContractError("batch is empty")

    ntp_terms = []
    for it in items:
        L = len(it.raw_tokens)
        logits, _ = model.forward(it.raw_tokens, it.raw_positions, causal_mask(L))
        ntp_terms.append(ntp_loss(logits, it.raw_tokens, it.raw_loss_mask))
    ntp = _mean(ntp_terms)

    jepa_active = bool(jepa_keep) and (config.lambda_ > 0 or config.monitor)
    jepa = None
    if jepa_active:
        pairs = []
        for it in items:
            L = len(it.packed_tokens)
            mask = block_causal_mask(it.layout, L)
            _, hidden = model.forward(it.packed_tokens, it.packed_positions, mask)
            pred = read_view(hidden, it.layout, "predictor")
            tgt = read_view(hidden, it.layout, it.layout.target_view)
            if config.stop_gradient_target:
                tgt = Tensor(tgt.data)
            pairs.append((pred, tgt))
        if config.metric == "infonce":
            jepa = _infonce(pairs, config.tau)
        else:
            jepa = _mean([view_distance(p, c, config.metric, config.tau) for p, c in pairs])

    jepa_in_loss = jepa_active and config.lambda_ > 0
    if config.gamma != 0.0 and jepa_in_loss:
        loss = nm.add(nm.scale(ntp, config.gamma), nm.scale(jepa, config.lambda_))
    elif jepa_in_loss:
        loss = nm.scale(jepa, config.lambda_)
    else:
        loss = nm.scale(ntp, config.gamma)

    ntp_val = ntp.item()
    jepa_val = jepa.item() if jepa is not None else None
    total = config.gamma * ntp_val + (config.lambda_ * jepa_val if jepa_active else 0.0)
    return LossBreakdown(ntp_loss=ntp_val, jepa_distance=jepa_val, total=total,
                         jepa_active=jepa_active,
                         forward_passes=2 if jepa_active else 1, loss=loss)
