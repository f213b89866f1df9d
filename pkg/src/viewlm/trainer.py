"""Deterministic training loop: per-seed runs, AdamW, FLOPs accounting.

Each seed fully determines weight init, shuffle order, and the loss
dropout stream, so a rerun reproduces checkpoints bit for bit. All
run artifacts are timestamp-free except run.log.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import make_batches
from .errors import ContractError, DegenerateInputError, DivergenceError
from .model import Model, ModelConfig, TransformerWeights, load_checkpoint, save_checkpoint
from .numerics import Tape, backward
from .objectives import ObjectiveConfig, dropout_schedule, llm_jepa_loss

DEFAULT_SEEDS = (82, 23, 37, 84, 4)
LR_GRID = (1e-5, 2e-5, 4e-5, 8e-5)
KL_GRID = tuple((k, lam) for k in range(5) for lam in (0.5, 1.0, 2.0, 4.0))
_INIT_DOMAIN = 0


@dataclass
class TrainConfig:
    lr: float
    epochs: int
    batch_size: int
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    grid: tuple[tuple[int, float], ...] | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ContractError("seeds must be non-empty and distinct")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ContractError(f"clip_norm must be positive or None, got {self.clip_norm}")


class FlopsCounter:
    """Forward-pass counts per mode plus an analytic FLOPs total.

    The per-pass estimate covers the matmuls: QKV/output projections,
    attention scores and mixing, the MLP, and the tied logits head.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.forward_passes = {"ntp": 0, "jepa": 0}
        self.total_flops = 0.0

    def flops_per_forward(self, L: int) -> float:
        c = self.config
        per_layer = 8 * L * c.d_model ** 2 + 4 * L * L * c.d_model + 4 * L * c.d_model * c.d_ff
        return float(c.n_layers * per_layer + 2 * L * c.d_model * c.n_vocab)

    def add_pass(self, mode: str, L: int) -> None:
        self.forward_passes[mode] += 1
        self.total_flops += self.flops_per_forward(L)

    def snapshot(self) -> dict:
        return {"forward_passes": dict(self.forward_passes),
                "total_flops": self.total_flops}


class AdamWState:
    def __init__(self, params):
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}


def adamw_step(weights: TransformerWeights, grads: dict[str, np.ndarray],
               state: AdamWState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """Decoupled-weight-decay adaptive update, applied to every parameter."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in weights.parameters():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * p.data
        p.data -= lr * update


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``."""
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def _log(run_dir, message: str) -> None:
    with open(os.path.join(run_dir, "run.log"), "a", encoding="utf-8") as f:
        f.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}\n")


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _config_document(config: TrainConfig, model_config: ModelConfig) -> dict:
    doc = {"model": asdict(model_config), "train": asdict(config)}
    obj = doc["train"].pop("objective")
    obj["lambda"] = obj.pop("lambda_")
    doc["objective"] = obj
    doc["train"]["seeds"] = list(config.seeds)
    doc["train"]["grid"] = [list(cell) for cell in config.grid] if config.grid else None
    return doc


def train_one_seed(seed: int, config: TrainConfig, model_config: ModelConfig,
                   examples, seed_dir, init_checkpoint=None) -> dict:
    """Run one seed to completion; returns its report entry."""
    ckpt_dir = os.path.join(seed_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    if init_checkpoint is not None:
        loaded_config, weights = load_checkpoint(init_checkpoint)
        if loaded_config != model_config:
            raise ContractError("init checkpoint config does not match the run's model config")
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, _INIT_DOMAIN]))
        weights = TransformerWeights.init_random(model_config, rng)
    model = Model(model_config, weights)
    opt = AdamWState(weights.parameters())
    flops = FlopsCounter(model_config)
    objective = config.objective

    step = 0
    batch_counter = 0
    skipped_total = 0
    epoch_ntp: list[float] = []
    epoch_jepa: list[float] = []
    final_checkpoint = None
    with open(os.path.join(seed_dir, "metrics.jsonl"), "w", encoding="utf-8") as metrics:
        for epoch in range(config.epochs):
            batches, skipped = make_batches(examples, config.batch_size, objective,
                                            model_config.max_seq_len, seed, epoch)
            skipped_total += skipped
            epoch_ntp.clear()
            epoch_jepa.clear()
            for batch in batches:
                keep = dropout_schedule(seed, objective.loss_dropout, batch_counter)
                batch_counter += 1
                with Tape() as tape:
                    try:
                        bd = llm_jepa_loss(batch, model, objective, jepa_keep=keep)
                    except DegenerateInputError as e:
                        # mid-run degeneracy means the numerics collapsed
                        raise DivergenceError(f"step {step}: {e}") from e
                    if not math.isfinite(bd.total):
                        raise DivergenceError(f"non-finite loss at step {step}")
                    backward(bd.loss, tape)
                grads = {name: p.grad for name, p in weights.parameters()}
                if config.clip_norm is not None:
                    clip_gradients(grads, config.clip_norm)
                adamw_step(weights, grads, opt, config.lr, config.beta1, config.beta2,
                           config.eps, config.weight_decay)
                for item in batch.items:
                    flops.add_pass("ntp", len(item.raw_tokens))
                    if bd.jepa_active:
                        flops.add_pass("jepa", len(item.packed_tokens))
                metrics.write(json.dumps({
                    "step": step, "ntp": bd.ntp_loss, "jepa": bd.jepa_distance,
                    "total": bd.total, "forward_passes": bd.forward_passes,
                }, sort_keys=True) + "\n")
                epoch_ntp.append(bd.ntp_loss)
                if bd.jepa_distance is not None:
                    epoch_jepa.append(bd.jepa_distance)
                step += 1
            final_checkpoint = os.path.join("checkpoints", f"epoch_{epoch + 1}.bin")
            save_checkpoint(os.path.join(seed_dir, final_checkpoint), model_config, weights)
    return {
        "status": "ok",
        "steps": step,
        "skipped_examples": skipped_total,
        # relative to seed_dir, so run artifacts stay relocatable
        "final_checkpoint": final_checkpoint,
        "final_epoch_ntp_mean": float(np.mean(epoch_ntp)) if epoch_ntp else None,
        "final_epoch_jepa_mean": float(np.mean(epoch_jepa)) if epoch_jepa else None,
        "flops": flops.snapshot(),
    }


def train(config: TrainConfig, examples, run_dir, model_config: ModelConfig | None = None,
          init_checkpoint=None) -> dict:
    """Train every seed; a diverged seed is reported and the rest continue.

    Writes config.json, per-seed checkpoints and metrics.jsonl, and
    report.json under ``run_dir``.
    """
    model_config = model_config or ModelConfig()
    os.makedirs(run_dir, exist_ok=True)
    _write_json(os.path.join(run_dir, "config.json"), _config_document(config, model_config))
    per_seed = {}
    for seed in config.seeds:
        seed_dir = os.path.join(run_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        _log(run_dir, f"seed {seed} started")
        try:
            per_seed[str(seed)] = train_one_seed(seed, config, model_config, examples,
                                                 seed_dir, init_checkpoint)
            _log(run_dir, f"seed {seed} finished")
        except DivergenceError as e:
            per_seed[str(seed)] = {"status": "diverged", "error": str(e)}
            _log(run_dir, f"seed {seed} diverged: {e}")
    report = {"per_seed": per_seed, "model": asdict(model_config)}
    _write_json(os.path.join(run_dir, "report.json"), report)
    return report
