"""Dense f64 tensors with tape-based reverse-mode differentiation.

Every gradient in the package flows through the kernels in this module.
Kernels are deliberately small: forward in numpy, backward as a closure
recorded on the active tape. All buffers are float64 and C-contiguous,
so repeated runs on identical inputs are bit-identical.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, VocabularyError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A C-contiguous float64 array plus gradient metadata.

    Data is treated as immutable after construction; only ``grad`` is
    written, and only by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_pending", "_pending_owned")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if any(extent <= 0 for extent in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._pending: np.ndarray | None = None
        self._pending_owned = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_ACTIVE: "Tape | None" = None


class Tape:
    """Ordered record of operations; backward walks it in exact reverse.

    Used as a context manager. Only one tape may be active at a time;
    training is single-threaded per step.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE
        _ACTIVE = None

    def __len__(self) -> int:
        return len(self._records)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
    if _ACTIVE is not None and out.requires_grad:
        _ACTIVE._records.append((out, inputs, backward_fn))


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _accumulate(t: Tensor, g: np.ndarray, touched: list[Tensor]) -> None:
    if t._pending is None:
        t._pending = g
        t._pending_owned = False
        touched.append(t)
    elif t._pending_owned:
        t._pending += g
    else:
        t._pending = t._pending + g
        t._pending_owned = True


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from loss.

    Tensors on the tape that carry requires_grad but are not reachable
    from the loss get an all-zero grad. Grads are overwritten, not
    accumulated, across calls.
    """
    if tape is None:
        tape = _ACTIVE
    if tape is None:
        raise ContractError("backward needs an active tape or an explicit one")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    touched: list[Tensor] = []
    _accumulate(loss, np.ones_like(loss.data), touched)

    participants: dict[int, Tensor] = {}
    if loss.requires_grad:
        participants[id(loss)] = loss
    for out, inputs, backward_fn in reversed(tape._records):
        if out.requires_grad:
            participants[id(out)] = out
        for t in inputs:
            if t.requires_grad:
                participants[id(t)] = t
        g = out._pending
        if g is None:
            continue
        grads = backward_fn(g)
        for t, gi in zip(inputs, grads):
            if gi is not None:
                _accumulate(t, gi, touched)

    for t in participants.values():
        if t._pending is not None:
            t.grad = np.ascontiguousarray(t._pending)
        else:
            t.grad = np.zeros_like(t.data)
    for t in touched:
        t._pending = None
        t._pending_owned = False


# ---------------------------------------------------------------------------
# kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_needs_grad(a, b))
    _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.data.shape}")
    out = Tensor(a.data.T, requires_grad=a.requires_grad)
    _record(out, (a,), lambda g: (g.T,))
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise DimensionError(f"cannot reshape {a.data.shape} to {shape}")
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)
    orig = a.data.shape
    _record(out, (a,), lambda g: (g.reshape(orig),))
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 requires_grad=_needs_grad(*parts))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(np.ascontiguousarray(np.moveaxis(moved[offsets[i]:offsets[i + 1]], 0, axis))
                     for i in range(len(sizes)))

    _record(out, tuple(parts), bwd)
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.data.shape[0]
    if not (0 <= start < stop <= n):
        raise DimensionError(f"row slice [{start}:{stop}] out of range for {a.data.shape}")
    out = Tensor(a.data[start:stop], requires_grad=a.requires_grad)

    def bwd(g):
        da = np.zeros_like(a.data)
        da[start:stop] = g
        return (da,)

    _record(out, (a,), bwd)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op} shapes differ: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=_needs_grad(a, b))
    _record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, requires_grad=_needs_grad(a, b))
    _record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=_needs_grad(a, b))
    _record(out, (a, b), lambda g: (g * b.data, g * a.data))
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = Tensor(a.data / b.data, requires_grad=_needs_grad(a, b))
    _record(out, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data)))
    return out


def scalar_mul(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``a`` by the scalar tensor ``s``.

    Unlike ``scale``, the factor participates in differentiation.
    """
    if s.data.size != 1:
        raise DimensionError(f"scalar_mul factor must be scalar, got shape {s.data.shape}")
    sval = s.data.reshape(())
    out = Tensor(a.data * sval, requires_grad=_needs_grad(a, s))

    def bwd(g):
        return (g * sval, np.sum(g * a.data).reshape(s.data.shape))

    _record(out, (a, s), bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s, requires_grad=a.requires_grad)
    _record(out, (a,), lambda g: (g * s,))
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data), requires_grad=a.requires_grad)
    y = out.data
    _record(out, (a,), lambda g: (g * 0.5 / y,))
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data), requires_grad=a.requires_grad)
    shape = a.data.shape
    _record(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return out


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t), requires_grad=a.requires_grad)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    _record(out, (a,), bwd)
    return out


def rms_norm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    if x.data.shape[-1] != weight.data.shape[-1] or weight.data.ndim != 1:
        raise DimensionError(
            f"rms_norm weight shape {weight.data.shape} does not match rows of {x.data.shape}")
    n = x.data.shape[-1]
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * r
    out = Tensor(xhat * weight.data, requires_grad=_needs_grad(x, weight))

    def bwd(g):
        gw = g * weight.data
        dx = gw * r - x.data * (r ** 3 / n) * np.sum(gw * x.data, axis=-1, keepdims=True)
        dw = np.sum(g * xhat, axis=tuple(range(g.ndim - 1)))
        return (dx, dw)

    _record(out, (x, weight), bwd)
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise VocabularyError(
            f"token id out of range [0, {table.data.shape[0]}): {ids.min()}..{ids.max()}")
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    _record(out, (table,), bwd)
    return out


def _masked_softmax_fwd(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with -inf entries as exact zeros.

    -inf entries are excluded from the max shift and the exponential sum,
    so masked probabilities are 0.0, not merely tiny.
    """
    finite = ~np.isneginf(mask)
    if not np.logical_or(finite & (mask == 0.0), ~finite).all():
        raise ContractError("additive mask entries must be 0 or -inf")
    if not finite.any(axis=-1).all():
        raise DegenerateInputError("attention row has every position masked")
    shifted = np.where(finite, logits, -np.inf)
    shifted = shifted - np.max(shifted, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def masked_softmax(logits: Tensor, additive_mask) -> Tensor:
    mask = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
    if mask.shape != logits.data.shape:
        raise DimensionError(
            f"mask shape {mask.shape} does not match logits {logits.data.shape}")
    p = _masked_softmax_fwd(logits.data, mask)
    out = Tensor(p, requires_grad=logits.requires_grad)

    def bwd(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    _record(out, (logits,), bwd)
    return out


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    if logits.data.ndim != 1:
        raise DimensionError(f"cross_entropy needs a vector, got shape {logits.data.shape}")
    n = logits.data.shape[0]
    target = int(target)
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} classes")
    z = logits.data - logits.data.max()
    lse = math.log(np.sum(np.exp(z)))
    out = Tensor(lse - z[target], requires_grad=logits.requires_grad)

    def bwd(g):
        p = np.exp(z - lse)
        p[target] -= 1.0
        return (p * g,)

    _record(out, (logits,), bwd)
    return out


def masked_mean_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy over the rows selected by ``mask``.

    Fused so a whole sequence costs one kernel. ``targets`` holds one
    class index per row; rows with a False mask contribute nothing to
    the value or the gradient.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    rows, n = logits.data.shape
    if targets.shape != (rows,) or mask.shape != (rows,):
        raise DimensionError(
            f"targets/mask shapes {targets.shape}/{mask.shape} do not match {rows} rows")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise DegenerateInputError("loss mask selects no positions")
    tgt = targets[idx]
    if tgt.min() < 0 or tgt.max() >= n:
        raise IndexError(f"target out of range for {n} classes: {tgt.min()}..{tgt.max()}")
    z = logits.data[idx]
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1))
    losses = lse - z[np.arange(idx.size), tgt]
    out = Tensor(losses.mean(), requires_grad=logits.requires_grad)

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(idx.size), tgt] -= 1.0
        dl = np.zeros_like(logits.data)
        dl[idx] = p * (float(np.reshape(g, ())) / idx.size)
        return (dl,)

    _record(out, (logits,), bwd)
    return out


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, additive_mask: np.ndarray,
                         n_heads: int, probs_out: list | None = None) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` heads, fused.

    ``additive_mask`` is a constant [L, L] array of 0 / -inf shared by all
    heads. Masked probabilities are exact zeros, so no gradient crosses a
    masked edge. When ``probs_out`` is a list the [H, L, L] probability
    array is appended to it.
    """
    L, d = q.data.shape
    if k.data.shape != (L, d) or v.data.shape != (L, d):
        raise DimensionError(
            f"attention operands differ: {q.data.shape}, {k.data.shape}, {v.data.shape}")
    if d % n_heads != 0:
        raise DimensionError(f"model width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    mask = np.asarray(additive_mask)
    if mask.shape != (L, L):
        raise DimensionError(f"mask shape {mask.shape} does not match sequence length {L}")

    def split(t: np.ndarray) -> np.ndarray:
        return t.reshape(L, n_heads, hd).transpose(1, 0, 2)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    inv = 1.0 / math.sqrt(hd)
    scores = (qh @ kh.transpose(0, 2, 1)) * inv
    p = _masked_softmax_fwd(scores, np.broadcast_to(mask, scores.shape))
    if probs_out is not None:
        probs_out.append(p)
    ctx = p @ vh
    out = Tensor(np.ascontiguousarray(ctx.transpose(1, 0, 2).reshape(L, d)),
                 requires_grad=_needs_grad(q, k, v))

    def bwd(g):
        gh = split(g)
        dp = gh @ vh.transpose(0, 2, 1)
        dvh = p.transpose(0, 2, 1) @ gh
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        dqh = (ds @ kh) * inv
        dkh = (ds.transpose(0, 2, 1) @ qh) * inv

        def merge(t: np.ndarray) -> np.ndarray:
            return np.ascontiguousarray(t.transpose(1, 0, 2).reshape(L, d))

        return (merge(dqh), merge(dkh), merge(dvh))

    _record(out, (q, k, v), bwd)
    return out
