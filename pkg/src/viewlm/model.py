"""Decoder-only transformer over explicit positions and an arbitrary additive mask.

Pre-norm blocks with RMS normalization, a gelu MLP, learned absolute
position embeddings, and an output head tied to the token embedding.
The mask is caller-supplied so the same forward serves standard causal
and packed block-causal sequences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .errors import CapacityError, ContractError, FormatError
from .masking import SegmentLayout
from .numerics import Tensor

RMS_EPS = 1e-6
_MAGIC = b"JLMJ"
_VERSION = 1
_CONFIG_FIELDS = ("n_layers", "n_heads", "d_model", "d_ff", "n_vocab", "max_seq_len")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    n_vocab: int = 261
    max_seq_len: int = 256

    def __post_init__(self):
        for name in _CONFIG_FIELDS:
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be a positive integer")
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


class LayerWeights:
    __slots__ = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2")

    def __init__(self, attn_norm, wq, wk, wv, wo, mlp_norm, w1, w2):
        self.attn_norm = attn_norm
        self.wq = wq
        self.wk = wk
        self.wv = wv
        self.wo = wo
        self.mlp_norm = mlp_norm
        self.w1 = w1
        self.w2 = w2


class TransformerWeights:
    """All parameters as requires_grad tensors, in fixed declaration order.

    The checkpoint format serializes buffers in exactly the order
    ``parameters()`` yields them.
    """

    def __init__(self, tok_emb: Tensor, pos_emb: Tensor,
                 layers: list[LayerWeights], final_norm: Tensor):
        self.tok_emb = tok_emb
        self.pos_emb = pos_emb
        self.layers = layers
        self.final_norm = final_norm

    @classmethod
    def init_random(cls, config: ModelConfig, rng: np.random.Generator) -> "TransformerWeights":
        d, ff = config.d_model, config.d_ff

        def mat(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

        def gain():
            return Tensor(np.ones(d), requires_grad=True)

        tok = mat(config.n_vocab, d)
        pos = mat(config.max_seq_len, d)
        layers = [LayerWeights(gain(), mat(d, d), mat(d, d), mat(d, d), mat(d, d),
                               gain(), mat(d, ff), mat(ff, d))
                  for _ in range(config.n_layers)]
        return cls(tok, pos, layers, gain())

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, lw in enumerate(self.layers):
            for name in LayerWeights.__slots__:
                out.append((f"layer{i}.{name}", getattr(lw, name)))
        out.append(("final_norm", self.final_norm))
        return out


class Model:
    def __init__(self, config: ModelConfig, weights: TransformerWeights):
        self.config = config
        self.weights = weights

    def forward(self, tokens, positions, additive_mask: np.ndarray,
                probs_out: list | None = None) -> tuple[Tensor, Tensor]:
        """Run the stack; returns (logits [L, n_vocab], hidden [L, d_model]).

        ``hidden`` is the final-layer state after the final norm; logits
        are its product with the transposed token embedding, so the
        output head is tied. ``probs_out`` collects one [H, L, L]
        attention-probability array per layer when given.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        L = tokens.shape[0]
        cfg = self.config
        if L == 0:
            raise ContractError("forward needs at least one token")
        if L > cfg.max_seq_len:
            raise CapacityError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
        if positions.shape != (L,):
            raise ContractError(f"positions shape {positions.shape} != ({L},)")
        if positions.min() < 0 or positions.max() >= cfg.max_seq_len:
            raise ContractError("position index outside [0, max_seq_len)")
        mask = np.asarray(additive_mask)
        if mask.shape != (L, L):
            raise ContractError(f"mask shape {mask.shape} does not match length {L}")

        w = self.weights
        x = nm.add(nm.embedding_lookup(w.tok_emb, tokens),
                   nm.embedding_lookup(w.pos_emb, positions))
        for lw in w.layers:
            h = nm.rms_norm(x, lw.attn_norm, RMS_EPS)
            att = nm.multi_head_attention(nm.matmul(h, lw.wq), nm.matmul(h, lw.wk),
                                          nm.matmul(h, lw.wv), mask, cfg.n_heads,
                                          probs_out=probs_out)
            x = nm.add(x, nm.matmul(att, lw.wo))
            h = nm.rms_norm(x, lw.mlp_norm, RMS_EPS)
            x = nm.add(x, nm.matmul(nm.gelu(nm.matmul(h, lw.w1)), lw.w2))
        hidden = nm.rms_norm(x, w.final_norm, RMS_EPS)
        logits = nm.matmul(hidden, nm.transpose(w.tok_emb))
        return logits, hidden

    def encode_view(self, tokens, positions, additive_mask, layout: SegmentLayout,
                    which: str) -> Tensor:
        """Forward the packed sequence and read one view's embedding row."""
        _, hidden = self.forward(tokens, positions, additive_mask)
        return read_view(hidden, layout, which)


def read_view(hidden: Tensor, layout: SegmentLayout, which: str) -> Tensor:
    """Pick a view embedding out of a packed forward's hidden states.

    ``text``/``code`` read the last token of that span; ``predictor``
    reads the last block-1 row, which for k=0 is the plain source
    embedding.
    """
    if which == "predictor":
        idx = layout.predictor_read_index
    else:
        start, stop = layout.view_span(which)
        if stop <= start:
            raise ContractError(f"{which} span is empty")
        idx = stop - 1
    if not 0 <= idx < hidden.shape[0]:
        raise ContractError(f"read index {idx} outside hidden rows {hidden.shape[0]}")
    return nm.reshape(nm.slice_rows(hidden, idx, idx + 1), (hidden.shape[1],))


def save_checkpoint(path, config: ModelConfig, weights: TransformerWeights) -> None:
    """Little-endian binary: magic, version, config, then raw f64 buffers.

    A JSON sidecar at ``<path>.json`` duplicates the config for tooling;
    the binary header stays authoritative.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<6I", *(getattr(config, n) for n in _CONFIG_FIELDS)))
        for _, p in weights.parameters():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    with open(f"{path}.json", "w", encoding="utf-8") as f:
        json.dump(asdict(config), f, sort_keys=True, indent=2)
        f.write("\n")


def _expected_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, ff = config.d_model, config.d_ff
    shapes = [("tok_emb", (config.n_vocab, d)), ("pos_emb", (config.max_seq_len, d))]
    per_layer = {"attn_norm": (d,), "wq": (d, d), "wk": (d, d), "wv": (d, d),
                 "wo": (d, d), "mlp_norm": (d,), "w1": (d, ff), "w2": (ff, d)}
    for i in range(config.n_layers):
        shapes += [(f"layer{i}.{n}", s) for n, s in per_layer.items()]
    shapes.append(("final_norm", (d,)))
    return shapes


def load_checkpoint(path) -> tuple[ModelConfig, TransformerWeights]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    fields = struct.unpack_from("<6I", blob, 8)
    config = ModelConfig(**dict(zip(_CONFIG_FIELDS, map(int, fields))))
    offset = 8 + 24
    tensors = []
    for name, shape in _expected_shapes(config):
        n = int(np.prod(shape))
        end = offset + 8 * n
        if end > len(blob):
            raise FormatError(f"checkpoint truncated in buffer {name}")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        if not np.isfinite(arr).all():
            raise FormatError(f"non-finite values in buffer {name}")
        tensors.append(Tensor(arr.copy(), requires_grad=True))
        offset = end
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after weight buffers")

    tok, pos = tensors[0], tensors[1]
    layers = []
    i = 2
    for _ in range(config.n_layers):
        layers.append(LayerWeights(*tensors[i:i + 8]))
        i += 8
    return config, TransformerWeights(tok, pos, layers, tensors[i])
