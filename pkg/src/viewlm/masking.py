"""Two-block packed sequences and their additive attention masks.

A packed sequence holds the source view (plus its predictor tokens) as
block 1 and the target view as block 2. Attention is causal inside each
block and forbidden across blocks, so one forward pass over the packed
sequence reproduces two standalone forwards exactly. Position indices
restart at 0 in each block for the same reason.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ContractError
from .tokenizer import PRED

PLACEMENTS = ("append", "prepend")
DIRECTIONS = ("text_to_code", "code_to_text")


@dataclass(frozen=True)
class SegmentLayout:
    """Offsets of the text span, predictor tokens, and code span in one packed sequence.

    The source view (per ``direction``) and its ``pred_size`` predictor
    tokens form block 1; the target view forms block 2. ``positions``
    restart at 0 inside each block.
    """

    text_start: int
    text_size: int
    pred_size: int
    code_start: int
    code_size: int
    positions: np.ndarray = field(repr=False)
    direction: str = "text_to_code"
    placement: str = "append"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ContractError(f"unknown direction {self.direction!r}")
        if self.placement not in PLACEMENTS:
            raise ContractError(f"unknown placement {self.placement!r}")
        if min(self.text_size, self.code_size) < 1 or self.pred_size < 0:
            raise ContractError("views must be non-empty and pred_size nonnegative")
        b1, b2 = self.block1, self.block2
        src_start, src_stop = self.view_span(self.source_view)
        tgt_start, tgt_stop = self.view_span(self.target_view)
        want_src_start = self.pred_size if self.placement == "prepend" else 0
        if src_start != want_src_start or src_stop > b1[1]:
            raise ContractError(
                f"source span [{src_start}, {src_stop}) does not tile block 1 {b1}")
        if (tgt_start, tgt_stop) != b2:
            raise ContractError(
                f"target span [{tgt_start}, {tgt_stop}) does not equal block 2 {b2}")
        expect = np.concatenate([np.arange(b1[1] - b1[0]), np.arange(b2[1] - b2[0])])
        if self.positions.shape != (self.total_length,) or not np.array_equal(self.positions, expect):
            raise ContractError("positions must restart at 0 in each block")

    @property
    def total_length(self) -> int:
        return self.text_size + self.pred_size + self.code_size

    @property
    def block1(self) -> tuple[int, int]:
        """(start, end) of the source view plus predictor tokens."""
        src = self.text_size if self.direction == "text_to_code" else self.code_size
        return (0, src + self.pred_size)

    @property
    def block2(self) -> tuple[int, int]:
        start = self.block1[1]
        return (start, self.total_length)

    @property
    def predictor_read_index(self) -> int:
        """Row holding the predictor output.

        Appended predictor tokens end block 1, so this is the last
        predictor token; with prepend (or k=0) it is the last source
        token, the only causally complete summary of the view.
        """
        return self.block1[1] - 1

    def view_span(self, which: str) -> tuple[int, int]:
        if which == "text":
            return (self.text_start, self.text_start + self.text_size)
        if which == "code":
            return (self.code_start, self.code_start + self.code_size)
        raise ContractError(f"unknown view {which!r}")

    @property
    def source_view(self) -> str:
        return "text" if self.direction == "text_to_code" else "code"

    @property
    def target_view(self) -> str:
        return "code" if self.direction == "text_to_code" else "text"


def additive_mask(k: int) -> np.ndarray:
    """Standard causal mask: (i, j) = 0 when j <= i, -inf above the diagonal."""
    if k < 1:
        raise ContractError(f"mask size must be >= 1, got {k}")
    m = np.full((k, k), -np.inf)
    m[np.tril_indices(k)] = 0.0
    return m


_CAUSAL_CACHE: dict[int, np.ndarray] = {}


def causal_mask(k: int) -> np.ndarray:
    """Cached, read-only view of additive_mask(k); callers must not mutate it."""
    m = _CAUSAL_CACHE.get(k)
    if m is None:
        m = additive_mask(k)
        m.flags.writeable = False
        if len(_CAUSAL_CACHE) < 512:
            _CAUSAL_CACHE[k] = m
    return m


def block_causal_mask(layout: SegmentLayout, L: int) -> np.ndarray:
    """All -inf except the lower triangles inside each of the two blocks.

    Rows at or beyond the layout's end (padding) attend only to
    themselves so softmax stays defined; they carry no loss.
    """
    end = layout.total_length
    if end > L:
        raise ContractError(f"layout length {end} exceeds sequence length {L}")
    m = np.full((L, L), -np.inf)
    for start, stop in (layout.block1, layout.block2):
        n = stop - start
        m[start:stop, start:stop][np.tril_indices(n)] = 0.0
    for i in range(end, L):
        m[i, i] = 0.0
    return m


def pack_views(text_ids, code_ids, k: int, placement: str = "append",
               direction: str = "text_to_code", max_seq_len: int | None = None):
    """Pack two views and k predictor tokens into one sequence.

    Returns (tokens, positions, layout). The source view per
    ``direction`` comes first with its predictor tokens appended or
    prepended; the target view follows.
    """
    text_ids = list(map(int, text_ids))
    code_ids = list(map(int, code_ids))
    if placement not in PLACEMENTS:
        raise ContractError(f"unknown placement {placement!r}")
    if direction not in DIRECTIONS:
        raise ContractError(f"unknown direction {direction!r}")
    if k < 0:
        raise ContractError(f"predictor token count must be >= 0, got {k}")
    if not text_ids or not code_ids:
        raise ContractError("both views must be non-empty")
    total = len(text_ids) + k + len(code_ids)
    if max_seq_len is not None and total > max_seq_len:
        raise CapacityError(f"packed length {total} exceeds max_seq_len {max_seq_len}")

    src, tgt = (text_ids, code_ids) if direction == "text_to_code" else (code_ids, text_ids)
    preds = [PRED] * k
    block1 = src + preds if placement == "append" else preds + src
    src_start = 0 if placement == "append" else k
    tgt_start = len(block1)
    tokens = np.asarray(block1 + tgt, dtype=np.int64)
    positions = np.concatenate([np.arange(len(block1)), np.arange(len(tgt))]).astype(np.int64)

    if direction == "text_to_code":
        text_start, code_start = src_start, tgt_start
    else:
        text_start, code_start = tgt_start, src_start
    layout = SegmentLayout(text_start=text_start, text_size=len(text_ids), pred_size=k,
                           code_start=code_start, code_size=len(code_ids),
                           positions=positions, direction=direction, placement=placement)
    return tokens, positions, layout
