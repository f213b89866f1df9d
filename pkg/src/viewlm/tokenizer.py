"""Reversible byte-level tokenizer with the reserved control tokens.

Ids 0..255 are raw bytes; the five control ids follow densely. The
vocabulary is fixed, so every model checkpoint shares it.
"""

from __future__ import annotations

import numpy as np

from .errors import VocabularyError

PAD = 256
BOS = 257
EOS = 258
SEP = 259
PRED = 260
N_VOCAB = 261

_SPECIALS = frozenset((PAD, BOS, EOS, SEP, PRED))


def encode(text: str) -> list[int]:
    """UTF-8 bytes of ``text`` as token ids; never inserts control tokens."""
    return list(text.encode("utf-8"))


def decode(ids, errors: str = "strict") -> str:
    """Inverse of ``encode``; control tokens are stripped before byte decoding.

    ``errors`` follows ``bytes.decode`` ("strict" raises on malformed UTF-8,
    "replace" substitutes U+FFFD; generated sequences may split multibyte
    characters).
    """
    out = bytearray()
    for i in np.asarray(ids).tolist() if not isinstance(ids, list) else ids:
        i = int(i)
        if i in _SPECIALS:
            continue
        if not 0 <= i < 256:
            raise VocabularyError(f"token id {i} outside vocabulary of {N_VOCAB}")
        out.append(i)
    return out.decode("utf-8", errors=errors)
