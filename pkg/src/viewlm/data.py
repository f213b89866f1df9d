"""Corpus formats, a deterministic synthetic paired-view generator, and batching.

The synthetic corpus pairs an English description of a line-matching
rule with the regex-like pattern implementing it. The grammar's
compiler is public: a description maps to exactly one pattern, which
makes generated pairs independently checkable.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
from dataclasses import dataclass

import numpy as np

from . import tokenizer
from .errors import CapacityError, ContractError, FormatError
from .masking import SegmentLayout, pack_views
from .objectives import ObjectiveConfig

FORMAT_VERSION = 1
_SHUFFLE_DOMAIN = 1


@dataclass(frozen=True)
class ViewPairExample:
    text: str
    code: str
    id: str

    def __post_init__(self):
        if not self.text or not self.code:
            raise ContractError("both views must be non-empty")


@dataclass(frozen=True)
class ViewGroupExample:
    views: tuple[str, ...]
    id: str

    def __post_init__(self):
        if len(self.views) < 2 or any(not v for v in self.views):
            raise ContractError("a view group needs >= 2 non-empty views")


@dataclass(frozen=True)
class CorpusManifest:
    n_examples: int
    n_train: int
    n_test: int
    format_version: int
    checksum: str
    seed: int | None = None
    grammar_depth: int | None = None


def example_id(*views: str) -> str:
    return hashlib.sha256("\x00".join(views).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# synthetic grammar

_ATOMS = (
    ("a digit", "[0-9]"),
    ("a vowel", "[AEIOU]"),
    ("a letter", "[A-Z]"),
    ("the word 'dog'", "dog"),
    ("the word 'cat'", "cat"),
    ("the word 'owl'", "owl"),
    ("the word 'fox'", "fox"),
)
_REPEATS = (
    ("", None),
    (", 2 or more times", "{2,}"),
    (", 3 or more times", "{3,}"),
    (", zero or more times", "*"),
)
_HEADS = (
    ("lines starting with ", "{expr}.*"),
    ("lines ending with ", ".*{expr}"),
    ("lines containing ", ".*{expr}.*"),
)
_JOIN = " followed by "
MAX_GRAMMAR_DEPTH = 4


def _terms() -> list[tuple[str, str]]:
    out = []
    for phrase, pat in _ATOMS:
        for suffix, rep in _REPEATS:
            out.append((phrase + suffix, pat if rep is None else f"({pat}){rep}"))
    return out


def compile_description(text: str) -> str:
    """Deterministically compile a grammar description into its pattern.

    This is the grammar's single source of truth; the generator emits
    (description, compile_description(description)) pairs.
    """
    for head, template in _HEADS:
        if text.startswith(head):
            break
    else:
        raise ContractError(f"description has no known head: {text[:40]!r}")
    term_map = dict(_terms())
    parts = text[len(head):].split(_JOIN)
    pats = []
    for part in parts:
        pat = term_map.get(part)
        if pat is None:
            raise ContractError(f"unknown clause {part!r}")
        pats.append(pat)
    return template.format(expr="".join(pats))


def _description_space(depth: int) -> list[str]:
    terms = _terms()
    out = []
    for head, _ in _HEADS:
        for length in range(1, depth + 1):
            for combo in itertools.product(range(len(terms)), repeat=length):
                out.append(head + _JOIN.join(terms[i][0] for i in combo))
    return out


def generate_synthetic_corpus(seed: int, n_examples: int,
                              grammar_depth: int = 2) -> list[ViewPairExample]:
    """Sample distinct (description, pattern) pairs without replacement."""
    if n_examples < 1:
        raise ContractError(f"n_examples must be >= 1, got {n_examples}")
    if not 1 <= grammar_depth <= MAX_GRAMMAR_DEPTH:
        raise ContractError(f"grammar_depth must be in [1, {MAX_GRAMMAR_DEPTH}]")
    space = _description_space(grammar_depth)
    if n_examples > len(space):
        raise ContractError(
            f"{n_examples} examples requested but the depth-{grammar_depth} "
            f"grammar has only {len(space)} descriptions")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    picks = rng.permutation(len(space))[:n_examples]
    out = []
    for i in picks:
        text = space[int(i)]
        code = compile_description(text)
        out.append(ViewPairExample(text=text, code=code, id=example_id(text, code)))
    return out


def split_examples(examples):
    """Hash-partition into (train, test); ids ending up in test ~10% of the time."""
    train, test = [], []
    for ex in examples:
        (test if int(ex.id[:2], 16) % 10 == 0 else train).append(ex)
    return train, test


# ---------------------------------------------------------------------------
# JSONL + manifest

def _file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(corpus_path) -> str:
    return f"{corpus_path}.manifest.json"


def write_jsonl(path, examples, seed: int | None = None,
                grammar_depth: int | None = None) -> CorpusManifest:
    """Write one JSON object per line plus a manifest sidecar."""
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            if isinstance(ex, ViewPairExample):
                obj = {"id": ex.id, "text": ex.text, "code": ex.code}
            else:
                obj = {"id": ex.id, "views": list(ex.views)}
            f.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")
    n_train = sum(1 for ex in examples if int(ex.id[:2], 16) % 10 != 0)
    manifest = CorpusManifest(n_examples=len(examples), n_train=n_train,
                              n_test=len(examples) - n_train,
                              format_version=FORMAT_VERSION,
                              checksum=_file_checksum(path), seed=seed,
                              grammar_depth=grammar_depth)
    with open(manifest_path(path), "w", encoding="utf-8") as f:
        json.dump(manifest.__dict__, f, sort_keys=True, indent=2)
        f.write("\n")
    return manifest


def load_jsonl(path, verify_manifest: bool = True):
    """Parse a corpus file; refuses mixed pair/group schemas and stale manifests."""
    mpath = manifest_path(path)
    if verify_manifest and os.path.exists(mpath):
        with open(mpath, "r", encoding="utf-8") as f:
            recorded = json.load(f).get("checksum")
        actual = _file_checksum(path)
        if recorded != actual:
            raise FormatError(
                f"checksum mismatch for {path}: manifest {recorded}, file {actual}")
    examples = []
    kind = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise FormatError(f"{path}:{lineno}: expected a JSON object")
            has_pair = "text" in obj and "code" in obj
            has_group = "views" in obj
            if has_pair == has_group:
                raise FormatError(
                    f"{path}:{lineno}: need either text+code or views, got {sorted(obj)}")
            this_kind = "pair" if has_pair else "group"
            if kind is None:
                kind = this_kind
            elif kind != this_kind:
                raise FormatError(f"{path}:{lineno}: mixed schemas ({kind} then {this_kind})")
            try:
                if has_pair:
                    ex = ViewPairExample(text=obj["text"], code=obj["code"],
                                         id=obj.get("id") or example_id(obj["text"], obj["code"]))
                else:
                    views = tuple(obj["views"])
                    ex = ViewGroupExample(views=views, id=obj.get("id") or example_id(*views))
            except (ContractError, TypeError) as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
            examples.append(ex)
    return examples


# ---------------------------------------------------------------------------
# batching

@dataclass
class BatchItem:
    example_id: str
    raw_tokens: np.ndarray
    raw_positions: np.ndarray
    raw_loss_mask: np.ndarray
    packed_tokens: np.ndarray
    packed_positions: np.ndarray
    layout: SegmentLayout


@dataclass
class Batch:
    items: list[BatchItem]

    @property
    def size(self) -> int:
        return len(self.items)


def _select_pair(ex, epoch: int) -> tuple[str, str]:
    if isinstance(ex, ViewPairExample):
        return ex.text, ex.code
    i = epoch % (len(ex.views) - 1)
    return ex.views[i], ex.views[i + 1]


def build_item(text: str, code: str, example_id_: str, config: ObjectiveConfig,
               max_seq_len: int) -> BatchItem:
    """Tokenize one pair into the raw causal sequence and the packed one.

    Raises CapacityError when either form exceeds ``max_seq_len``.
    """
    text_ids = tokenizer.encode(text)
    code_ids = tokenizer.encode(code)
    raw = [tokenizer.BOS] + text_ids + [tokenizer.SEP] + code_ids + [tokenizer.EOS]
    L = len(raw)
    if L > max_seq_len:
        raise CapacityError(f"raw sequence length {L} exceeds max_seq_len {max_seq_len}")
    sep_idx = 1 + len(text_ids)
    if config.loss_mask_mode == "completion_only":
        loss_mask = np.zeros(L - 1, dtype=bool)
        loss_mask[sep_idx:] = True
    else:
        loss_mask = np.ones(L - 1, dtype=bool)
    packed_tokens, packed_positions, layout = pack_views(
        text_ids, code_ids, config.k, config.placement, config.direction, max_seq_len)
    return BatchItem(example_id=example_id_,
                     raw_tokens=np.asarray(raw, dtype=np.int64),
                     raw_positions=np.arange(L, dtype=np.int64),
                     raw_loss_mask=loss_mask,
                     packed_tokens=packed_tokens,
                     packed_positions=packed_positions,
                     layout=layout)


def make_batches(examples, batch_size: int, config: ObjectiveConfig, max_seq_len: int,
                 seed: int, epoch: int) -> tuple[list[Batch], int]:
    """Shuffle, tokenize, and chunk; returns (batches, skipped_count).

    Oversize examples are skipped and counted. Group examples
    contribute the (i, i+1) view pair rotated by epoch.
    """
    if not examples:
        raise ContractError("empty corpus")
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    items = []
    skipped = 0
    for ex in examples:
        text, code = _select_pair(ex, epoch)
        try:
            items.append(build_item(text, code, ex.id, config, max_seq_len))
        except CapacityError:
            skipped += 1
    if not items:
        raise ContractError("every example exceeded max_seq_len")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _SHUFFLE_DOMAIN, int(epoch)]))
    order = rng.permutation(len(items))
    shuffled = [items[int(i)] for i in order]
    return [Batch(items=shuffled[i:i + batch_size])
            for i in range(0, len(shuffled), batch_size)], skipped
