"""Generation and probability scoring, plus the paired one-tailed t-test.

Decoding is greedy and deterministic. The t-test's Student CDF is
computed from the regularized incomplete beta function, evaluated with
a continued fraction; no stats dependency.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tokenizer
from .data import ViewGroupExample, ViewPairExample
from .errors import CapacityError, ContractError
from .masking import causal_mask
from .model import Model, load_checkpoint

MATCH_MODES = ("exact", "prefix", "substring", "label_prefix", "mc_option_prob")


@dataclass(frozen=True)
class EvalConfig:
    match_mode: str = "exact"
    max_new_tokens: int = 64
    stop_on_eos: bool = True
    strip_trailing_whitespace: bool = True
    length_normalize: bool = True

    def __post_init__(self):
        if self.match_mode not in MATCH_MODES:
            raise ContractError(f"unknown match mode {self.match_mode!r}")
        if self.max_new_tokens < 1:
            raise ContractError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool


@dataclass
class EvalReport:
    seeds: list[int]
    accuracies: list[float]
    mean: float
    sd: float
    baseline_ref: str | None
    t: float | None
    p: float | None
    config: dict


def greedy_generate(model: Model, prompt_ids, max_new_tokens: int,
                    stop_on_eos: bool = True) -> list[int]:
    """Argmax decoding; stops at EOS (excluded from the output) or budget.

    Ties break toward the lowest token id. The sequence also stops when
    it reaches the model's maximum length.
    """
    ids = [int(i) for i in prompt_ids]
    if len(ids) > model.config.max_seq_len:
        raise CapacityError(f"prompt length {len(ids)} exceeds "
                            f"max_seq_len {model.config.max_seq_len}")
    out = []
    for _ in range(max_new_tokens):
        if len(ids) >= model.config.max_seq_len:
            break
        L = len(ids)
        logits, _ = model.forward(ids, np.arange(L), causal_mask(L))
        next_id = int(np.argmax(logits.data[-1]))
        if stop_on_eos and next_id == tokenizer.EOS:
            break
        out.append(next_id)
        ids.append(next_id)
    return out


def score_match(generated: str, truths: list[str], mode: str,
                strip_trailing_whitespace: bool = True) -> bool:
    """Match a generated string against ground truths under one mode.

    Trailing whitespace is stripped from every truth (and from the
    generation for exact mode) when enabled, which keeps exact implying
    prefix implying substring on the same pair.
    """
    if not truths:
        raise ContractError("truths must be non-empty")
    if strip_trailing_whitespace:
        truths = [t.rstrip() for t in truths]
    if mode == "exact":
        g = generated.rstrip() if strip_trailing_whitespace else generated
        return g == truths[0]
    if mode in ("prefix", "label_prefix"):
        return generated.startswith(truths[0])
    if mode == "substring":
        return any(t in generated for t in truths)
    raise ContractError(f"unknown match mode {mode!r}")


def _option_logprob(model: Model, ctx_ids: list[int], option_ids: list[int]) -> float:
    seq = ctx_ids + option_ids
    L = len(seq)
    logits, _ = model.forward(seq, np.arange(L), causal_mask(L))
    rows = logits.data[len(ctx_ids) - 1:L - 1]
    z = rows - rows.max(axis=-1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    return float(logp[np.arange(len(option_ids)), option_ids].sum())


def mc_score(model: Model, context: str, options: list[str],
             length_normalize: bool = True) -> int:
    """Index of the option with the highest (per-token) log-probability.

    Ties break toward the lowest index.
    """
    if not options:
        raise ContractError("options must be non-empty")
    ctx_ids = [tokenizer.BOS] + tokenizer.encode(context)
    scores = []
    for opt in options:
        oids = tokenizer.encode(opt)
        if not oids:
            raise ContractError("cannot score an empty option")
        lp = _option_logprob(model, ctx_ids, oids)
        scores.append(lp / len(oids) if length_normalize else lp)
    return int(np.argmax(scores))


# ---------------------------------------------------------------------------
# Student t machinery

def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-15:
            return h
    raise ContractError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ContractError(f"x must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                     + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: int) -> float:
    """One-tailed survival P(T > t) for Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise ContractError(f"df must be >= 1, got {df}")
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def paired_t_test(accs_a, accs_b) -> TTestResult:
    """Paired one-tailed test of b over a: d = b - a, p = P(T > t).

    Zero-variance differences are degenerate: p is 0, 1, or 0.5 by the
    sign of the mean, flagged rather than computed.
    """
    a = np.asarray(accs_a, dtype=np.float64)
    b = np.asarray(accs_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"paired samples must be equal-length vectors, "
                            f"got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ContractError(f"need n >= 2 pairs, got {n}")
    d = b - a
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean > 0:
            return TTestResult(t=math.inf, p=0.0, df=df, degenerate=True)
        if mean < 0:
            return TTestResult(t=-math.inf, p=1.0, df=df, degenerate=True)
        return TTestResult(t=0.0, p=0.5, df=df, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t=t, p=student_t_sf(t, df), df=df, degenerate=False)


# ---------------------------------------------------------------------------
# corpus-level evaluation

def evaluate_checkpoint(model: Model, examples, config: EvalConfig):
    """Score every example; returns (accuracy, transcripts)."""
    if not examples:
        raise ContractError("no examples to evaluate")
    transcripts = []
    correct_count = 0
    for ex in examples:
        if config.match_mode == "mc_option_prob":
            if not isinstance(ex, ViewGroupExample) or len(ex.views) < 2:
                raise ContractError(
                    "mc_option_prob needs group examples: [context, options...]")
            chosen = mc_score(model, ex.views[0], list(ex.views[1:]),
                              config.length_normalize)
            correct = chosen == 0
            transcripts.append({"id": ex.id, "context": ex.views[0],
                                "chosen": chosen, "correct": correct})
        else:
            if isinstance(ex, ViewPairExample):
                text, truth = ex.text, ex.code
            else:
                text, truth = ex.views[0], ex.views[1]
            prompt = [tokenizer.BOS] + tokenizer.encode(text) + [tokenizer.SEP]
            gen_ids = greedy_generate(model, prompt, config.max_new_tokens,
                                      config.stop_on_eos)
            generated = tokenizer.decode(gen_ids, errors="replace")
            correct = score_match(generated, [truth], config.match_mode,
                                  config.strip_trailing_whitespace)
            transcripts.append({"id": ex.id, "text": text, "truth": truth,
                                "generated": generated, "correct": correct})
        correct_count += bool(correct)
    return correct_count / len(examples), transcripts


def _final_checkpoints(run_dir) -> list[tuple[int, str]]:
    with open(os.path.join(run_dir, "report.json"), "r", encoding="utf-8") as f:
        report = json.load(f)
    with open(os.path.join(run_dir, "config.json"), "r", encoding="utf-8") as f:
        seeds = json.load(f)["train"]["seeds"]
    out = []
    for seed in seeds:
        entry = report["per_seed"].get(str(seed))
        if entry is None or entry.get("status") != "ok":
            continue
        out.append((int(seed), os.path.join(run_dir, f"seed_{seed}",
                                            entry["final_checkpoint"])))
    if not out:
        raise ContractError(f"no completed seeds in {run_dir}")
    return out


def evaluate_run(run_dir, examples, config: EvalConfig, baseline_report: str | None = None,
                 out_dir=None) -> EvalReport:
    """Evaluate every completed seed's final checkpoint; write report + transcripts.

    ``baseline_report`` is a prior report.json path; pairing by seed
    must match exactly, and the test direction is this run minus the
    baseline.
    """
    out_dir = out_dir or os.path.join(run_dir, "eval")
    os.makedirs(out_dir, exist_ok=True)
    seeds, accuracies = [], []
    with open(os.path.join(out_dir, "transcripts.jsonl"), "w", encoding="utf-8") as tf:
        for seed, ckpt in _final_checkpoints(run_dir):
            cfg, weights = load_checkpoint(ckpt)
            acc, transcripts = evaluate_checkpoint(Model(cfg, weights), examples, config)
            seeds.append(seed)
            accuracies.append(acc)
            for tr in transcripts:
                tf.write(json.dumps({"seed": seed, **tr}, sort_keys=True,
                                    ensure_ascii=False) + "\n")
    t = p = None
    if baseline_report is not None:
        with open(baseline_report, "r", encoding="utf-8") as f:
            base = json.load(f)
        if base["seeds"] != seeds:
            raise ContractError(f"baseline seeds {base['seeds']} != run seeds {seeds}")
        result = paired_t_test(base["accuracies"], accuracies)
        t, p = result.t, result.p
    report = EvalReport(seeds=seeds, accuracies=accuracies,
                        mean=float(np.mean(accuracies)),
                        sd=float(np.std(accuracies, ddof=1)) if len(accuracies) > 1 else 0.0,
                        baseline_ref=baseline_report, t=t, p=p, config=asdict(config))
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(asdict(report), f, sort_keys=True, indent=2)
        f.write("\n")
    return report
