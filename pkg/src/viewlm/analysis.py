"""Representation geometry: view embeddings, difference spectra, linear fit.

Embeddings always come from standalone forwards with a plain causal
mask, so the numbers describe the model as a probe would see it, free
of any packed-mask interaction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tokenizer
from .data import ViewPairExample
from .errors import ContractError
from .masking import causal_mask
from .model import Model, load_checkpoint

RIDGE_EPS = 1e-8
TOP_K = 100

ROLES = ("text", "code", "predictor")


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray
    role: str
    provenance: dict


@dataclass
class LinearFitResult:
    residual: float
    avg_top_singular: float
    n_singular: int
    underdetermined: bool


def _view_strings(ex) -> tuple[str, str]:
    if isinstance(ex, ViewPairExample):
        return ex.text, ex.code
    return ex.views[0], ex.views[1]


def extract_embeddings(model: Model, examples, which: str, k: int = 0,
                       placement: str = "append", provenance: dict | None = None) -> EmbeddingMatrix:
    """Final-layer embedding of one view per example, in corpus order.

    ``predictor`` forwards the text view with k predictor tokens per
    ``placement`` and reads the last row; with k=0 that is exactly the
    text embedding.
    """
    if which not in ROLES:
        raise ContractError(f"unknown view role {which!r}")
    if not examples:
        raise ContractError("no examples to embed")
    rows = np.empty((len(examples), model.config.d_model))
    for i, ex in enumerate(examples):
        text, code = _view_strings(ex)
        if which == "code":
            ids = tokenizer.encode(code)
        else:
            ids = tokenizer.encode(text)
            if which == "predictor" and k > 0:
                preds = [tokenizer.PRED] * k
                ids = ids + preds if placement == "append" else preds + ids
        L = len(ids)
        _, hidden = model.forward(ids, np.arange(L), causal_mask(L))
        rows[i] = hidden.data[-1]
    return EmbeddingMatrix(rows=rows, role=which,
                           provenance=dict(provenance or {}, k=k, placement=placement))


def _rows(m) -> np.ndarray:
    arr = m.rows if isinstance(m, EmbeddingMatrix) else np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"embedding matrix must be 2-D, got shape {arr.shape}")
    return arr


def diff_spectrum(T, C, top_k: int = TOP_K) -> np.ndarray:
    """Descending singular values of T - C via the d x d Gram matrix.

    Returns min(top_k, min(n, d)) values; eigenvalues are clipped at
    zero before the square root to absorb f64 round-off.
    """
    t, c = _rows(T), _rows(C)
    if t.shape != c.shape:
        raise ContractError(f"embedding shapes differ: {t.shape} vs {c.shape}")
    diff = t - c
    gram = diff.T @ diff
    eigvals = np.linalg.eigh(gram)[0]
    sv = np.sqrt(np.clip(eigvals, 0.0, None))[::-1]
    return sv[:min(top_k, min(diff.shape))]


def linear_fit_residual(T, C) -> LinearFitResult:
    """Frobenius residual of the ridge least-squares map from T to C.

    Also reports the mean of the top min(100, rank bound) singular
    values of T - C, the desk-scale stand-in for a top-100 average.
    """
    t, c = _rows(T), _rows(C)
    if t.shape != c.shape:
        raise ContractError(f"embedding shapes differ: {t.shape} vs {c.shape}")
    n, d = t.shape
    x = np.linalg.solve(t.T @ t + RIDGE_EPS * np.eye(d), t.T @ c)
    residual = float(np.linalg.norm(t @ x - c))
    sv = diff_spectrum(t, c, TOP_K)
    return LinearFitResult(residual=residual, avg_top_singular=float(sv.mean()),
                           n_singular=len(sv), underdetermined=n < d)


def write_embeddings_csv(path, matrix: EmbeddingMatrix) -> None:
    prov = " ".join(f"{k}={v}" for k, v in sorted(matrix.provenance.items()))
    np.savetxt(path, matrix.rows, delimiter=",", header=f"role={matrix.role} {prov}")


def analyze_checkpoint(checkpoint_path, examples, out_dir) -> dict:
    """Extract text/code embeddings, write CSVs, and report geometry metrics."""
    os.makedirs(out_dir, exist_ok=True)
    config, weights = load_checkpoint(checkpoint_path)
    model = Model(config, weights)
    prov = {"checkpoint": os.path.basename(str(checkpoint_path)), "n_examples": len(examples)}
    T = extract_embeddings(model, examples, "text", provenance=prov)
    C = extract_embeddings(model, examples, "code", provenance=prov)
    write_embeddings_csv(os.path.join(out_dir, "embeddings_text.csv"), T)
    write_embeddings_csv(os.path.join(out_dir, "embeddings_code.csv"), C)
    spectrum = diff_spectrum(T, C, TOP_K)
    np.savetxt(os.path.join(out_dir, "spectrum.csv"), spectrum, delimiter=",",
               header="singular values of text - code, descending")
    fit = linear_fit_residual(T, C)
    report = {
        "residual": fit.residual,
        "avg_top_singular": fit.avg_top_singular,
        "n_singular": fit.n_singular,
        "underdetermined": fit.underdetermined,
        "n_rows": int(T.rows.shape[0]),
        "d_model": int(T.rows.shape[1]),
        "provenance": prov,
    }
    with open(os.path.join(out_dir, "analysis_report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    return report
