"""Evaluation metric, norm heatmaps, diagnostics and CSV export.

All floats are written with 17 significant digits so every CSV parses back
to the exact binary value.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import UndefinedCorrelationError
from .nn import GradientSet, ModelParams

log = logging.getLogger(__name__)


def fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class NormHeatmap:
    matrix: np.ndarray
    row_labels: list[str]
    col_labels: list[str]


@dataclass
class RunSummary:
    best_mean_accuracy: float
    best_round: int
    accuracy_trace: list[float]
    final_mean_omega: float
    config_hash: str
    algorithm: str = ""
    manifest_checksum: str = ""
    pattern_correlation: Optional[float] = None
    extra: dict = field(default_factory=dict)


def best_mean_accuracy(trace) -> tuple[float, int]:
    """Highest per-round mean accuracy and the first index attaining it.

    ``trace`` holds RoundReports or plain per-round means.
    """
    means = [r if isinstance(r, (int, float, np.floating)) else r.mean_accuracy for r in trace]
    if not means:
        raise ValueError("empty accuracy trace")
    best = int(np.argmax(means))
    return float(means[best]), best


def norm_heatmap(models: Sequence[ModelParams], row_prefix: str = "client") -> NormHeatmap:
    """Entry [i, j] is the L2 norm of output-layer row j of model i."""
    if not models:
        raise ValueError("no models given")
    k = models[0].num_classes
    for m in models:
        if m.shapes != models[0].shapes:
            raise ValueError("models must share one architecture")
    mat = np.stack([np.linalg.norm(m.final_weights, axis=1) for m in models])
    return NormHeatmap(mat, [f"{row_prefix}_{i}" for i in range(len(models))], [f"class_{j}" for j in range(k)])


def _row_normalise(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    sums = mat.sum(axis=1, keepdims=True)
    return np.divide(mat, sums, out=np.zeros_like(mat), where=sums > 0)


def pattern_correlation(norms: NormHeatmap | np.ndarray, data_counts: np.ndarray) -> float:
    """Pearson correlation of the row-normalised norm and count matrices, flattened.

    Raises when either matrix has no variation, or when every row of the norm
    matrix is the same (identical models carry no per-client pattern).
    """
    a = norms.matrix if isinstance(norms, NormHeatmap) else np.asarray(norms, dtype=np.float64)
    b = np.asarray(data_counts, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: norms {a.shape} vs counts {b.shape}")
    a, b = _row_normalise(a), _row_normalise(b)
    if a.shape[0] > 1 and np.allclose(a, a[0], rtol=0, atol=1e-12):
        raise UndefinedCorrelationError("all norm rows identical: no per-client pattern")
    x, y = a.ravel() - a.mean(), b.ravel() - b.mean()
    sx, sy = np.sqrt(x @ x), np.sqrt(y @ y)
    if sx < 1e-15 or sy < 1e-15:
        raise UndefinedCorrelationError("constant matrix")
    return float((x @ y) / (sx * sy))


def pattern_correlation_or_none(norms, data_counts) -> Optional[float]:
    try:
        return pattern_correlation(norms, data_counts)
    except UndefinedCorrelationError as exc:
        log.info("no pattern: %s", exc)
        return None


def gradient_norm_ratio_diagnostic(grads: GradientSet, counts: Sequence[int]) -> np.ndarray:
    """Log-ratio residuals between output-row gradient energy and squared class counts.

    ``residual[j, k] = log(|g_j|^2 / |g_k|^2) - log(n_j^2 / n_k^2)``. Entries
    involving an empty class or a zero gradient row are NaN.
    """
    g = np.linalg.norm(grads.final_weights, axis=1) ** 2
    n = np.asarray(counts, dtype=np.float64)
    if len(n) != len(g):
        raise ValueError(f"{len(n)} counts for {len(g)} classes")
    ok = (n > 0) & (g > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.where(ok, np.log(g), np.nan)
        ln = np.where(ok, 2.0 * np.log(n), np.nan)
    out = (lg[:, None] - lg[None, :]) - (ln[:, None] - ln[None, :])
    return out


# ---- CSV export ------------------------------------------------------------

def _writer(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def write_per_client_trace(path, reports, attr: str) -> None:
    """``round, client_0..client_{M-1}, mean`` for ``accuracies`` or ``omegas``."""
    m = len(getattr(reports[0], attr))
    fh, w = _writer(path)
    with fh:
        w.writerow(["round", *[f"client_{i}" for i in range(m)], "mean"])
        for r in reports:
            vals = getattr(r, attr)
            w.writerow([r.round, *map(fmt, vals), fmt(np.mean(vals))])


def write_heatmap(path, heatmap: NormHeatmap, index_name: str = "model") -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow([index_name, *heatmap.col_labels])
        for label, row in zip(heatmap.row_labels, heatmap.matrix):
            w.writerow([label, *map(fmt, row)])


def write_lambda_sweep(path, rows) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["lambda", "best_mean_accuracy", "best_round", "mean_final_omega"])
        for lam, acc, rnd, omega in rows:
            w.writerow([fmt(lam), fmt(acc), int(rnd), fmt(omega)])


def write_batch_trace(path, reports) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["round", "client", "batch", "omega"])
        for r in reports:
            for client, batch, omega in r.batch_omegas:
                w.writerow([r.round, client, batch, fmt(omega)])


def read_matrix_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    """Parse a CSV with one label column followed by numeric columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    labels = [r[0] for r in body]
    mat = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64)
    return header, labels, mat
