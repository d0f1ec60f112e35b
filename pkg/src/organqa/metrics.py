"""Dice metrics, AUROC/AUPR and percentile bootstrap confidence intervals."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .voxelgrid import MultiChannelVolume, VoxelMask


class UndefinedMetricError(ValueError):
    """Raised when a ranking metric is undefined for the given labels."""


@dataclass
class ScoredCase:
    case_id: str
    organ: str
    score: float
    label: Optional[int] = None
    true_dice: Optional[float] = None


def _bool_array(m) -> np.ndarray:
    data = m.data if isinstance(m, VoxelMask) else np.asarray(m)
    return data.astype(bool, copy=False)


def dice(a, b) -> float:
    """Dice coefficient of two binary masks; two empty masks score 1."""
    a, b = _bool_array(a), _bool_array(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    denom = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / denom


def mean_dice_loss(recon, target) -> float:
    """Mean over channels of ``1 - 2*sum(r*t) / (sum(r) + sum(t))``.

    Accepts MultiChannelVolumes or ``(C, ...)`` arrays; soft values are used as
    they are. A channel empty in both inputs contributes zero loss.
    """
    r = np.asarray(recon.values if isinstance(recon, MultiChannelVolume) else recon, np.float64)
    t = np.asarray(target.values if isinstance(target, MultiChannelVolume) else target, np.float64)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {t.shape}")
    if isinstance(recon, MultiChannelVolume) and isinstance(target, MultiChannelVolume):
        if recon.channels != target.channels:
            raise ValueError("channel names differ")
    r = r.reshape(r.shape[0], -1)
    t = t.reshape(t.shape[0], -1)
    inter = (r * t).sum(axis=1)
    denom = r.sum(axis=1) + t.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(denom > 0, 2.0 * inter / np.where(denom > 0, denom, 1.0), 1.0)
    return float(np.mean(1.0 - d))


def _scores_labels(cases) -> tuple[np.ndarray, np.ndarray]:
    cases = list(cases)
    scores = np.array([c.score for c in cases], dtype=float)
    labels = np.array([c.label for c in cases])
    if any(l not in (0, 1) for l in labels):
        raise ValueError("every case needs a 0/1 label")
    return scores, labels.astype(int)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUROC from arrays; tied pairs count one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative cases")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=float)
    # average 1-based rank within tie blocks
    _, start, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    avg = start + (counts + 1) / 2.0
    ranks[order] = np.repeat(avg, counts)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise AP; tied scores are processed as one block."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR needs at least one positive case")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    block_end = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]  # not diff: inf - inf is nan
    tp = np.cumsum(y)[block_end]
    predicted = block_end + 1
    recall = tp / n_pos
    precision = tp / predicted
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def auroc(cases: Iterable[ScoredCase]) -> float:
    return roc_auc(*_scores_labels(cases))


def aupr(cases: Iterable[ScoredCase]) -> float:
    return average_precision(*_scores_labels(cases))


METRICS: dict[str, Callable] = {"auroc": roc_auc, "aupr": average_precision}


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    lo: float
    hi: float
    n_valid: int


def bootstrap_indices(n: int, resamples: int, seed: int) -> np.ndarray:
    """All resample index lists, drawn upfront from one seeded stream."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, n, size=(resamples, n))


def bootstrap_ci(
    cases: Sequence[ScoredCase],
    metric: str = "auroc",
    resamples: int = 1000,
    seed: int = 0,
    confidence: float = 0.95,
    indices: Optional[np.ndarray] = None,
) -> BootstrapResult:
    """Percentile bootstrap interval; single-class resamples are skipped."""
    fn = METRICS[metric]
    scores, labels = _scores_labels(cases)
    point = fn(scores, labels)
    if indices is None:
        indices = bootstrap_indices(len(scores), resamples, seed)
    stats = []
    for idx in indices:
        try:
            stats.append(fn(scores[idx], labels[idx]))
        except UndefinedMetricError:
            continue
    if not stats:
        return BootstrapResult(point, point, point, 0)
    tail = (1.0 - confidence) / 2.0 * 100.0
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return BootstrapResult(point, float(lo), float(hi), len(stats))


# ---------------------------------------------------------------------------
# CSV

CASE_FIELDS = ("case_id", "organ", "score", "true_dice", "label")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_cases_csv(cases: Iterable[ScoredCase], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CASE_FIELDS)
        for c in cases:
            w.writerow([c.case_id, c.organ, _fmt(float(c.score)),
                        _fmt(None if c.true_dice is None else float(c.true_dice)),
                        _fmt(c.label)])


class SchemaError(ValueError):
    pass


def read_cases_csv(path) -> list[ScoredCase]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CASE_FIELDS:
            raise SchemaError(f"{path}: expected columns {','.join(CASE_FIELDS)}, got {reader.fieldnames}")
        out = []
        for row in reader:
            try:
                out.append(ScoredCase(
                    case_id=row["case_id"],
                    organ=row["organ"],
                    score=float(row["score"]),
                    true_dice=float(row["true_dice"]) if row["true_dice"] else None,
                    label=int(row["label"]) if row["label"] else None,
                ))
            except ValueError as exc:
                raise SchemaError(f"{path}: bad row {row}: {exc}") from None
    return out
