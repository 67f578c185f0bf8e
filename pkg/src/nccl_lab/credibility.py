"""Credible-sample filter for old embeddings.

Each old embedding gets a soft assignment to the per-class old centers through
Gaussian kernels whose widths are the variances of each class's squared
distances to its center. Samples whose assignment entropy exceeds the
threshold are flagged non-credible and leave the contrastive candidate sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import OldEmbeddingBank
from .errors import ParameterError, ProtocolError
from .numeric import as_vec

VAR_FLOOR = 1e-6
DEFAULT_THRESHOLD_FACTOR = 0.5
SPREADS = ("var_sq", "mean_sq")


@dataclass
class ClassStatistics:
    centers: np.ndarray    # (K, d)
    variances: np.ndarray  # (K,)
    counts: np.ndarray     # (K,)

    @property
    def n_classes(self) -> int:
        return len(self.counts)


@dataclass
class FilterReport:
    removed_total: int
    removed_per_class: dict
    entropy_min: float
    entropy_median: float
    entropy_max: float
    threshold: float
    histogram: dict
    warnings: list

    def to_dict(self) -> dict:
        return {
            "removed_total": self.removed_total,
            "removed_per_class": {str(k): v for k, v in self.removed_per_class.items()},
            "entropy_min": self.entropy_min,
            "entropy_median": self.entropy_median,
            "entropy_max": self.entropy_max,
            "threshold": self.threshold,
            "histogram": self.histogram,
            "warnings": list(self.warnings),
        }


def class_stats(bank: OldEmbeddingBank, n_classes: int, var_floor: float = VAR_FLOOR,
                spread: str = "var_sq") -> ClassStatistics:
    """Per-class centers and kernel widths.

    ``spread="var_sq"`` uses the variance of the squared center distances;
    ``"mean_sq"`` uses their mean (the class's total variance).
    """
    if spread not in SPREADS:
        raise ParameterError(f"spread must be one of {SPREADS}")
    emb = bank.embeddings
    centers = np.zeros((n_classes, emb.shape[1]))
    variances = np.zeros(n_classes)
    counts = np.zeros(n_classes, dtype=np.int64)
    for k in range(n_classes):
        members = emb[bank.labels == k]
        if len(members) == 0:
            raise ProtocolError(f"class {k} has no bank entries")
        centers[k] = members.mean(axis=0)
        sq = np.sum((members - centers[k]) ** 2, axis=1)
        width = np.var(sq) if spread == "var_sq" else np.mean(sq)
        variances[k] = max(float(width), var_floor)
        counts[k] = len(members)
    return ClassStatistics(centers, variances, counts)


def pseudo_assignment(stats: ClassStatistics, old_emb) -> np.ndarray:
    """Kernel assignment over classes; accepts one vector or a stack of rows."""
    x = as_vec(old_emb)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    sq = np.sum((X[:, None, :] - stats.centers[None, :, :]) ** 2, axis=2)
    logits = -sq / stats.variances[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if single else p


def entropy(p) -> np.ndarray | float:
    p = as_vec(p)
    terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = terms.sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def threshold_for(n_classes: int, factor: float = DEFAULT_THRESHOLD_FACTOR) -> float:
    return factor * float(np.log(n_classes))


def apply_filter(bank: OldEmbeddingBank, stats: ClassStatistics, threshold: float,
                 bins: int = 10) -> tuple[OldEmbeddingBank, FilterReport]:
    if not threshold >= 0:
        raise ParameterError("entropy threshold must be non-negative")
    H = entropy(pseudo_assignment(stats, bank.embeddings))
    H = np.atleast_1d(H)
    removed = H > threshold
    new_bank = bank.with_credible(bank.credible & ~removed)

    per_class = {}
    warnings = []
    for k in range(stats.n_classes):
        in_class = bank.labels == k
        per_class[k] = int(np.sum(removed & in_class))
        if in_class.any() and not new_bank.credible[in_class].any():
            warnings.append(f"every entry of class {k} was filtered; its anchors have no positives")
    edges = np.linspace(0.0, float(np.log(max(stats.n_classes, 2))), bins + 1)
    counts, _ = np.histogram(np.clip(H, edges[0], edges[-1]), bins=edges)
    report = FilterReport(
        removed_total=int(removed.sum()),
        removed_per_class=per_class,
        entropy_min=float(H.min()),
        entropy_median=float(np.median(H)),
        entropy_max=float(H.max()),
        threshold=float(threshold),
        histogram={"edges": [float(e) for e in edges], "counts": counts.tolist()},
        warnings=warnings,
    )
    return new_bank, report


def filter_bank(bank: OldEmbeddingBank, n_classes: int, factor: float = DEFAULT_THRESHOLD_FACTOR,
                spread: str = "var_sq"):
    """Stats, threshold and filter in one call."""
    stats = class_stats(bank, n_classes, spread=spread)
    return apply_filter(bank, stats, threshold_for(n_classes, factor))
