"""Margin and compactness metrics for prototype/feature configurations.

Conventions: W is (k, d) with one prototype per row, Z is (N, d) with one
feature per row, labels is an int array of length N with values in [0, k).
Angles are kept in radians internally; serialized reports carry degrees too.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, MissingClassError
from .geometry import _as_matrix, normalize_rows, row_norms


def _check_labels(labels, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return y.astype(int)


def class_margin(w) -> float:
    """Smallest pairwise angle between prototypes, magnitudes ignored."""
    wh = normalize_rows(w)
    g = wh @ wh.T
    k = g.shape[0]
    if k < 2:
        raise ValueError("class margin needs at least two prototypes")
    off = g[~np.eye(k, dtype=bool)]
    return float(np.arccos(np.clip(off.max(), -1.0, 1.0)))


def sample_margin(w, z, y: int) -> float:
    """Target logit minus the largest competing logit, w_y.z - max_{j!=y} w_j.z."""
    w = _as_matrix(w)
    k = w.shape[0]
    if not 0 <= y < k:
        raise ValueError(f"label {y} out of range [0, {k})")
    logits = w @ np.asarray(z, dtype=float)
    others = np.delete(logits, y)
    return float(logits[y] - others.max())


def _sample_margins(w, z, labels) -> np.ndarray:
    """Vectorized sample margins for every row of Z."""
    w = _as_matrix(w)
    z = _as_matrix(z)
    y = _check_labels(labels, w.shape[0])
    logits = z @ w.T
    target = logits[np.arange(len(y)), y]
    masked = logits.copy()
    masked[np.arange(len(y)), y] = -np.inf
    return target - masked.max(axis=1)


def per_class_margins(w, z, labels) -> np.ndarray:
    """gamma_j: the smallest sample margin within each class."""
    w = _as_matrix(w)
    k = w.shape[0]
    y = _check_labels(labels, k)
    present = np.unique(y)
    missing = set(range(k)) - set(present.tolist())
    if missing:
        raise MissingClassError(missing)
    margins = _sample_margins(w, z, y)
    out = np.empty(k)
    for j in range(k):
        out[j] = margins[y == j].min()
    return out


def min_sample_margin(w, z, labels) -> float:
    """gamma_min over the whole dataset."""
    return float(per_class_margins(w, z, labels).min())


def mean_cosine_sample_margin(w, z, labels) -> float:
    """Mean over samples of cos(w_y, z) - max_{j!=y} cos(w_j, z)."""
    wh = normalize_rows(w)
    zh = normalize_rows(z)
    return float(_sample_margins(wh, zh, labels).mean())


def magnitude_ratio(w) -> float:
    """max_j ||w_j|| / min_j ||w_j||, always >= 1."""
    norms = row_norms(w)
    if np.any(norms == 0.0):
        raise DegenerateInputError(
            f"zero-norm row at index {int(np.flatnonzero(norms == 0.0)[0])}"
        )
    return float(norms.max() / norms.min())


def hard_margin_rate(w, z, labels, gamma: float) -> np.ndarray:
    """Per class, the fraction of its samples with sample margin < gamma.

    Strict inequality, so gamma=0 yields exactly the classification error
    rate of the argmax rule.
    """
    w = _as_matrix(w)
    k = w.shape[0]
    y = _check_labels(labels, k)
    missing = set(range(k)) - set(np.unique(y).tolist())
    if missing:
        raise MissingClassError(missing)
    margins = _sample_margins(w, z, y)
    out = np.empty(k)
    for j in range(k):
        mj = margins[y == j]
        out[j] = float(np.count_nonzero(mj < gamma)) / mj.size
    return out


CSV_COLUMNS = ("class_margin_deg", "gamma_min", "m_samp", "magnitude_ratio")


@dataclass
class MarginReport:
    """Everything the experiments report about one (W, Z, labels) instance."""

    class_margin: float  # radians
    per_class: np.ndarray  # gamma_j
    gamma_min: float
    m_samp: float
    magnitude_ratio: float
    hard_margin_rates: dict[float, float] = field(default_factory=dict)

    @property
    def class_margin_deg(self) -> float:
        return math.degrees(self.class_margin)

    def to_dict(self) -> dict:
        return {
            "class_margin_rad": self.class_margin,
            "class_margin_deg": self.class_margin_deg,
            "gamma_min": self.gamma_min,
            "m_samp": self.m_samp,
            "magnitude_ratio": self.magnitude_ratio,
            "per_class": [float(v) for v in self.per_class],
            "hard_margin_rates": {
                f"{g:g}": float(r) for g, r in sorted(self.hard_margin_rates.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_header(self) -> list[str]:
        return list(CSV_COLUMNS) + [f"gamma_{j}" for j in range(len(self.per_class))]

    def csv_row(self) -> list[str]:
        vals = [self.class_margin_deg, self.gamma_min, self.m_samp, self.magnitude_ratio]
        vals.extend(float(v) for v in self.per_class)
        return [f"{v:.12g}" for v in vals]


def build_report(w, z, labels, thresholds=(0.0,)) -> MarginReport:
    """Compute the full MarginReport for one configuration."""
    per_class = per_class_margins(w, z, labels)
    rates = {}
    for g in thresholds:
        rates[float(g)] = float(hard_margin_rate(w, z, labels, g).mean())
    return MarginReport(
        class_margin=class_margin(w),
        per_class=per_class,
        gamma_min=float(per_class.min()),
        m_samp=mean_cosine_sample_margin(w, z, labels),
        magnitude_ratio=magnitude_ratio(w),
        hard_margin_rates=rates,
    )
