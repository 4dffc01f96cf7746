"""Utility and popularity-bias metrics over a simulation run."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Checkpoint:
    iteration: int
    cumulative_clicks: int
    gini_tpr: float
    alpha: float


@dataclass
class MetricSeries:
    checkpoints: list[Checkpoint] = field(default_factory=list)

    def append(self, iteration: int, cumulative_clicks: int, gini_tpr: float, alpha: float) -> None:
        if self.checkpoints:
            last = self.checkpoints[-1]
            if iteration <= last.iteration:
                raise ValueError(f"checkpoint iterations must increase ({last.iteration} -> {iteration})")
            if cumulative_clicks < last.cumulative_clicks:
                raise ValueError("cumulative clicks decreased")
        self.checkpoints.append(Checkpoint(int(iteration), int(cumulative_clicks), float(gini_tpr), float(alpha)))

    @property
    def iterations(self) -> np.ndarray:
        return np.array([c.iteration for c in self.checkpoints], dtype=np.int64)

    @property
    def clicks(self) -> np.ndarray:
        return np.array([c.cumulative_clicks for c in self.checkpoints], dtype=np.int64)

    @property
    def gini(self) -> np.ndarray:
        return np.array([c.gini_tpr for c in self.checkpoints], dtype=float)

    @property
    def alpha(self) -> np.ndarray:
        return np.array([c.alpha for c in self.checkpoints], dtype=float)

    def __len__(self) -> int:
        return len(self.checkpoints)


def true_positive_rates(counts, audience_sizes) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    audience_sizes = np.asarray(audience_sizes, dtype=float)
    if counts.shape != audience_sizes.shape:
        raise ValueError(f"length mismatch: {counts.shape} clicks vs {audience_sizes.shape} audience sizes")
    if np.any(audience_sizes <= 0):
        raise ValueError("audience sizes must be >= 1")
    return counts / audience_sizes


def gini_of(values, order_key) -> float:
    """Gini of ``values`` with items ordered by ``order_key`` ascending.

    Ties in ``order_key`` are broken by item index. Unlike the textbook Gini the
    ordering is external, so the result is negative when large values sit on
    items with small keys. Returns 0 for an all-zero vector.
    """
    v = np.asarray(values, dtype=float)
    key = np.asarray(order_key)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("need a non-empty 1-d vector")
    if key.shape != v.shape:
        raise ValueError("values and order_key must have the same length")
    if np.any(v < 0):
        raise ValueError("values must be non-negative")
    total = v.sum()
    if total == 0:
        return 0.0
    m = v.size
    order = np.lexsort((np.arange(m), key))
    ranks = np.arange(1, m + 1, dtype=float)
    return float(np.dot(2 * ranks - m - 1, v[order]) / (m * total))


def cumulative_clicks(log, t: float = math.inf, phases=None) -> int:
    """Clicked records with ``iteration <= t`` whose phase is in ``phases`` (all phases when None)."""
    it, clicked, phase = log.iteration, log.clicked, log.phase
    mask = clicked & (it <= t)
    if phases is not None:
        mask &= np.isin(phase, [int(p) for p in phases])
    return int(mask.sum())
