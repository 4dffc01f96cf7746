"""Position-based click model: a user clicks an item iff they examine it and like it."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Phase(enum.IntEnum):
    BOOTSTRAP = 0
    PERSONALIZED = 1
    RANDOM_PROBE = 2


@dataclass(frozen=True)
class ExposureRecord:
    user: int
    item: int
    position: int
    clicked: bool
    iteration: int
    phase: Phase


def examination_prob(k):
    """Probability of examining rank ``k`` (1-based): ``1 / log2(1 + k)``.

    Accepts a scalar or an array of positions.
    """
    k_arr = np.asarray(k)
    if np.any(k_arr < 1):
        raise ValueError(f"position must be >= 1, got {k}")
    out = 1.0 / np.log2(1.0 + k_arr)
    return float(out) if out.ndim == 0 else out


def position_bias(K: int) -> np.ndarray:
    """Examination probabilities for positions 1..K."""
    return examination_prob(np.arange(1, K + 1))


def sample_clicks(user: int, ranked_items, relevance: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorised click draw for one ranked list. Returns a boolean array aligned with ``ranked_items``."""
    items = np.asarray(ranked_items, dtype=np.int64)
    if items.size == 0:
        raise ValueError("ranked list is empty")
    if np.unique(items).size != items.size:
        seen, dupes = set(), []
        for it in items.tolist():
            if it in seen:
                dupes.append(it)
            seen.add(it)
        raise ValueError(f"duplicate items in ranked list: {dupes}")
    examined = rng.random(items.size) < position_bias(items.size)
    return examined & relevance[user, items].astype(bool)


def simulate_clicks(
    user: int,
    ranked_items,
    relevance: np.ndarray,
    rng: np.random.Generator,
    iteration: int = 0,
    phase: Phase = Phase.PERSONALIZED,
) -> list[ExposureRecord]:
    """One ``ExposureRecord`` per position of ``ranked_items``.

    Examinations are independent across positions (no cascade), so a user may
    click several items of the same list.
    """
    clicked = sample_clicks(user, ranked_items, relevance, rng)
    return [
        ExposureRecord(int(user), int(item), k, bool(c), int(iteration), Phase(phase))
        for k, (item, c) in enumerate(zip(np.asarray(ranked_items).tolist(), clicked.tolist()), start=1)
    ]
