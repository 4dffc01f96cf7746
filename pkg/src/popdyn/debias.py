"""Baseline rankers and post-hoc score corrections applied on top of MF predictions."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .click_model import examination_prob
from .mf import ModelParams, top_k


class PolicyKind(str, enum.Enum):
    NONE = "none"
    SCALE = "scale"
    DSCALE = "dscale"
    FPC = "fpc"
    FPC_DSCALE = "fpc_dscale"


@dataclass(frozen=True)
class DebiasPolicy:
    kind: PolicyKind = PolicyKind.NONE
    alpha: float = 0.0
    delta: float = 0.0
    # use the single-latent-relevance posterior instead of the product form
    fpc_posterior: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")

    def alpha_at(self, retrain_index: int) -> float:
        if self.kind in (PolicyKind.SCALE,):
            return self.alpha
        if self.kind in (PolicyKind.DSCALE, PolicyKind.FPC_DSCALE):
            return dscale_alpha(retrain_index, self.delta)
        return 0.0


class FalsePositiveIndex:
    """Positions of past exposures of item i to user u that were never clicked.

    A click on (u, i) drops that pair's history for good.
    """

    def __init__(self, n_users: int):
        self._by_user: list[dict[int, list[int]]] = [dict() for _ in range(n_users)]
        self._clicked: list[set[int]] = [set() for _ in range(n_users)]

    def record(self, user: int, items, positions, clicked) -> None:
        hist = self._by_user[user]
        done = self._clicked[user]
        for item, k, c in zip(items, positions, clicked):
            item = int(item)
            if c:
                done.add(item)
                hist.pop(item, None)
            elif item not in done:
                hist.setdefault(item, []).append(int(k))

    def positions(self, user: int, item: int) -> list[int]:
        return list(self._by_user[user].get(item, ()))

    def for_user(self, user: int) -> dict[int, list[int]]:
        return self._by_user[user]

    def as_dict(self) -> dict[tuple[int, int], list[int]]:
        return {(u, i): list(ks) for u, h in enumerate(self._by_user) for i, ks in h.items()}

    def __len__(self) -> int:
        return sum(len(h) for h in self._by_user)


def _check_k(candidates, K: int) -> np.ndarray:
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size < K:
        raise ValueError(f"need at least K={K} candidates, got {candidates.size}")
    return candidates


def rank_random(candidates, K: int, rng: np.random.Generator) -> np.ndarray:
    candidates = _check_k(candidates, K)
    return rng.choice(candidates, size=K, replace=False)


def rank_popular(counts, candidates, K: int) -> np.ndarray:
    candidates = _check_k(candidates, K)
    return top_k(np.asarray(counts, dtype=float), candidates, K)


def scale_scores(scores, counts, alpha: float) -> np.ndarray:
    """Divide each score by ``max(C_i, 1) ** alpha``; items never clicked keep their score."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    scores = np.asarray(scores, dtype=float)
    if alpha == 0:
        return scores.copy()
    return scores / np.maximum(np.asarray(counts, dtype=float), 1.0) ** alpha


def dscale_alpha(retrain_index: int, delta: float) -> float:
    if retrain_index < 0 or delta < 0:
        raise ValueError("retrain_index and delta must be non-negative")
    return retrain_index * delta


def fpc_correct(theta: float, exposure_positions, posterior: bool = False) -> float:
    """Like-probability after ``F`` unclicked exposures at the given positions.

    ``1 - (1 - theta) / prod_f (1 - delta_f * theta)`` with ``delta_f`` the
    examination probability of position ``k_f``, clamped to [0, 1].
    ``posterior=True`` instead returns ``theta * prod(1 - delta_f) /
    (theta * prod(1 - delta_f) + 1 - theta)``.
    """
    if not 0.0 <= theta <= 1.0 or not np.isfinite(theta):
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    ks = np.asarray(list(exposure_positions), dtype=float)
    if ks.size == 0:
        return float(theta)
    delta = examination_prob(ks)
    if posterior:
        keep = theta * np.prod(1.0 - delta)
        den = keep + 1.0 - theta
        return float(keep / den) if den > 0 else float(theta)
    den = np.prod(1.0 - delta * theta)
    if den <= 0.0:
        # theta == 1 with an exposure at k=1: limit of the formula is 1
        return 1.0 if theta >= 1.0 else 0.0
    return float(min(max(1.0 - (1.0 - theta) / den, 0.0), 1.0))


def fpc_vector(theta: np.ndarray, fp_by_item: dict[int, list[int]], posterior: bool = False) -> np.ndarray:
    """Apply ``fpc_correct`` to every item of a score vector that has unclicked exposures."""
    out = np.array(theta, dtype=float)
    if not fp_by_item:
        return out
    items = np.fromiter(fp_by_item.keys(), dtype=np.int64, count=len(fp_by_item))
    lens = np.fromiter((len(v) for v in fp_by_item.values()), dtype=np.int64, count=items.size)
    keep = lens > 0
    items, lens = items[keep], lens[keep]
    if items.size == 0:
        return out
    ks = np.fromiter((k for v in fp_by_item.values() for k in v), dtype=float, count=int(lens.sum()))
    th = out[items]
    if np.any((th < 0) | (th > 1)) or not np.all(np.isfinite(th)):
        raise ValueError("theta must lie in [0, 1]")
    delta = examination_prob(ks)
    starts = np.concatenate(([0], np.cumsum(lens)[:-1]))
    if posterior:
        miss = np.multiply.reduceat(1.0 - delta, starts)
        kept = th * miss
        den = kept + 1.0 - th
        safe = np.where(den > 0, den, 1.0)
        out[items] = np.where(den > 0, kept / safe, th)
        return out
    den = np.multiply.reduceat(1.0 - delta * np.repeat(th, lens), starts)
    safe = np.where(den > 0, den, 1.0)
    val = np.clip(1.0 - (1.0 - th) / safe, 0.0, 1.0)
    # theta == 1 with an exposure at k=1: limit of the formula is 1
    out[items] = np.where(den > 0, val, np.where(th >= 1.0, 1.0, 0.0))
    return out


def policy_scores(
    policy: DebiasPolicy,
    model_scores: np.ndarray,
    counts,
    fp_by_item: dict[int, list[int]] | None,
    retrain_index: int,
) -> np.ndarray:
    """Final ranking scores for one user's full item vector under ``policy``."""
    kind = policy.kind
    if kind == PolicyKind.NONE:
        return model_scores
    if kind == PolicyKind.SCALE:
        return scale_scores(model_scores, counts, policy.alpha)
    if kind == PolicyKind.DSCALE:
        return scale_scores(model_scores, counts, dscale_alpha(retrain_index, policy.delta))
    if kind == PolicyKind.FPC:
        return fpc_vector(model_scores, fp_by_item or {}, policy.fpc_posterior)
    if kind == PolicyKind.FPC_DSCALE:
        theta = np.clip(scale_scores(model_scores, counts, dscale_alpha(retrain_index, policy.delta)), 0.0, 1.0)
        return fpc_vector(theta, fp_by_item or {}, policy.fpc_posterior)
    raise ValueError(f"unknown policy {kind!r}")


def apply_policy(
    policy: DebiasPolicy,
    params: ModelParams,
    u: int,
    candidates,
    counts,
    fp_index: FalsePositiveIndex | None,
    retrain_index: int,
    K: int,
) -> np.ndarray:
    candidates = _check_k(candidates, K)
    fp = fp_index.for_user(u) if fp_index is not None else None
    scores = policy_scores(policy, params.user_scores(u), counts, fp, retrain_index)
    return top_k(scores, candidates, K)
