"""Pointwise matrix factorization trained on click logs with an inverse-propensity-scored loss.

Per logged exposure at position ``k`` with click indicator ``c`` and propensity
``p_k`` the loss is::

    -(c / p_k) * log(s) - (1 - c / p_k) * log(1 - s),   s = sigmoid(score)

Exposures of the same (user, item) pair are summed into one training example
carrying a positive weight ``sum(c / p_k)`` and a negative weight
``sum(1 - c / p_k)``; never-exposed pairs are sampled as plain negatives.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numba
import numpy as np

from .click_model import examination_prob

logger = logging.getLogger(__name__)

MF_MAGIC = b"POPDYNMF1\n"
_MF_HEADER = struct.Struct("<qqqqd")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    latent_dim: int = 16
    learning_rate: float = 0.05
    reg: float = 0.1
    epochs: int = 4
    initial_epochs: int = 40
    negative_ratio: float = 4.0
    propensity_floor: float = 0.1
    init_scale: float = 0.1
    warm_start: bool = True
    reg_mode: str = "per_example"
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not 0 < self.propensity_floor <= 1:
            raise ValueError("propensity_floor must lie in (0, 1]")
        for name in ("learning_rate", "init_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("reg", "negative_ratio", "epochs", "initial_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.reg_mode not in ("per_example", "global"):
            raise ValueError(f"reg_mode must be per_example or global, got {self.reg_mode!r}")


@dataclass
class ModelParams:
    user_factors: np.ndarray
    item_factors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: float = 0.0
    retrain_index: int = 0

    @classmethod
    def init(cls, n_users: int, n_items: int, d: int, rng: np.random.Generator, scale: float = 0.1):
        return cls(
            user_factors=rng.normal(0.0, scale, (n_users, d)),
            item_factors=rng.normal(0.0, scale, (n_items, d)),
            user_bias=np.zeros(n_users),
            item_bias=np.zeros(n_items),
        )

    @classmethod
    def zeros(cls, n_users: int, n_items: int, d: int):
        return cls(np.zeros((n_users, d)), np.zeros((n_items, d)), np.zeros(n_users), np.zeros(n_items))

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.user_factors.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.user_factors.copy(),
            self.item_factors.copy(),
            self.user_bias.copy(),
            self.item_bias.copy(),
            float(self.global_bias),
            self.retrain_index,
        )

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (self.user_factors, self.item_factors, self.user_bias, self.item_bias, [self.global_bias])
        )

    def user_scores(self, u: int) -> np.ndarray:
        """Squashed scores of user ``u`` for every item."""
        raw = self.item_factors @ self.user_factors[u] + self.item_bias + (self.user_bias[u] + self.global_bias)
        return _sigmoid(raw)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MF_MAGIC)
            fh.write(_MF_HEADER.pack(self.latent_dim, self.n_users, self.n_items, self.retrain_index, self.global_bias))
            for arr in (self.user_factors, self.item_factors, self.user_bias, self.item_bias):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        raw = Path(path).read_bytes()
        if not raw.startswith(MF_MAGIC):
            raise ValueError(f"{path}: not a model checkpoint")
        d, n, m, idx, gb = _MF_HEADER.unpack_from(raw, len(MF_MAGIC))
        buf = np.frombuffer(raw, dtype="<f8", offset=len(MF_MAGIC) + _MF_HEADER.size)
        sizes = [n * d, m * d, n, m]
        if buf.size != sum(sizes):
            raise ValueError(f"{path}: truncated checkpoint")
        parts = np.split(buf.copy(), np.cumsum(sizes)[:-1])
        return cls(parts[0].reshape(n, d), parts[1].reshape(m, d), parts[2], parts[3], gb, idx)


class Batch(NamedTuple):
    users: np.ndarray
    items: np.ndarray
    pos_weight: np.ndarray
    neg_weight: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def ips_weights(positions, clicked, propensity_floor: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Per-exposure (positive, negative) loss weights.

    A click at position k gets ``(1/p_k, 1 - 1/p_k)``; a non-click gets ``(0, 1)``.
    """
    positions = np.asarray(positions)
    clicked = np.asarray(clicked, dtype=bool)
    p = np.maximum(examination_prob(positions), propensity_floor)
    pos = np.where(clicked, 1.0 / p, 0.0)
    return pos, 1.0 - pos


def predict(params: ModelParams, u: int, i: int) -> float:
    if not (0 <= u < params.n_users and 0 <= i < params.n_items):
        raise IndexError(f"(u={u}, i={i}) outside a {params.n_users}x{params.n_items} model")
    raw = (
        params.user_factors[u] @ params.item_factors[i]
        + params.user_bias[u]
        + params.item_bias[i]
        + params.global_bias
    )
    return float(_sigmoid(raw))


def top_k(scores: np.ndarray, candidates: np.ndarray, K: int) -> np.ndarray:
    """Highest-scoring K of ``candidates``; ties go to the lower item index."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size < K:
        raise ValueError(f"need at least K={K} candidates, got {candidates.size}")
    cand = np.sort(candidates)
    order = np.argsort(-np.asarray(scores)[cand], kind="stable")
    return cand[order[:K]]


def rank_topk(params: ModelParams, u: int, candidates, K: int) -> np.ndarray:
    return top_k(params.user_scores(u), candidates, K)


def loss_and_gradient(params: ModelParams, batch: Batch, reg: float = 0.0, reg_mode: str = "per_example"):
    """Objective and analytic gradients for a batch of weighted examples.

    Each example adds its weighted log-loss and an L2 penalty on the rows it
    touches. With ``reg_mode="per_example"`` the penalty is ``reg/2`` times the
    squared norms scaled by the example's exposure count ``pos + neg``; with
    ``"global"`` every touched row is penalised ``reg/2 * ||row||^2`` once,
    split across its examples in proportion to exposure count. Zero-weight
    examples contribute nothing either way.

    Returns ``(loss, grads)``; ``grads`` is a ``ModelParams`` of gradients.
    """
    u = np.asarray(batch.users, dtype=np.int64)
    i = np.asarray(batch.items, dtype=np.int64)
    wp = np.asarray(batch.pos_weight, dtype=float)
    wn = np.asarray(batch.neg_weight, dtype=float)
    P, Q = params.user_factors, params.item_factors
    ru, ri = reg_shares(u, i, wp, wn, reg, params.n_users, params.n_items, reg_mode)
    raw = np.einsum("bd,bd->b", P[u], Q[i]) + params.user_bias[u] + params.item_bias[i] + params.global_bias
    sq_u = (P[u] ** 2).sum(1) + params.user_bias[u] ** 2
    sq_i = (Q[i] ** 2).sum(1) + params.item_bias[i] ** 2
    loss = float(np.sum(wp * _softplus(-raw) + wn * _softplus(raw) + 0.5 * (ru * sq_u + ri * sq_i)))

    g = (wp + wn) * _sigmoid(raw) - wp
    grads = ModelParams.zeros(params.n_users, params.n_items, params.latent_dim)
    np.add.at(grads.user_factors, u, g[:, None] * Q[i] + ru[:, None] * P[u])
    np.add.at(grads.item_factors, i, g[:, None] * P[u] + ri[:, None] * Q[i])
    np.add.at(grads.user_bias, u, g + ru * params.user_bias[u])
    np.add.at(grads.item_bias, i, g + ri * params.item_bias[i])
    grads.global_bias = float(g.sum())
    return loss, grads


def reg_shares(users, items, wp, wn, reg, n_users, n_items, mode="per_example"):
    """Per-example L2 coefficients for the user row and the item row it touches."""
    n_exp = np.maximum(np.asarray(wp) + np.asarray(wn), 0.0)
    if mode == "per_example":
        r = reg * n_exp
        return r, r
    if mode != "global":
        raise ValueError(f"unknown reg_mode {mode!r}")
    su = np.bincount(users, weights=n_exp, minlength=n_users)
    si = np.bincount(items, weights=n_exp, minlength=n_items)
    with np.errstate(invalid="ignore", divide="ignore"):
        ru = np.where(n_exp > 0, reg * n_exp / su[users], 0.0)
        ri = np.where(n_exp > 0, reg * n_exp / si[items], 0.0)
    return ru, ri


@numba.njit(cache=True)
def _sgd_epoch(P, Q, bu, bi, gb, users, items, wp, wn, ru, ri, order, lr):
    d = P.shape[1]
    total = 0.0
    for j in order:
        u = users[j]
        i = items[j]
        raw = gb[0] + bu[u] + bi[i]
        for f in range(d):
            raw += P[u, f] * Q[i, f]
        if raw >= 0:
            sp_pos = np.log1p(np.exp(-raw))
            sp_neg = raw + sp_pos
            s = 1.0 / (1.0 + np.exp(-raw))
        else:
            sp_neg = np.log1p(np.exp(raw))
            sp_pos = -raw + sp_neg
            e = np.exp(raw)
            s = e / (1.0 + e)
        total += wp[j] * sp_pos + wn[j] * sp_neg
        g = (wp[j] + wn[j]) * s - wp[j]
        rU = ru[j]
        rI = ri[j]
        for f in range(d):
            pu = P[u, f]
            qi = Q[i, f]
            P[u, f] = pu - lr * (g * qi + rU * pu)
            Q[i, f] = qi - lr * (g * pu + rI * qi)
        bu[u] -= lr * (g + rU * bu[u])
        bi[i] -= lr * (g + rI * bi[i])
        gb[0] -= lr * g
    return total


def sgd_epochs(params: ModelParams, batch: Batch, lr: float, reg: float, epochs: int, rng: np.random.Generator, mode="per_example"):
    """Run ``epochs`` passes of per-example SGD in place; returns the per-epoch data loss."""
    users = np.ascontiguousarray(batch.users, dtype=np.int64)
    items = np.ascontiguousarray(batch.items, dtype=np.int64)
    wp = np.ascontiguousarray(batch.pos_weight, dtype=np.float64)
    wn = np.ascontiguousarray(batch.neg_weight, dtype=np.float64)
    gb = np.array([params.global_bias])
    ru, ri = reg_shares(users, items, wp, wn, reg, params.n_users, params.n_items, mode)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(users.size)
        loss = _sgd_epoch(
            params.user_factors, params.item_factors, params.user_bias, params.item_bias,
            gb, users, items, wp, wn, ru, ri, order, lr,
        )
        if not np.isfinite(loss) or not params.is_finite():
            raise TrainingError(f"non-finite loss in epoch {epoch}")
        losses.append(loss)
        params.global_bias = float(gb[0])
    return losses


@dataclass
class PairStats:
    """Per-(user, item) accumulators of IPS weights over the training exposures."""

    pos_weight: np.ndarray
    neg_weight: np.ndarray
    exposures: np.ndarray

    @classmethod
    def empty(cls, n_users: int, n_items: int) -> "PairStats":
        return cls(np.zeros((n_users, n_items)), np.zeros((n_users, n_items)), np.zeros((n_users, n_items), np.int32))

    def add(self, users, items, positions, clicked, propensity_floor: float) -> None:
        wp, wn = ips_weights(positions, clicked, propensity_floor)
        np.add.at(self.pos_weight, (users, items), wp)
        np.add.at(self.neg_weight, (users, items), wn)
        np.add.at(self.exposures, (users, items), 1)


def build_batch(stats: PairStats, negative_ratio: float, rng: np.random.Generator) -> Batch:
    """Exposed pairs plus ``negative_ratio`` sampled never-exposed negatives per clicked pair."""
    eu, ei = np.nonzero(stats.exposures)
    n_pos = int(np.count_nonzero(stats.pos_weight[eu, ei] > 0))
    n_neg = int(round(negative_ratio * n_pos))
    nu, ni = _sample_unexposed(stats.exposures, n_neg, rng)
    return Batch(
        np.concatenate([eu, nu]),
        np.concatenate([ei, ni]),
        np.concatenate([stats.pos_weight[eu, ei], np.zeros(nu.size)]),
        np.concatenate([stats.neg_weight[eu, ei], np.ones(nu.size)]),
    )


def _sample_unexposed(exposures: np.ndarray, n: int, rng: np.random.Generator):
    n_users, n_items = exposures.shape
    free = exposures.size - np.count_nonzero(exposures)
    n = min(n, free)
    got_u, got_i, have = [], [], 0
    while have < n:
        draw = max(2 * (n - have), 64)
        u = rng.integers(n_users, size=draw)
        i = rng.integers(n_items, size=draw)
        ok = exposures[u, i] == 0
        u, i = u[ok][: n - have], i[ok][: n - have]
        got_u.append(u)
        got_i.append(i)
        have += u.size
    if not got_u:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(got_u), np.concatenate(got_i)


def fit(
    stats: PairStats,
    cfg: TrainConfig,
    warm_start: ModelParams | None = None,
    rng: np.random.Generator | None = None,
    epochs: int | None = None,
) -> tuple[ModelParams, list[float]]:
    n_users, n_items = stats.exposures.shape
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if warm_start is not None:
        params = warm_start.copy()
        params.retrain_index = warm_start.retrain_index + 1
        n_epochs = cfg.epochs if epochs is None else epochs
    else:
        params = ModelParams.init(n_users, n_items, cfg.latent_dim, rng, cfg.init_scale)
        n_epochs = cfg.initial_epochs if epochs is None else epochs
    if n_epochs == 0:
        return params, []
    batch = build_batch(stats, cfg.negative_ratio, rng)
    losses = sgd_epochs(params, batch, cfg.learning_rate, cfg.reg, n_epochs, rng, cfg.reg_mode)
    return params, losses


def train(
    log,
    cfg: TrainConfig,
    warm_start: ModelParams | None = None,
    phases=None,
    shape: tuple[int, int] | None = None,
    epochs: int | None = None,
) -> ModelParams:
    """Fit a model on the exposures of ``log`` (restricted to ``phases`` if given).

    ``log`` is anything with ``user``, ``item``, ``position``, ``clicked`` and
    ``phase`` arrays. With ``warm_start`` the returned params continue from it
    and carry ``retrain_index + 1``; ``epochs=0`` returns an unchanged copy.
    """
    users, items = np.asarray(log.user), np.asarray(log.item)
    if users.size == 0:
        raise TrainingError("cannot train on an empty log")
    mask = np.ones(users.size, bool) if phases is None else np.isin(log.phase, [int(p) for p in phases])
    if shape is None:
        shape = (
            warm_start.n_users if warm_start else int(users.max()) + 1,
            warm_start.n_items if warm_start else int(items.max()) + 1,
        )
    stats = PairStats.empty(*shape)
    stats.add(users[mask], items[mask], np.asarray(log.position)[mask], np.asarray(log.clicked)[mask], cfg.propensity_floor)
    params, losses = fit(stats, cfg, warm_start, epochs=epochs)
    if losses:
        logger.debug("trained %d epochs, loss %.4f -> %.4f", len(losses), losses[0], losses[-1])
    return params


# -- rating completion -------------------------------------------------------

@dataclass(frozen=True)
class RatingsConfig:
    latent_dim: int = 16
    learning_rate: float = 0.01
    reg: float = 0.05
    epochs: int = 60
    seed: int = 0


@numba.njit(cache=True)
def _sq_epoch(P, Q, bu, bi, mu, users, items, r, order, lr, reg):
    d = P.shape[1]
    total = 0.0
    for j in order:
        u = users[j]
        i = items[j]
        pred = mu + bu[u] + bi[i]
        for f in range(d):
            pred += P[u, f] * Q[i, f]
        e = pred - r[j]
        total += e * e
        for f in range(d):
            pu = P[u, f]
            P[u, f] = pu - lr * (e * Q[i, f] + reg * pu)
            Q[i, f] -= lr * (e * pu + reg * Q[i, f])
        bu[u] -= lr * (e + reg * bu[u])
        bi[i] -= lr * (e + reg * bi[i])
    return total


def fit_ratings(ratings, cfg: RatingsConfig) -> np.ndarray:
    """Squared-loss biased MF on explicit ratings; returns the dense completed score matrix."""
    rng = np.random.default_rng(cfg.seed)
    P = rng.normal(0, 0.1, (ratings.n_users, cfg.latent_dim))
    Q = rng.normal(0, 0.1, (ratings.n_items, cfg.latent_dim))
    bu, bi = np.zeros(ratings.n_users), np.zeros(ratings.n_items)
    mu = float(ratings.ratings.mean())
    users = np.ascontiguousarray(ratings.users, dtype=np.int64)
    items = np.ascontiguousarray(ratings.items, dtype=np.int64)
    r = np.ascontiguousarray(ratings.ratings, dtype=np.float64)
    for epoch in range(cfg.epochs):
        loss = _sq_epoch(P, Q, bu, bi, mu, users, items, r, rng.permutation(users.size), cfg.learning_rate, cfg.reg)
        if not np.isfinite(loss):
            raise TrainingError(f"rating completion diverged in epoch {epoch}")
    return P @ Q.T + bu[:, None] + bi[None, :] + mu
