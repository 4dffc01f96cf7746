"""Hidden binary relevance ("who truly likes what") and its controlled variants."""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import gini_of

logger = logging.getLogger(__name__)

GT_MAGIC = b"POPDYNGT1\n"
_GT_HEADER = struct.Struct("<qqqdd")


class GroundTruthError(ValueError):
    pass


@dataclass
class RatingsDataset:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    n_users: int
    n_items: int

    def __len__(self) -> int:
        return int(self.users.size)


@dataclass
class GroundTruth:
    relevance: np.ndarray  # (N, M) bool
    seed: int = -1

    def __post_init__(self):
        self.relevance = np.ascontiguousarray(self.relevance, dtype=bool)
        if self.relevance.ndim != 2:
            raise GroundTruthError("relevance must be a 2-d matrix")

    @property
    def n_users(self) -> int:
        return self.relevance.shape[0]

    @property
    def n_items(self) -> int:
        return self.relevance.shape[1]

    @property
    def audience_sizes(self) -> np.ndarray:
        return self.relevance.sum(axis=0).astype(np.int64)

    @property
    def density(self) -> float:
        return float(self.relevance.sum()) / self.relevance.size

    @property
    def audience_gini(self) -> float:
        return audience_gini(self)

    def validate(self) -> None:
        if np.any(self.audience_sizes < 1):
            raise GroundTruthError("every item needs at least one interested user")
        if np.any(self.relevance.sum(axis=1) < 1):
            raise GroundTruthError("every user must like at least one item")

    def save(self, path) -> None:
        header = _GT_HEADER.pack(self.n_users, self.n_items, int(self.seed), self.density, self.audience_gini)
        with open(path, "wb") as fh:
            fh.write(GT_MAGIC)
            fh.write(header)
            fh.write(np.packbits(self.relevance, axis=None).tobytes())

    @classmethod
    def load(cls, path) -> "GroundTruth":
        raw = Path(path).read_bytes()
        if not raw.startswith(GT_MAGIC):
            raise GroundTruthError(f"{path}: not a ground-truth bitmap file")
        off = len(GT_MAGIC)
        n, m, seed, _density, _gini = _GT_HEADER.unpack_from(raw, off)
        off += _GT_HEADER.size
        bits = np.frombuffer(raw, dtype=np.uint8, offset=off)
        if bits.size != (n * m + 7) // 8:
            raise GroundTruthError(f"{path}: truncated bitmap")
        rel = np.unpackbits(bits, count=n * m).reshape(n, m).astype(bool)
        return cls(rel, seed=seed)


def audience_gini(gt: GroundTruth) -> float:
    a = gt.audience_sizes
    return gini_of(a, a)


# -- ratings ingestion -------------------------------------------------------

def load_ratings(path, delimiter: str = ",", has_header: bool | None = None) -> RatingsDataset:
    """Read ``user<delim>item<delim>rating`` rows and re-index ids densely from 0.

    ``has_header=None`` sniffs: a first row whose rating column is not numeric
    is treated as a header. Extra columns (e.g. timestamps) are ignored.
    """
    path = Path(path)
    users, items, ratings = [], [], []
    seen: dict[tuple[str, str], int] = {}
    with open(path, newline="") as fh:
        if len(delimiter) == 1:
            rows = csv.reader(fh, delimiter=delimiter)
        else:  # e.g. MovieLens "::"
            rows = (line.rstrip("\r\n").split(delimiter) for line in fh)
        for lineno, row in enumerate(rows, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise GroundTruthError(f"{path}:{lineno}: expected user,item,rating; got {row!r}")
            u, i, r = (c.strip() for c in row[:3])
            try:
                rating = float(r)
            except ValueError:
                if lineno == 1 and has_header is not False:
                    continue
                raise GroundTruthError(f"{path}:{lineno}: rating {r!r} is not a number") from None
            if lineno == 1 and has_header:
                continue
            if not np.isfinite(rating):
                raise GroundTruthError(f"{path}:{lineno}: non-finite rating {r!r}")
            if (u, i) in seen:
                raise GroundTruthError(
                    f"{path}:{lineno}: duplicate (user, item) pair ({u}, {i}), first seen on line {seen[(u, i)]}"
                )
            seen[(u, i)] = lineno
            users.append(u)
            items.append(i)
            ratings.append(rating)
    if not users:
        raise GroundTruthError(f"{path}: no ratings found")
    uid = _dense_ids(users)
    iid = _dense_ids(items)
    return RatingsDataset(
        users=uid,
        items=iid,
        ratings=np.asarray(ratings, dtype=float),
        n_users=int(uid.max()) + 1,
        n_items=int(iid.max()) + 1,
    )


def _dense_ids(raw: list[str]) -> np.ndarray:
    # numeric ids keep their numeric order; anything else sorts lexically
    try:
        keys = [int(x) for x in raw]
    except ValueError:
        keys = raw
    uniq = sorted(set(keys))
    lookup = {k: n for n, k in enumerate(uniq)}
    return np.fromiter((lookup[k] for k in keys), dtype=np.int64, count=len(keys))


def complete_and_binarize(
    ratings: RatingsDataset,
    mf_cfg=None,
    target_density: float = 0.0657,
    user_cap: int | None = 1000,
    seed: int = 0,
    tolerance: float = 0.10,
) -> GroundTruth:
    """Complete a sparse ratings matrix with MF and binarize it at one global threshold.

    The threshold is found by binary search over the sorted predicted scores so
    that the realised density is as close as possible to ``target_density``.
    Items nobody likes and users who like nothing are then dropped.
    """
    from .mf import RatingsConfig, fit_ratings

    if not 0 < target_density < 1:
        raise GroundTruthError("target_density must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    if user_cap is not None:
        if user_cap > ratings.n_users:
            raise GroundTruthError(f"user_cap={user_cap} exceeds the {ratings.n_users} users available")
        keep = np.sort(rng.choice(ratings.n_users, size=user_cap, replace=False))
        ratings = _restrict_users(ratings, keep)
    cfg = mf_cfg or RatingsConfig(seed=seed)
    scores = fit_ratings(ratings, cfg)
    flat = np.sort(scores, axis=None)[::-1]
    if flat[0] == flat[-1]:
        raise GroundTruthError("all predicted scores are identical; no threshold separates likes")

    n_like = _search_cut(scores, flat, target_density)
    thr = flat[n_like - 1]
    rel = _drop_empty(scores >= thr)
    gt = GroundTruth(rel, seed=seed)
    rel_err = abs(gt.density - target_density) / target_density
    logger.info(
        "binarized at threshold %.6g: density %.5f (target %.5f), %d users x %d items, audience gini %.4f",
        thr, gt.density, target_density, gt.n_users, gt.n_items, gt.audience_gini,
    )
    if rel_err > tolerance:
        raise GroundTruthError(
            f"realised density {gt.density:.5f} is {rel_err:.1%} away from target {target_density}"
        )
    gt.validate()
    return gt


def _drop_empty(rel: np.ndarray) -> np.ndarray:
    rel = rel[:, rel.sum(axis=0) > 0]
    return rel[rel.sum(axis=1) > 0]


def _density_at(scores: np.ndarray, thr: float) -> float:
    rel = _drop_empty(scores >= thr)
    return float(rel.sum()) / rel.size if rel.size else 0.0


def _search_cut(scores: np.ndarray, sorted_desc: np.ndarray, target: float) -> int:
    # bisect on the number of likes; density is measured after dropping empty rows/columns
    lo, hi = 1, sorted_desc.size
    while lo < hi:
        mid = (lo + hi) // 2
        if _density_at(scores, sorted_desc[mid - 1]) < target:
            lo = mid + 1
        else:
            hi = mid
    options = {max(lo - 1, 1), lo}
    return min(options, key=lambda n: abs(_density_at(scores, sorted_desc[n - 1]) - target))


def _restrict_users(ratings: RatingsDataset, keep: np.ndarray) -> RatingsDataset:
    remap = np.full(ratings.n_users, -1, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    mask = remap[ratings.users] >= 0
    items = ratings.items[mask]
    uniq, iid = np.unique(items, return_inverse=True)
    return RatingsDataset(
        users=remap[ratings.users[mask]],
        items=iid.astype(np.int64),
        ratings=ratings.ratings[mask],
        n_users=int(keep.size),
        n_items=int(uniq.size),
    )


# -- synthetic generator -----------------------------------------------------

def _powerlaw_sizes(exponent: float, total: int, n_users: int, n_items: int) -> np.ndarray:
    base = np.arange(1, n_items + 1, dtype=float) ** (-exponent)

    def sizes(c):
        return np.clip(np.rint(c * base), 1, n_users)

    lo, hi = 1e-12, float(total) * 10 + n_users
    for _ in range(200):
        mid = np.sqrt(lo * hi)
        if sizes(mid).sum() < total:
            lo = mid
        else:
            hi = mid
    a_lo, a_hi = sizes(lo), sizes(hi)
    return (a_lo if abs(a_lo.sum() - total) < abs(a_hi.sum() - total) else a_hi).astype(np.int64)


def _gini_sorted(a: np.ndarray) -> float:
    return gini_of(a, a)


def synthesize_ground_truth(
    n_users: int,
    n_items: int,
    target_gini: float,
    target_density: float,
    seed: int = 0,
    affinity: float = 0.0,
    latent_dim: int = 8,
    gini_tol: float = 0.01,
    density_tol: float = 0.05,
) -> GroundTruth:
    """Synthetic relevance with a power-law audience-size profile.

    Audience sizes follow ``c * rank**-exponent`` clipped to ``[1, n_users]``;
    the exponent is bisected until the audience Gini is within ``gini_tol`` of
    ``target_gini`` and ``c`` is bisected so total likes match the density.

    ``affinity=0`` picks each item's likers uniformly at random. A positive
    ``affinity`` picks them with weights ``exp(affinity * <x_u, y_i>)`` over
    random unit-norm user/item vectors, which leaves the audience sizes intact
    but gives the matrix low-rank structure a factor model can exploit.
    """
    if not 0 <= target_gini < 1:
        raise GroundTruthError("target_gini must lie in [0, 1)")
    if not 0 < target_density < 1:
        raise GroundTruthError("target_density must lie in (0, 1)")
    if n_users < 1 or n_items < 1:
        raise GroundTruthError("need at least one user and one item")
    total = int(round(target_density * n_users * n_items))
    if total < max(n_users, n_items):
        raise GroundTruthError(
            f"density {target_density} gives {total} likes, fewer than needed to cover "
            f"{n_users} users and {n_items} items"
        )

    lo, hi = 0.0, 8.0
    sizes = _powerlaw_sizes(0.0, total, n_users, n_items)
    g = _gini_sorted(sizes)
    for _ in range(100):
        if abs(g - target_gini) <= gini_tol / 4:
            break
        mid = 0.5 * (lo + hi)
        sizes = _powerlaw_sizes(mid, total, n_users, n_items)
        g = _gini_sorted(sizes)
        if g < target_gini:
            lo = mid
        else:
            hi = mid
    if abs(g - target_gini) > gini_tol or abs(sizes.sum() - total) > density_tol * total:
        raise GroundTruthError(
            f"cannot reach audience gini {target_gini} at density {target_density} "
            f"with {n_users} users x {n_items} items (best gini {g:.4f}, likes {sizes.sum()} vs {total})"
        )

    rng = np.random.default_rng(seed)
    sizes = sizes[rng.permutation(n_items)]  # decouple popularity from item index
    rel = np.zeros((n_users, n_items), dtype=bool)
    if affinity > 0:
        x = rng.standard_normal((n_users, latent_dim))
        y = rng.standard_normal((n_items, latent_dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        y /= np.linalg.norm(y, axis=1, keepdims=True)
        logits = affinity * (x @ y.T)
    for i in range(n_items):
        if affinity > 0:
            # Gumbel top-k == weighted sampling without replacement
            keys = logits[:, i] + rng.gumbel(size=n_users)
            likers = np.argpartition(-keys, sizes[i] - 1)[: sizes[i]]
        else:
            likers = rng.choice(n_users, size=sizes[i], replace=False)
        rel[likers, i] = True
    _cover_empty_users(rel, rng)
    gt = GroundTruth(rel, seed=seed)
    gt.validate()
    return gt


def _cover_empty_users(rel: np.ndarray, rng: np.random.Generator) -> None:
    # move one like from a user with spare likes to each empty user; audience sizes unchanged
    row_sums = rel.sum(axis=1)
    for u in np.flatnonzero(row_sums == 0):
        for i in rng.permutation(rel.shape[1]):
            donors = np.flatnonzero(rel[:, i] & (row_sums > 1))
            if donors.size:
                v = donors[rng.integers(donors.size)]
                rel[v, i] = False
                rel[u, i] = True
                row_sums[v] -= 1
                row_sums[u] += 1
                break
        else:
            raise GroundTruthError("not enough likes to give every user one")


def make_density_variants(gt: GroundTruth, densities, seed: int = 0) -> list[np.ndarray]:
    """Nested training sets of observed positives at the requested densities.

    All sets are prefixes of one random permutation of the positive pairs, so a
    denser set always contains every sparser one.
    """
    pos_u, pos_i = np.nonzero(gt.relevance)
    order = np.random.default_rng(seed).permutation(pos_u.size)
    out = []
    for d in densities:
        if d <= 0:
            raise GroundTruthError(f"density must be positive, got {d}")
        n = int(round(d * gt.relevance.size))
        if d > gt.density + 1e-12 or n > pos_u.size:
            raise GroundTruthError(f"density {d} exceeds the ground-truth density {gt.density:.5f}")
        n = max(n, 1)
        take = order[:n]
        train = np.zeros_like(gt.relevance)
        train[pos_u[take], pos_i[take]] = True
        out.append(train)
    return out
