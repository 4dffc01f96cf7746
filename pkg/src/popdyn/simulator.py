"""The closed-loop recommendation simulation and its ablations."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .click_model import Phase, position_bias
from .debias import DebiasPolicy, FalsePositiveIndex, PolicyKind, policy_scores, rank_random
from .ground_truth import GroundTruth
from .metrics import MetricSeries, gini_of
from .mf import ModelParams, PairStats, TrainConfig, TrainingError, fit, top_k

logger = logging.getLogger(__name__)

# stream tags for counter-based rng splitting
_BOOT, _STEP, _PROBE, _TRAIN, _STATIC = 1, 2, 3, 4, 5


class Ranker(str, enum.Enum):
    MF = "mf"
    POPULAR = "popular"
    RANDOM = "random"


class CFLMode(str, enum.Enum):
    WITH_CFL = "with_cfl"
    WITHOUT_CFL = "without_cfl"


class SimulationError(RuntimeError):
    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


@dataclass(frozen=True)
class SimConfig:
    K: int = 20
    T: int = 40_000
    L: int = 50
    checkpoint_every: int | None = None
    policy: DebiasPolicy = field(default_factory=DebiasPolicy)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    cfl_mode: CFLMode = CFLMode.WITH_CFL
    ranker: Ranker = Ranker.MF
    seed: int = 0
    repeats: int = 1

    def __post_init__(self):
        object.__setattr__(self, "cfl_mode", CFLMode(self.cfl_mode))
        object.__setattr__(self, "ranker", Ranker(self.ranker))
        if self.checkpoint_every is None:
            object.__setattr__(self, "checkpoint_every", self.L)
        if self.K < 1 or self.L < 1 or self.T < 0:
            raise ValueError("need K >= 1, L >= 1 and T >= 0")
        if self.checkpoint_every < 1 or self.checkpoint_every % self.L:
            raise ValueError(f"checkpoint_every ({self.checkpoint_every}) must be a multiple of L ({self.L})")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.ranker != Ranker.MF and self.policy.kind != PolicyKind.NONE:
            raise ValueError(f"debiasing policy {self.policy.kind.value} needs the mf ranker")

    @property
    def counted_phases(self) -> tuple[Phase, ...]:
        if self.cfl_mode == CFLMode.WITHOUT_CFL:
            return (Phase.PERSONALIZED,)
        return (Phase.BOOTSTRAP, Phase.PERSONALIZED)

    @property
    def training_phases(self) -> tuple[Phase, ...]:
        if self.cfl_mode == CFLMode.WITHOUT_CFL:
            return (Phase.BOOTSTRAP, Phase.RANDOM_PROBE)
        return (Phase.BOOTSTRAP, Phase.PERSONALIZED)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


class InteractionLog:
    """Append-only columnar store of exposure records."""

    _FIELDS = (("user", np.int32), ("item", np.int32), ("position", np.int16),
               ("clicked", bool), ("iteration", np.int32), ("phase", np.int8))

    def __init__(self, capacity: int = 1024):
        self._n = 0
        self._cols = {name: np.zeros(capacity, dt) for name, dt in self._FIELDS}

    def __len__(self) -> int:
        return self._n

    def append(self, user: int, items, clicked, iteration: int, phase: Phase, positions=None) -> None:
        k = len(items)
        if self._n + k > self._cols["user"].size:
            cap = max(2 * self._cols["user"].size, self._n + k)
            for name, col in self._cols.items():
                grown = np.zeros(cap, col.dtype)
                grown[: self._n] = col[: self._n]
                self._cols[name] = grown
        s = slice(self._n, self._n + k)
        self._cols["user"][s] = user
        self._cols["item"][s] = items
        self._cols["position"][s] = np.arange(1, k + 1) if positions is None else positions
        self._cols["clicked"][s] = clicked
        self._cols["iteration"][s] = iteration
        self._cols["phase"][s] = int(phase)
        self._n += k

    def __getattr__(self, name):
        cols = self.__dict__.get("_cols")
        if cols is not None and name in cols:
            col = cols[name][: self._n]
            col.flags.writeable = False
            return col
        raise AttributeError(name)

    def records(self):
        from .click_model import ExposureRecord

        for j in range(self._n):
            yield ExposureRecord(
                int(self.user[j]), int(self.item[j]), int(self.position[j]),
                bool(self.clicked[j]), int(self.iteration[j]), Phase(int(self.phase[j])),
            )

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name).copy() for name, _ in self._FIELDS}

    def save(self, path) -> None:
        np.savez_compressed(path, **self.to_arrays())

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, _ in self._FIELDS:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()


def click_counts_from_log(log: InteractionLog, n_items: int, phases=None) -> np.ndarray:
    mask = log.clicked.copy()
    if phases is not None:
        mask &= np.isin(log.phase, [int(p) for p in phases])
    return np.bincount(log.item[mask], minlength=n_items).astype(np.int64)


def fp_index_from_log(log: InteractionLog, n_users: int) -> FalsePositiveIndex:
    fp = FalsePositiveIndex(n_users)
    for j in range(len(log)):
        fp.record(int(log.user[j]), [log.item[j]], [log.position[j]], [log.clicked[j]])
    return fp


class SimState:
    """Log plus the incrementally maintained views the rankers and trainer read."""

    def __init__(self, gt: GroundTruth, cfg: SimConfig):
        n, m = gt.relevance.shape
        self.gt = gt
        self.cfg = cfg
        self.log = InteractionLog(capacity=n * cfg.K + (cfg.T + 1) * cfg.K * 2)
        self.counts = np.zeros((len(Phase), m), dtype=np.int64)
        self.clicked = np.zeros((n, m), dtype=bool)
        self.fp = FalsePositiveIndex(n)
        self.stats = PairStats.empty(n, m)
        self._training = {int(p) for p in cfg.training_phases}
        self._floor = cfg.trainer.propensity_floor

    def ingest(self, user: int, items: np.ndarray, clicks: np.ndarray, iteration: int, phase: Phase, positions=None) -> None:
        pos = np.arange(1, items.size + 1) if positions is None else np.asarray(positions)
        self.log.append(user, items, clicks, iteration, phase, pos)
        hit = items[clicks]
        self.counts[int(phase), hit] += 1
        self.clicked[user, hit] = True
        self.fp.record(user, items.tolist(), pos.tolist(), clicks.tolist())
        if int(phase) in self._training:
            self.stats.add(np.full(items.size, user), items, pos, clicks, self._floor)

    def counts_for(self, phases) -> np.ndarray:
        return self.counts[[int(p) for p in phases]].sum(axis=0)

    def candidates(self, user: int) -> np.ndarray:
        return np.flatnonzero(~self.clicked[user])


@dataclass
class SimResult:
    log: InteractionLog
    metrics: MetricSeries
    params: ModelParams | None
    skipped_users: int = 0
    retrains: int = 0


def _clicks(gt: GroundTruth, user: int, items: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    examined = rng.random(items.size) < position_bias(items.size)
    return examined & gt.relevance[user, items]


def bootstrap(gt: GroundTruth, K: int, rng: np.random.Generator | int, cfg: SimConfig | None = None) -> SimState:
    """Show every user one uniformly random K-list; returns the seeded state (``state.log`` holds the records)."""
    if gt.n_items < K:
        raise ValueError(f"cannot show K={K} items from a catalogue of {gt.n_items}")
    cfg = cfg or SimConfig(K=K, T=0)
    state = SimState(gt, cfg)
    for u in range(gt.n_users):
        r = rng if isinstance(rng, np.random.Generator) else _rng(rng, _BOOT, u)
        items = r.choice(gt.n_items, size=K, replace=False)
        state.ingest(u, items, _clicks(gt, u, items, r), 0, Phase.BOOTSTRAP)
    return state


def _checkpoint(state: SimState, metrics: MetricSeries, t: int, alpha: float) -> None:
    cfg = state.cfg
    c = state.counts_for(cfg.counted_phases)
    a = state.gt.audience_sizes
    metrics.append(t, int(c.sum()), gini_of(c / a, a), alpha)


def _pick_user(state: SimState, rng: np.random.Generator, K: int) -> tuple[int, int]:
    n = state.gt.n_users
    skipped = 0
    while True:
        u = int(rng.integers(n))
        if state.clicked[u].size - state.clicked[u].sum() >= K:
            return u, skipped
        skipped += 1
        logger.debug("user %d has fewer than K candidates; redrawing", u)
        if skipped % 64 == 0:
            left = (state.clicked.shape[1] - state.clicked.sum(axis=1)) >= K
            if not left.any():
                raise SimulationError("no user has K unclicked items left")


def run(gt: GroundTruth, cfg: SimConfig) -> SimResult:
    """Simulate the closed loop for ``cfg.T`` user arrivals.

    Bootstrap, initial fit, then per iteration: draw a user, rank K of the
    items they have not clicked yet, simulate clicks; every ``L`` iterations
    retrain (warm-started) on all training-phase exposures. In
    ``without_cfl`` mode every retrain is preceded by ``L`` random probes and
    the model only sees bootstrap and probe data.
    """
    gt.validate()
    K, L = cfg.K, cfg.L
    state = bootstrap(gt, K, cfg.seed, cfg)
    metrics = MetricSeries()
    policy = cfg.policy
    use_mf = cfg.ranker == Ranker.MF
    retrain_index = 0
    params = None
    skipped = 0

    def retrain(prev, idx):
        warm = prev if (prev is not None and cfg.trainer.warm_start) else None
        try:
            p, _ = fit(state.stats, cfg.trainer, warm_start=warm, rng=_rng(cfg.seed, _TRAIN, idx))
        except TrainingError as exc:
            partial = SimResult(state.log, metrics, prev, skipped, idx)
            raise SimulationError(f"training failed at retrain {idx}: {exc}", partial) from exc
        p.retrain_index = idx
        return p

    if use_mf:
        params = retrain(None, 0)
    scale_counts = state.counts_for(cfg.training_phases)
    _checkpoint(state, metrics, 0, policy.alpha_at(0))

    for t in range(1, cfg.T + 1):
        rng = _rng(cfg.seed, _STEP, t)
        u, s = _pick_user(state, rng, K)
        skipped += s
        cands = state.candidates(u)
        if cfg.ranker == Ranker.RANDOM:
            ranked = rank_random(cands, K, rng)
        elif cfg.ranker == Ranker.POPULAR:
            ranked = top_k(state.counts_for(cfg.training_phases), cands, K)
        else:
            scores = policy_scores(policy, params.user_scores(u), scale_counts, state.fp.for_user(u), retrain_index)
            ranked = top_k(scores, cands, K)
        state.ingest(u, ranked, _clicks(gt, u, ranked, rng), t, Phase.PERSONALIZED)

        if t % L == 0:
            if cfg.cfl_mode == CFLMode.WITHOUT_CFL:
                for j in range(L):
                    prng = _rng(cfg.seed, _PROBE, t, j)
                    pu, s = _pick_user(state, prng, K)
                    skipped += s
                    items = rank_random(state.candidates(pu), K, prng)
                    state.ingest(pu, items, _clicks(gt, pu, items, prng), t, Phase.RANDOM_PROBE)
            retrain_index += 1
            if use_mf:
                params = retrain(params, retrain_index)
            scale_counts = state.counts_for(cfg.training_phases)
        if t % cfg.checkpoint_every == 0:
            _checkpoint(state, metrics, t, policy.alpha_at(retrain_index))

    if skipped:
        logger.info("redrew %d arrivals whose users had fewer than K candidates", skipped)
    return SimResult(state.log, metrics, params, skipped, retrain_index)


def run_without_cfl(gt: GroundTruth, cfg: SimConfig) -> SimResult:
    if cfg.cfl_mode != CFLMode.WITHOUT_CFL:
        raise ValueError("run_without_cfl needs cfl_mode=without_cfl")
    return run(gt, cfg)


def run_static(
    gt: GroundTruth,
    training_set: np.ndarray,
    cfg: SimConfig,
    seed: int | None = None,
) -> float:
    """One-shot experiment: fit on a fixed set of positives, recommend once, return Gini of TPR."""
    return static_round(gt, training_set, cfg, seed)[0]


def static_round(
    gt: GroundTruth,
    training_set: np.ndarray,
    cfg: SimConfig,
    seed: int | None = None,
) -> tuple[float, int]:
    """``run_static`` that also reports the number of clicks of the single round.

    Training positives are excluded from each user's candidates, so TPR is
    measured against the audience left outside the training set; items whose
    whole audience is in training are left out of the Gini.
    """
    train = np.asarray(training_set, dtype=bool)
    if train.shape != gt.relevance.shape:
        raise ValueError("training set shape does not match the ground truth")
    if np.any(train & ~gt.relevance):
        raise ValueError("training set contains pairs the ground truth does not mark as liked")
    seed = cfg.seed if seed is None else seed
    n, m = train.shape
    stats = PairStats(train.astype(float), np.zeros((n, m)), train.astype(np.int32))
    params, _ = fit(stats, cfg.trainer, rng=_rng(seed, _STATIC, 0))
    rng = _rng(seed, _STATIC, 1)
    clicks = np.zeros(m, dtype=np.int64)
    for u in range(n):
        cands = np.flatnonzero(~train[u])
        if cands.size < cfg.K:
            continue
        ranked = top_k(params.user_scores(u), cands, cfg.K)
        hit = ranked[_clicks(gt, u, ranked, rng)]
        clicks[hit] += 1
    audience = gt.audience_sizes
    remaining = audience - train.sum(axis=0)
    keep = remaining > 0
    return gini_of(clicks[keep] / remaining[keep], audience[keep]), int(clicks.sum())
