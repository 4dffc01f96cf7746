"""Experiment configs, repeat orchestration, CSV/summary emission and matched-bias comparison."""
from __future__ import annotations

import csv
import dataclasses
import functools
import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .debias import DebiasPolicy, PolicyKind
from .ground_truth import GroundTruth, complete_and_binarize, load_ratings, make_density_variants, synthesize_ground_truth
from .metrics import MetricSeries
from .mf import RatingsConfig, TrainConfig
from .simulator import CFLMode, Ranker, SimConfig, SimulationError, run, static_round

logger = logging.getLogger(__name__)

CSV_HEADER = ("run_id", "method", "iteration", "cumulative_clicks", "gini_tpr", "alpha")
METHODS = ("mf", "popular", "random", "scale", "dscale", "fpc", "fpc_dscale")
PAPER_SCALE = {"K": 20, "T": 40_000, "L": 50}
RECIPE_DIR = Path(__file__).parent / "recipes"


class ConfigError(ValueError):
    """Invalid experiment config; the message starts with the offending key path."""


# -- spec types ------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"  # synthetic | ratings | bitmap
    n_users: int = 200
    n_items: int = 500
    audience_gini: float = 0.64
    density: float = 0.065
    affinity: float = 0.0
    latent_dim: int = 8
    seed: int = 0
    path: str | None = None
    delimiter: str = ","
    target_density: float = 0.0657
    user_cap: int | None = 1000

    def build(self, audience_gini: float | None = None, seed: int | None = None) -> GroundTruth:
        return _build_gt(self, audience_gini, seed)


@functools.lru_cache(maxsize=32)
def _build_gt(ds: DatasetSpec, audience_gini: float | None, seed: int | None) -> GroundTruth:
    seed = ds.seed if seed is None else seed
    if ds.source == "synthetic":
        g = ds.audience_gini if audience_gini is None else audience_gini
        return synthesize_ground_truth(
            ds.n_users, ds.n_items, g, ds.density, seed=seed, affinity=ds.affinity, latent_dim=ds.latent_dim
        )
    if audience_gini is not None:
        raise ConfigError("sweep.audience_gini: imbalance variants need a synthetic dataset")
    if ds.source == "bitmap":
        return GroundTruth.load(ds.path)
    ratings = load_ratings(ds.path, delimiter=ds.delimiter)
    return complete_and_binarize(
        ratings, RatingsConfig(seed=seed), target_density=ds.target_density, user_cap=ds.user_cap, seed=seed
    )


@dataclass(frozen=True)
class MethodSpec:
    label: str
    method: str
    cfl_mode: str = "with_cfl"
    alpha: float = 0.0
    delta: float = 0.0
    fpc_posterior: bool = False
    group: str = ""

    def sim_config(self, base: SimConfig, seed: int) -> SimConfig:
        ranker = self.method if self.method in ("popular", "random") else "mf"
        kind = "none" if self.method in ("mf", "popular", "random") else self.method
        policy = DebiasPolicy(kind, alpha=self.alpha, delta=self.delta, fpc_posterior=self.fpc_posterior)
        return dataclasses.replace(base, ranker=Ranker(ranker), policy=policy, cfl_mode=CFLMode(self.cfl_mode), seed=seed)


@dataclass(frozen=True)
class StaticSweep:
    """One static sweep: exactly one of ``audience_gini`` / ``train_density`` has several values."""

    name: str
    audience_gini: tuple[float, ...]
    train_density: tuple[float, ...]

    def points(self) -> list[tuple[str, float, float]]:
        out = []
        for g in self.audience_gini:
            for d in self.train_density:
                if len(self.audience_gini) > 1:
                    tag = f"gini={g:g}"
                else:
                    tag = f"density={d:g}"
                out.append((f"{self.name}[{tag}]", g, d))
        return out


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    dataset: DatasetSpec
    sim: SimConfig
    methods: tuple[MethodSpec, ...]
    out_dir: Path
    sweep_gini: tuple[float, ...] = ()
    static: tuple[StaticSweep, ...] = ()
    save_logs: bool = True
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def seeds(self) -> list[int]:
        return [self.sim.seed + r for r in range(self.sim.repeats)]


# -- parsing ---------------------------------------------------------------------

_TOP_KEYS = {"name", "dataset", "simulation", "trainer", "methods", "sweep", "static", "out", "save_logs", "paper_scale"}
_SIM_KEYS = {"K": int, "T": int, "L": int, "checkpoint_every": int, "seed": int, "repeats": int}
_SYNTH_KEYS = {"n_users": int, "n_items": int, "audience_gini": float, "density": float,
               "affinity": float, "latent_dim": int, "seed": int}
_RATINGS_KEYS = {"path": str, "delimiter": str, "target_density": float, "user_cap": int, "seed": int}
_TRAINER_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_METHOD_KEYS = {"method", "label", "cfl_mode", "alpha", "delta", "fpc_posterior", "group"}


def _check_type(value, typ, path: str):
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, bool):
        raise ConfigError(f"{path}: expected int, got bool")
    if not isinstance(value, typ):
        raise ConfigError(f"{path}: expected {typ.__name__}, got {type(value).__name__} ({value!r})")
    return value


def _mapping(node, path: str, allowed) -> dict:
    if node is None:
        return {}
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(node).__name__}")
    for key in node:
        if key not in allowed:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"{where}: unknown key {key!r}")
    return node


def _typed(node: dict, schema: dict, path: str) -> dict:
    out = {}
    for key, value in node.items():
        typ = schema[key]
        if value is None and key in ("user_cap", "checkpoint_every"):
            out[key] = None
            continue
        out[key] = _check_type(value, typ, f"{path}.{key}")
    return out


def _floats(value, path: str) -> list[float]:
    values = value if isinstance(value, list) else [value]
    if not values:
        raise ConfigError(f"{path}: empty list")
    return [_check_type(v, float, f"{path}[{j}]") for j, v in enumerate(values)]


def _parse_dataset(node, path="dataset") -> DatasetSpec:
    if node is None:
        raise ConfigError(f"{path}: missing required field")
    node = _mapping(node, path, {"synthetic", "ratings", "bitmap"})
    if len(node) != 1:
        raise ConfigError(f"{path}: give exactly one of synthetic, ratings, bitmap")
    (source, body), = node.items()
    if source == "bitmap":
        return DatasetSpec(source="bitmap", path=_check_type(body, str, f"{path}.bitmap"))
    schema = _SYNTH_KEYS if source == "synthetic" else _RATINGS_KEYS
    kw = _typed(_mapping(body, f"{path}.{source}", schema), schema, f"{path}.{source}")
    if source == "ratings" and "path" not in kw:
        raise ConfigError(f"{path}.ratings.path: missing required field")
    return DatasetSpec(source=source, **kw)


def _method_label(method: str, alpha: float | None, delta: float | None, cfl: str) -> str:
    label = method
    if alpha is not None:
        label += f"[alpha={alpha:g}]"
    if delta is not None:
        label += f"[delta={delta:g}]"
    if cfl == "without_cfl":
        label += "/without_cfl"
    return label


def _parse_methods(node, path="methods") -> tuple[MethodSpec, ...]:
    if node is None:
        raise ConfigError(f"{path}: missing required field")
    if not isinstance(node, list) or not node:
        raise ConfigError(f"{path}: expected a non-empty list")
    out: list[MethodSpec] = []
    for j, entry in enumerate(node):
        where = f"{path}[{j}]"
        if isinstance(entry, str):
            entry = {"method": entry}
        entry = _mapping(entry, where, _METHOD_KEYS)
        method = entry.get("method")
        if method not in METHODS:
            raise ConfigError(f"{where}.method: unknown method {method!r}; expected one of {', '.join(METHODS)}")
        cfl = entry.get("cfl_mode", "with_cfl")
        if cfl not in ("with_cfl", "without_cfl"):
            raise ConfigError(f"{where}.cfl_mode: expected with_cfl or without_cfl, got {cfl!r}")
        alphas = _floats(entry["alpha"], f"{where}.alpha") if "alpha" in entry else [None]
        deltas = _floats(entry["delta"], f"{where}.delta") if "delta" in entry else [None]
        if method != "scale" and "alpha" in entry:
            raise ConfigError(f"{where}.alpha: only the scale method takes alpha")
        if method not in ("dscale", "fpc_dscale") and "delta" in entry:
            raise ConfigError(f"{where}.delta: only dscale and fpc_dscale take delta")
        for a in alphas:
            if a is not None and a < 0:
                raise ConfigError(f"{where}.alpha: must be >= 0, got {a}")
        for d in deltas:
            if d is not None and d < 0:
                raise ConfigError(f"{where}.delta: must be >= 0, got {d}")
        posterior = _check_type(entry.get("fpc_posterior", False), bool, f"{where}.fpc_posterior")
        group = entry.get("group") or (method if cfl == "with_cfl" else f"{method}/without_cfl")
        multi = len(alphas) * len(deltas) > 1
        for a in alphas:
            for d in deltas:
                label = entry.get("label") if not multi and "label" in entry else _method_label(method, a, d, cfl)
                out.append(MethodSpec(label, method, cfl, a or 0.0, d or 0.0, posterior, str(group)))
    labels = [m.label for m in out]
    dup = {x for x in labels if labels.count(x) > 1}
    if dup:
        raise ConfigError(f"{path}: duplicate method labels {sorted(dup)}")
    return tuple(out)


def _parse_static(node, path="static") -> tuple[StaticSweep, ...]:
    if node is None:
        return ()
    if not isinstance(node, list):
        node = [node]
    out = []
    for j, entry in enumerate(node):
        where = f"{path}[{j}]"
        entry = _mapping(entry, where, {"name", "audience_gini", "train_density"})
        for key in ("audience_gini", "train_density"):
            if key not in entry:
                raise ConfigError(f"{where}.{key}: missing required field")
        g = _floats(entry["audience_gini"], f"{where}.audience_gini")
        d = _floats(entry["train_density"], f"{where}.train_density")
        if len(g) > 1 and len(d) > 1:
            raise ConfigError(f"{where}: sweep either audience_gini or train_density, not both")
        if any(not 0 < x < 1 for x in d):
            raise ConfigError(f"{where}.train_density: values must lie in (0, 1)")
        name = _check_type(entry.get("name", "imbalance" if len(g) > 1 else "density"), str, f"{where}.name")
        out.append(StaticSweep(name, tuple(g), tuple(d)))
    return tuple(out)


def spec_from_dict(doc: dict, paper_scale: bool = False, source: str = "<config>") -> ExperimentSpec:
    doc = _mapping(doc, "", _TOP_KEYS)
    name = _check_type(doc.get("name", Path(source).stem), str, "name")
    if not re.fullmatch(r"[A-Za-z0-9_.\-]+", name):
        raise ConfigError(f"name: {name!r} may only contain letters, digits, '_', '-' and '.'")
    dataset = _parse_dataset(doc.get("dataset"))
    sim_kw = _typed(_mapping(doc.get("simulation"), "simulation", _SIM_KEYS), _SIM_KEYS, "simulation")
    if paper_scale:
        scale = dict(PAPER_SCALE)
        scale.update(_typed(_mapping(doc.get("paper_scale"), "paper_scale", _SIM_KEYS), _SIM_KEYS, "paper_scale"))
        sim_kw.update(scale)
        sim_kw.setdefault("checkpoint_every", None)
        if sim_kw["checkpoint_every"] is not None and sim_kw["checkpoint_every"] % sim_kw["L"]:
            sim_kw["checkpoint_every"] = None
    trainer_kw = _typed(_mapping(doc.get("trainer"), "trainer", _TRAINER_KEYS), _TRAINER_KEYS, "trainer")
    try:
        trainer = TrainConfig(**trainer_kw)
    except ValueError as exc:
        raise ConfigError(f"trainer: {exc}") from None
    static = _parse_static(doc.get("static"))
    methods = _parse_methods(doc.get("methods", ["mf"] if static else None))
    if static and any(m.method != "mf" or m.cfl_mode != "with_cfl" for m in methods):
        raise ConfigError("methods: static sweeps only support the plain mf method")
    sweep = _mapping(doc.get("sweep"), "sweep", {"audience_gini"})
    sweep_gini = tuple(_floats(sweep["audience_gini"], "sweep.audience_gini")) if "audience_gini" in sweep else ()
    if static and sweep_gini:
        raise ConfigError("sweep: cannot be combined with static")
    if (static or sweep_gini) and dataset.source != "synthetic":
        raise ConfigError("dataset: imbalance and density sweeps need a synthetic dataset")
    try:
        sim = SimConfig(trainer=trainer, **sim_kw)
    except ValueError as exc:
        raise ConfigError(f"simulation: {exc}") from None
    for m in methods:
        if m.method != "mf" and m.cfl_mode == "without_cfl" and m.method in ("popular", "random"):
            raise ConfigError(f"methods: {m.label}: without_cfl only applies to model-based methods")
    if dataset.source == "synthetic" and dataset.n_items < sim.K:
        raise ConfigError(f"dataset.synthetic.n_items: need at least K={sim.K} items")
    out = Path(_check_type(doc.get("out", f"runs/{name}"), str, "out"))
    save_logs = _check_type(doc.get("save_logs", True), bool, "save_logs")
    return ExperimentSpec(name, dataset, sim, methods, out, sweep_gini, static, save_logs, raw=doc)


def parse_config(path, paper_scale: bool = False) -> ExperimentSpec:
    """Load a YAML experiment config (or a shipped recipe name) into a validated spec."""
    path = resolve_config(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return spec_from_dict(doc, paper_scale=paper_scale, source=str(path))


def recipe_names() -> list[str]:
    return sorted(p.stem for p in RECIPE_DIR.glob("*.yaml"))


def resolve_config(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    recipe = RECIPE_DIR / f"{path}.yaml"
    if recipe.exists():
        return recipe
    raise ConfigError(f"{path}: no such config file or recipe (recipes: {', '.join(recipe_names())})")


# -- execution -------------------------------------------------------------------

@dataclass
class Task:
    label: str
    method: MethodSpec
    seed: int
    audience_gini: float | None = None
    train_density: float | None = None

    @property
    def run_id(self) -> str:
        return f"{self.label}/seed{self.seed}"


@dataclass
class RunOutcome:
    task: Task
    metrics: MetricSeries | None
    error: str | None = None
    log_path: str | None = None


def build_tasks(spec: ExperimentSpec) -> list[Task]:
    tasks = []
    if spec.static:
        mf = spec.methods[0]
        for sw in spec.static:
            for label, g, d in sw.points():
                tasks += [Task(label, mf, s, g, d) for s in spec.seeds]
        return tasks
    variants = spec.sweep_gini or (None,)
    for m in spec.methods:
        for g in variants:
            label = m.label if g is None else f"{m.label}@gini={g:g}"
            tasks += [Task(label, m, s, g) for s in spec.seeds]
    return tasks


def _safe(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=@\-]+", "_", label).strip("_")


def execute(spec: ExperimentSpec, task: Task) -> RunOutcome:
    cfg = task.method.sim_config(spec.sim, task.seed)
    try:
        if task.train_density is not None:
            # static sweeps draw a fresh ground truth per repeat
            gt = spec.dataset.build(task.audience_gini, seed=spec.dataset.seed + task.seed)
            train = make_density_variants(gt, [task.train_density], seed=task.seed)[0]
            gini, clicks = static_round(gt, train, cfg, seed=task.seed)
            ms = MetricSeries()
            ms.append(0, clicks, gini, 0.0)
            return RunOutcome(task, ms)
        gt = spec.dataset.build(task.audience_gini)
        res = run(gt, cfg)
    except SimulationError as exc:
        logger.error("run %s failed: %s", task.run_id, exc)
        return RunOutcome(task, exc.partial.metrics if exc.partial else None, str(exc))
    except Exception as exc:  # one bad run must not sink the experiment
        logger.error("run %s failed: %s: %s", task.run_id, type(exc).__name__, exc)
        return RunOutcome(task, None, f"{type(exc).__name__}: {exc}")
    log_path = None
    if spec.save_logs:
        d = spec.out_dir / "runs" / _safe(task.label) / f"seed{task.seed}"
        d.mkdir(parents=True, exist_ok=True)
        res.log.save(d / "log.npz")
        write_metrics_csv(d / "metrics.csv", [(task.run_id, task.label, res.metrics)])
        log_path = str(d / "log.npz")
    return RunOutcome(task, res.metrics, None, log_path)


def _execute_star(args):
    return execute(*args)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(path, rows) -> None:
    """``rows``: iterable of (run_id, method label, MetricSeries)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for run_id, label, ms in rows:
            for c in ms.checkpoints:
                w.writerow((run_id, label, c.iteration, c.cumulative_clicks, _fmt(c.gini_tpr), _fmt(c.alpha)))


def _stats(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std())


def summarize(spec: ExperimentSpec, outcomes: list[RunOutcome]) -> dict[str, Any]:
    by_label: dict[str, list[RunOutcome]] = {}
    for o in outcomes:
        by_label.setdefault(o.task.label, []).append(o)
    entries = []
    for label, group in by_label.items():
        t0 = group[0].task
        ok = [o for o in group if o.error is None]
        entry: dict[str, Any] = {
            "label": label,
            "method": t0.method.method,
            "group": t0.method.group if not spec.static else label.split("[")[0],
            "cfl_mode": t0.method.cfl_mode,
            "alpha": t0.method.alpha,
            "delta": t0.method.delta,
            "audience_gini": t0.audience_gini,
            "train_density": t0.train_density,
            "seeds": [o.task.seed for o in ok],
            "n_runs": len(ok),
            "failed_seeds": [o.task.seed for o in group if o.error is not None],
        }
        if ok:
            finals_g = [o.metrics.gini[-1] for o in ok]
            finals_c = [int(o.metrics.clicks[-1]) for o in ok]
            entry["final_gini_mean"], entry["final_gini_sd"] = _stats(finals_g)
            entry["clicks_mean"], entry["clicks_sd"] = _stats(finals_c)
            entry["final_gini_by_seed"] = [float(g) for g in finals_g]
            entry["clicks_by_seed"] = finals_c
            n = min(len(o.metrics) for o in ok)
            g = np.array([o.metrics.gini[:n] for o in ok])
            c = np.array([o.metrics.clicks[:n] for o in ok], dtype=float)
            entry["checkpoints"] = {
                "iteration": ok[0].metrics.iterations[:n].tolist(),
                "clicks_mean": c.mean(0).tolist(),
                "clicks_sd": c.std(0).tolist(),
                "gini_mean": g.mean(0).tolist(),
                "gini_sd": g.std(0).tolist(),
                "alpha": ok[0].metrics.alpha[:n].tolist(),
            }
        entries.append(entry)
    failures = [{"run_id": o.task.run_id, "error": o.error} for o in outcomes if o.error is not None]
    return {
        "name": spec.name,
        "seeds": spec.seeds,
        "config": _echo(spec),
        "methods": entries,
        "failures": failures,
    }


def _echo(spec: ExperimentSpec) -> dict:
    sim = dataclasses.asdict(spec.sim)
    sim.pop("policy")
    sim["cfl_mode"] = spec.sim.cfl_mode.value
    sim["ranker"] = spec.sim.ranker.value
    return {
        "dataset": dataclasses.asdict(spec.dataset),
        "simulation": sim,
        "methods": [dataclasses.asdict(m) for m in spec.methods],
        "sweep_audience_gini": list(spec.sweep_gini),
        "static": [dataclasses.asdict(s) for s in spec.static],
    }


def run_experiment(spec: ExperimentSpec, jobs: int = 1, plot: bool = True) -> dict[str, Any]:
    """Run every method x variant x seed, then write metrics.csv, summary.json and the chart pair."""
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    tasks = build_tasks(spec)
    logger.info("%s: %d runs into %s", spec.name, len(tasks), spec.out_dir)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_execute_star, [(spec, t) for t in tasks]))
    else:
        outcomes = []
        for j, t in enumerate(tasks, 1):
            outcomes.append(execute(spec, t))
            logger.info("[%d/%d] %s done", j, len(tasks), t.run_id)
    write_metrics_csv(
        spec.out_dir / "metrics.csv",
        [(o.task.run_id, o.task.label, o.metrics) for o in outcomes if o.error is None],
    )
    summary = summarize(spec, outcomes)
    (spec.out_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    if plot:
        from .plotting import plot_metrics

        plot_metrics(spec.out_dir / "metrics.csv", spec.out_dir)
    return summary


# -- matched-bias comparison -----------------------------------------------------

@dataclass
class Comparison:
    band: tuple[float, float]
    rows: list[dict]
    infeasible: list[str]

    @property
    def feasible(self) -> bool:
        return bool(self.rows)

    def format(self) -> str:
        lo, hi = self.band
        lines = [f"final Gini band [{lo:g}, {hi:g}]",
                 f"{'group':<24} {'setting':<32} {'gini':>15} {'clicks':>19}"]
        for r in self.rows:
            lines.append(
                f"{r['group']:<24} {r['label']:<32} {r['final_gini_mean']:7.3f}±{r['final_gini_sd']:<6.3f} "
                f"{r['clicks_mean']:10.1f}±{r['clicks_sd']:<8.1f}"
            )
        for g in self.infeasible:
            lines.append(f"{g:<24} INFEASIBLE: no setting has its mean final Gini in the band")
        return "\n".join(lines)


def load_summary(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read summary: {exc}") from None
    if not isinstance(doc, dict) or "methods" not in doc:
        raise ConfigError(f"{path}: not a run summary (no 'methods' key)")
    return doc


def compare_at_matched_bias(summaries, band: tuple[float, float]) -> Comparison:
    """Per method group, pick the setting whose mean final Gini lies in ``band`` closest to its centre.

    Groups with no setting inside the band are listed as infeasible.
    """
    lo, hi = band
    if not lo <= hi:
        raise ValueError(f"empty band [{lo}, {hi}]")
    groups: dict[str, list[dict]] = {}
    for s in summaries:
        for e in s["methods"]:
            if "final_gini_mean" in e:
                groups.setdefault(e["group"], []).append(dict(e, source=s.get("name", "")))
    mid = 0.5 * (lo + hi)
    rows, infeasible = [], []
    for g, entries in groups.items():
        inside = [e for e in entries if lo <= e["final_gini_mean"] <= hi]
        if not inside:
            infeasible.append(g)
            continue
        best = min(inside, key=lambda e: (abs(e["final_gini_mean"] - mid), e["label"]))
        rows.append(best)
    rows.sort(key=lambda e: -e["clicks_mean"])
    return Comparison((lo, hi), rows, infeasible)
