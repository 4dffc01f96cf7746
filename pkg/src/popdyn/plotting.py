"""Static charts rebuilt from a metrics.csv file."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .experiment import CSV_HEADER


def read_metrics_csv(path) -> dict[str, dict[str, list[tuple[int, int, float]]]]:
    """method -> run_id -> [(iteration, clicks, gini), ...] in file order."""
    out: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = tuple(next(rows, ()))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {','.join(header)!r}")
        for lineno, row in enumerate(rows, start=2):
            try:
                run_id, method, it, clicks, gini, _alpha = row
                out[method][run_id].append((int(it), int(clicks), float(gini)))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from None
    return out


def _aggregate(runs: dict[str, list]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = min(len(r) for r in runs.values())
    arr = np.array([r[:n] for r in runs.values()], dtype=float)  # (runs, n, 3)
    return arr[0, :, 0], arr[:, :, 1], arr[:, :, 2]


def plot_metrics(csv_path, out_dir=None) -> list[Path]:
    """Write ``clicks.png`` and ``gini.png`` (mean line, ±sd band per method); returns their paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_path = Path(csv_path)
    out_dir = Path(out_dir) if out_dir is not None else csv_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    data = read_metrics_csv(csv_path)
    one_shot = all(len(r) == 1 for m in data.values() for r in m.values())

    paths = []
    for col, ylabel, fname in ((1, "cumulative clicks", "clicks.png"), (2, "Gini of TPR", "gini.png")):
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        labels = list(data)
        for j, method in enumerate(labels):
            it, clicks, gini = _aggregate(data[method])
            y = clicks if col == 1 else gini
            mu, sd = y.mean(0), y.std(0)
            if one_shot:
                ax.errorbar([j], mu, yerr=sd, fmt="o", capsize=3, label=method)
            else:
                ax.plot(it, mu, label=method, lw=1.4)
                ax.fill_between(it, mu - sd, mu + sd, alpha=0.2)
        if one_shot:
            ax.set_xticks(range(len(labels)))
            ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        else:
            ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        if len(labels) <= 12 and not one_shot:
            ax.legend(fontsize=7)
        fig.tight_layout()
        p = out_dir / fname
        fig.savefig(p, dpi=110)
        plt.close(fig)
        paths.append(p)
    return paths
