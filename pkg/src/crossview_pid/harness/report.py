"""Static SVG plots generated from per-scene CSV dumps and ablation tables."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import read_csv  # noqa: E402

# fixed metadata keeps the SVG bytes reproducible
_SVG_META = {"Date": None, "Creator": "crossview-pid"}


def _save(fig, path: Path) -> Path:
    plt.rcParams["svg.hashsalt"] = "crossview-pid"
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def error_histograms(rows: list[dict], path) -> Path:
    """Estimated vs initial error histograms for lateral, longitudinal and orientation."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, (col, unit) in zip(axes, (("lateral_m", "m"), ("longitudinal_m", "m"), ("orientation_deg", "deg"))):
        est = np.array([r[col] for r in rows])
        init = np.array([r["init_" + col] for r in rows])
        hi = max(float(init.max(initial=0.0)), float(est.max(initial=0.0)), 1e-6)
        bins = np.linspace(0.0, hi, 31)
        ax.hist(init, bins=bins, alpha=0.5, label="initial")
        ax.hist(est, bins=bins, alpha=0.7, label="refined")
        ax.set_xlabel(f"{col.split('_')[0]} error [{unit}]")
        ax.set_ylabel("scenes")
    axes[0].legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def recall_curves(rows: list[dict], path, max_m: float = 10.0, max_deg: float = 10.0) -> Path:
    """Recall as a function of threshold, one panel per axis."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, col, hi in zip(axes, ("lateral_m", "longitudinal_m", "orientation_deg"), (max_m, max_m, max_deg)):
        ts = np.linspace(0.0, hi, 101)
        for prefix, label in (("init_", "initial"), ("", "refined")):
            e = np.array([r[prefix + col] for r in rows])
            ax.plot(ts, [100.0 * np.mean(e < t) for t in ts], label=label)
        ax.set_xlabel(f"threshold [{col.split('_')[-1]}]")
        ax.set_ylabel("recall [%]")
        ax.set_ylim(0, 100)
    axes[0].legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def recall_vs_noise(table_csv, path, metric: str = "r1") -> Path:
    """Recall@threshold against initial noise, one line per branch configuration."""
    with open(table_csv, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader(fh) if r["status"] == "ok"]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, axis in zip(axes, ("lateral", "longitudinal", "orientation")):
        for br in sorted({r["branches"] for r in rows}):
            sel = sorted((float(r["noise_x_m"]), float(r[f"{axis}_{metric}"])) for r in rows if r["branches"] == br)
            if sel:
                xs, ys = zip(*sel)
                ax.plot(xs, ys, marker="o", label=br)
        ax.set_xlabel("initial noise radius [m]")
        ax.set_ylabel(f"{axis} recall [%]")
        ax.set_ylim(0, 100)
    axes[0].legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def make_report(eval_dir, out_dir=None, table_csv=None) -> list[Path]:
    eval_dir = Path(eval_dir)
    out = Path(out_dir) if out_dir else eval_dir
    out.mkdir(parents=True, exist_ok=True)
    written = []
    csv_path = eval_dir / "scenes.csv"
    if csv_path.exists():
        rows = read_csv(csv_path)
        if not rows:
            raise ValueError(f"{csv_path} has no scenes")
        written.append(error_histograms(rows, out / "error_histograms.svg"))
        written.append(recall_curves(rows, out / "recall_curves.svg"))
    if table_csv is not None:
        written.append(recall_vs_noise(table_csv, out / "recall_vs_noise.svg"))
    if not written:
        raise FileNotFoundError(f"nothing to plot: no scenes.csv in {eval_dir} and no ablation table")
    return written
