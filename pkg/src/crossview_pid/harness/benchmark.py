"""Seeded trend benchmark: P-only vs PID training on a repetitive world.

The preset lives in ``presets/trend_benchmark.ini`` and can be passed to the
CLI with ``--config``.  :func:`run_trend_benchmark` trains both branch
configurations on the same datasets and evaluates each checkpoint at 1 and at
the configured number of iterations.
"""

from __future__ import annotations

import time
from importlib import resources

import numpy as np

from ..scenegen import Dataset, generate_dataset
from .config import RunConfig
from .metrics import compute_metrics
from .train import train
from .evaluate import predict_dataset


def preset_path():
    return resources.files("crossview_pid") / "presets" / "trend_benchmark.ini"


def benchmark_config(overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig.from_text(preset_path().read_text(encoding="utf-8"))
    if overrides:
        cfg.update(overrides)
        cfg.validate()
    return cfg


def benchmark_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    g = cfg["generate"]
    spec, radii = cfg.world_spec(), cfg.noise_radii()
    return (generate_dataset(spec, g["scenes"], radii, g["seed"]),
            generate_dataset(spec, g["eval_scenes"], radii, g["eval_seed"]))


def run_trend_benchmark(cfg: RunConfig | None = None, branches=("P", "PID"), log=None) -> dict:
    """Train each branch configuration and evaluate it; returns plain results.

    ``result["runs"][b]["metrics"][it]`` holds the metrics dict for
    ``it`` refinement iterations per level.
    """
    cfg = benchmark_config() if cfg is None else cfg
    t0 = time.perf_counter()
    train_set, eval_set = benchmark_datasets(cfg)
    gt, init = eval_set.poses[:, 0], eval_set.poses[:, 1]
    out = {"baseline": compute_metrics(init, gt), "runs": {}, "eval_set": eval_set, "eval_gt": gt,
           "eval_init": init}
    its = sorted({1, cfg["model"]["iterations"]})
    for b in branches:
        run_cfg = cfg.copy().update({"model.branches": b})
        t1 = time.perf_counter()
        result = train(run_cfg, train_set)
        seconds = time.perf_counter() - t1
        est = {it: predict_dataset(result.model, eval_set, iterations=it) for it in its}
        out["runs"][b] = {
            "model": result.model,
            "train_seconds": seconds,
            "estimates": est,
            "metrics": {it: compute_metrics(e, gt) for it, e in est.items()},
        }
        if log is not None:
            m = out["runs"][b]["metrics"][its[-1]]["recall"]
            log(f"{b}: lateral R@1m {m['lateral']['1']:.1f} longitudinal R@1m {m['longitudinal']['1']:.1f}"
                f" ({seconds:.0f} s)")
    out["seconds"] = time.perf_counter() - t0
    return out


def final_below_initial(est: np.ndarray, init: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of scenes whose final position error is strictly below the initial one."""
    e0 = np.hypot(*(init[:, :2] - gt[:, :2]).T)
    e1 = np.hypot(*(est[:, :2] - gt[:, :2]).T)
    return float(np.mean(e1 < e0))
