"""Deterministic evaluation: per-scene records, report JSON and CSV."""

from __future__ import annotations

import csv
import json
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..checkpoint import load_checkpoint
from ..refine import RefinementNetwork
from ..scenegen import Dataset, load_dataset
from .config import RunConfig
from .metrics import compute_metrics, decompose_errors, thresholds_from_lists
from .train import model_config

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "index", "gt_x", "gt_y", "gt_theta_deg", "init_x", "init_y", "init_theta_deg",
    "est_x", "est_y", "est_theta_deg", "lateral_m", "longitudinal_m", "orientation_deg",
    "init_lateral_m", "init_longitudinal_m", "init_orientation_deg",
)
WALL_CLOCK_KEYS = ("wall_clock",)


class IncompatibleCheckpointError(ValueError):
    pass


def revision_tag() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def check_compatible(config: RunConfig, model: RefinementNetwork, dataset: Dataset) -> None:
    """The config must describe the same feature width and head as the checkpoint."""
    want = model_config(config, dataset)
    have = model.config
    if want.width != have.width:
        raise IncompatibleCheckpointError(
            f"config feature width {want.width} ({want.branches}, {want.n_candidates} candidates, "
            f"d-mode {want.d_mode}) != checkpoint width {have.width} ({have.branches}, "
            f"{have.n_candidates} candidates, d-mode {have.d_mode})"
        )
    if have.n_points != dataset.spec.n_points or have.raw_channels != dataset.spec.channels:
        raise IncompatibleCheckpointError(
            f"checkpoint expects {have.n_points} points x {have.raw_channels} channels, dataset has "
            f"{dataset.spec.n_points} x {dataset.spec.channels}"
        )


def _predict_chunk(model: RefinementNetwork, dataset: Dataset, idx, iterations):
    return model.predict(dataset.batch(idx, model.config.levels), iterations=iterations)


_WORKER: dict = {}


def _init_worker(state, config, dtype, dataset):
    model = RefinementNetwork(config, dtype)
    model.load_state_dict(state)
    _WORKER["model"] = model
    _WORKER["dataset"] = dataset


def _worker_chunk(args):
    idx, iterations = args
    return _predict_chunk(_WORKER["model"], _WORKER["dataset"], idx, iterations)


def predict_dataset(model: RefinementNetwork, dataset: Dataset, iterations: int | None = None,
                    chunk_size: int = 16, workers: int = 1) -> np.ndarray:
    """Estimates ``(n, 3)``.  Scenes are processed in fixed chunks, so the
    result does not depend on the number of workers."""
    n = len(dataset)
    chunks = [np.arange(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]
    if not chunks:
        return np.zeros((0, 3))
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(model.state_dict(), model.config, model.dtype, dataset)) as ex:
            parts = list(ex.map(_worker_chunk, [(c, iterations) for c in chunks]))
    else:
        parts = [_predict_chunk(model, dataset, c, iterations) for c in chunks]
    return np.concatenate(parts, axis=0)


def scene_records(est: np.ndarray, dataset: Dataset) -> list[dict]:
    gt = dataset.poses[:, 0].astype(np.float64)
    init = dataset.poses[:, 1].astype(np.float64)
    lat, lon, ori = decompose_errors(est, gt)
    ilat, ilon, iori = decompose_errors(init, gt)
    rows = []
    for i in range(len(dataset)):
        rows.append({
            "index": i,
            "gt_x": gt[i, 0], "gt_y": gt[i, 1], "gt_theta_deg": math.degrees(gt[i, 2]),
            "init_x": init[i, 0], "init_y": init[i, 1], "init_theta_deg": math.degrees(init[i, 2]),
            "est_x": est[i, 0], "est_y": est[i, 1], "est_theta_deg": math.degrees(est[i, 2]),
            "lateral_m": lat[i], "longitudinal_m": lon[i], "orientation_deg": ori[i],
            "init_lateral_m": ilat[i], "init_longitudinal_m": ilon[i], "init_orientation_deg": iori[i],
        })
    return rows


def write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r["index"]] + [repr(float(r[c])) for c in CSV_COLUMNS[1:]])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        return [{k: (int(v) if k == "index" else float(v)) for k, v in row.items()} for row in rd]


def build_report(config: RunConfig, model: RefinementNetwork, dataset: Dataset, est: np.ndarray,
                 iterations: int, seconds: float, dataset_path: str = "") -> dict:
    th = thresholds_from_lists(config["eval"]["thresholds_m"], config["eval"]["thresholds_deg"])
    gt = dataset.poses[:, 0].astype(np.float64)
    init = dataset.poses[:, 1].astype(np.float64)
    cfg = model.config
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "tag": config["run"]["tag"],
        "config_hash": config.hash(),
        "revision": revision_tag(),
        "dataset": {
            "path": str(dataset_path),
            "n_scenes": len(dataset),
            "seed": dataset.seed,
            "noise": {"x_m": dataset.noise_radii[0], "y_m": dataset.noise_radii[1],
                      "theta_deg": math.degrees(dataset.noise_radii[2])},
        },
        "model": {
            "branches": cfg.branches, "width": cfg.width, "n_candidates": cfg.n_candidates,
            "d_mode": cfg.d_mode, "head": cfg.head, "levels": cfg.levels, "iterations": iterations,
        },
        "coefficients": model.coefficients.values(),
        "metrics": compute_metrics(est, gt, th),
        "baseline": compute_metrics(init, gt, th),
        "wall_clock": {"seconds": seconds, "scenes_per_second": len(dataset) / seconds if seconds > 0 else 0.0},
    }


def strip_wall_clock(report: dict) -> dict:
    return {k: v for k, v in report.items() if k not in WALL_CLOCK_KEYS}


def evaluate(config: RunConfig, model: RefinementNetwork | None = None, checkpoint=None,
             dataset: Dataset | None = None, out_dir=None, iterations: int | None = None) -> dict:
    """Evaluate a model (or checkpoint) and optionally write ``report.json`` + ``scenes.csv``."""
    path = ""
    if dataset is None:
        path = config["run"]["eval_dataset"] or config["run"]["dataset"]
        if not path:
            raise ValueError("no evaluation dataset configured")
        dataset = load_dataset(path)
    if len(dataset) == 0:
        raise ValueError("evaluation dataset is empty")
    if model is None:
        if checkpoint is None:
            raise ValueError("evaluate needs a model or a checkpoint")
        model, _ = load_checkpoint(checkpoint)
        check_compatible(config, model, dataset)
    iters = iterations or config["eval"]["iterations"] or model.config.iterations
    t0 = time.perf_counter()
    est = predict_dataset(model, dataset, iters, config["eval"]["chunk_size"], config["run"]["workers"])
    seconds = time.perf_counter() - t0
    report = build_report(config, model, dataset, est, iters, seconds, path)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
        write_csv(out / "scenes.csv", scene_records(est, dataset))
    return report
