"""Run a matrix of configurations on shared datasets and seeds.

A plan is an INI file::

    [ablation]
    base = run.ini            ; optional base run config
    train_scenes = 400        ; used when a variant needs a regenerated dataset
    eval_scenes = 200

    [matrix]                  ; Cartesian product of comma-separated values
    model.branches = P, PID
    candidates.per_direction = 0, 2

    [variant no_theta]        ; extra explicit variants (dotted overrides)
    d_branch.axes = x, y

Variants that change the noise radii get datasets regenerated with the same
world spec and seed.  Invalid variants are reported and skipped.
"""

from __future__ import annotations

import configparser
import csv
import itertools
import math
import time
from pathlib import Path

from ..scenegen import Dataset, generate_dataset, load_dataset
from .config import ConfigError, RunConfig
from .evaluate import evaluate
from .train import model_config, train

TABLE_COLUMNS = (
    "variant", "status", "branches", "width", "n_candidates", "per_direction", "iterations", "d_mode", "d_axes",
    "noise_x_m", "noise_y_m", "noise_theta_deg", "lateral_r1", "longitudinal_r1", "orientation_r1",
    "lateral_r5", "longitudinal_r5", "orientation_r5", "mean_position_m", "median_position_m",
    "k_p", "k_i", "k_d", "train_seconds",
)


class PlanError(ValueError):
    pass


def normalize(config: RunConfig) -> RunConfig:
    """Canonical form: zero candidates per direction drops the I branch."""
    out = config.copy()
    m = out["model"]
    if out["candidates"]["per_direction"] == 0 and "I" in m["branches"]:
        m["branches"] = m["branches"].replace("I", "") or "P"
    if "I" not in m["branches"]:
        out["candidates"]["per_direction"] = 0
    out.validate()
    return out


def load_plan(path) -> tuple[dict, list[tuple[str, dict]]]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if not cp.read(path, encoding="utf-8"):
        raise PlanError(f"cannot read plan {path}")
    return parse_plan(cp, Path(path).parent)


def parse_plan(cp: configparser.ConfigParser, root: Path = Path(".")):
    settings = dict(cp["ablation"]) if cp.has_section("ablation") else {}
    if "base" in settings and settings["base"]:
        base = Path(settings["base"])
        settings["base"] = str(base if base.is_absolute() else root / base)
    variants = []
    if cp.has_section("matrix"):
        keys = list(cp["matrix"].keys())
        values = [[v.strip() for v in cp["matrix"][k].split(",") if v.strip()] for k in keys]
        for combo in itertools.product(*values):
            name = "+".join(f"{k.split('.')[-1]}={v}" for k, v in zip(keys, combo))
            variants.append((name, dict(zip(keys, combo))))
    for section in cp.sections():
        if section.startswith("variant"):
            name = section[len("variant"):].strip() or f"variant{len(variants)}"
            variants.append((name, dict(cp[section])))
    if not variants:
        variants.append(("base", {}))
    return settings, variants


def _row(name: str, status: str, cfg: RunConfig | None = None, report: dict | None = None,
         width=None, n_cand=None, seconds: float = 0.0) -> dict:
    row = {c: "" for c in TABLE_COLUMNS}
    row.update(variant=name, status=status)
    if cfg is not None:
        row.update(
            branches=cfg["model"]["branches"], per_direction=cfg["candidates"]["per_direction"],
            iterations=cfg["eval"]["iterations"] or cfg["model"]["iterations"], d_mode=cfg["d_branch"]["mode"],
            d_axes=cfg["d_branch"]["axes"], width=width, n_candidates=n_cand,
        )
    if report is not None:
        m = report["metrics"]
        r = m["recall"]
        row.update(
            noise_x_m=report["dataset"]["noise"]["x_m"], noise_y_m=report["dataset"]["noise"]["y_m"],
            noise_theta_deg=report["dataset"]["noise"]["theta_deg"],
            lateral_r1=r["lateral"].get("1", ""), longitudinal_r1=r["longitudinal"].get("1", ""),
            orientation_r1=r["orientation"].get("1", ""), lateral_r5=r["lateral"].get("5", ""),
            longitudinal_r5=r["longitudinal"].get("5", ""), orientation_r5=r["orientation"].get("5", ""),
            mean_position_m=m["mean"]["position_m"], median_position_m=m["median"]["position_m"],
            train_seconds=round(seconds, 3), **report["coefficients"],
        )
    return row


def _dataset_for(cache: dict, base: Dataset, radii: tuple, n: int) -> Dataset:
    key = (tuple(round(r, 12) for r in radii), n)
    if key not in cache:
        cache[key] = generate_dataset(base.spec, n, radii, base.seed)
    return cache[key]


def ablate(plan_settings: dict, variants: list, base_config: RunConfig | None = None,
           train_set: Dataset | None = None, eval_set: Dataset | None = None, out_csv=None, log=print) -> list[dict]:
    """Train and evaluate every variant; returns the table rows (one per variant)."""
    if base_config is None:
        base_path = plan_settings.get("base")
        base_config = RunConfig.load(base_path) if base_path else RunConfig()
    if train_set is None:
        if not base_config["run"]["dataset"]:
            raise PlanError("ablation needs a training dataset")
        train_set = load_dataset(base_config["run"]["dataset"])
    if eval_set is None:
        path = base_config["run"]["eval_dataset"]
        eval_set = load_dataset(path) if path else train_set
    n_train = int(plan_settings.get("train_scenes", len(train_set)))
    n_eval = int(plan_settings.get("eval_scenes", len(eval_set)))
    cache_tr: dict = {}
    cache_ev: dict = {}
    rows = []
    for name, overrides in variants:
        try:
            cfg = normalize(base_config.copy().update(overrides))
            cfg.validate()
        except (ConfigError, ValueError) as exc:
            log(f"[ablate] skipping {name}: {exc}")
            rows.append(_row(name, f"skipped: {exc}"))
            continue
        n = cfg["noise"]
        radii = (n["x_m"], n["y_m"], math.radians(n["theta_deg"]))
        if any(radii) and radii != tuple(train_set.noise_radii):
            tr = _dataset_for(cache_tr, train_set, radii, n_train)
            ev = _dataset_for(cache_ev, eval_set, radii, n_eval)
        else:
            tr, ev = train_set, eval_set
        try:
            mcfg = model_config(cfg, tr)
            t0 = time.perf_counter()
            result = train(cfg, tr)
            seconds = time.perf_counter() - t0
            report = evaluate(cfg, model=result.model, dataset=ev)
        except Exception as exc:  # a failing variant must not sink the whole matrix
            log(f"[ablate] {name} failed: {exc}")
            rows.append(_row(name, f"failed: {exc}", cfg))
            continue
        rows.append(_row(name, "ok", cfg, report, mcfg.width, mcfg.n_candidates, seconds))
        log(f"[ablate] {name}: R@1m lat {rows[-1]['lateral_r1']:.2f} lon {rows[-1]['longitudinal_r1']:.2f}")
    if out_csv is not None:
        write_table(out_csv, rows)
    return rows


def write_table(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
