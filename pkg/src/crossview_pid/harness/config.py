"""Run configuration: a versioned INI file with typed, validated keys.

Unknown sections or keys are rejected so a typo never silently falls back to a
default.  :meth:`RunConfig.hash` is computed over the canonical JSON form of
the fully resolved values, so formatting, key order and comments do not
change it.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import json
import math
from dataclasses import fields
from pathlib import Path

from ..pid import BRANCH_CONFIGS, CANDIDATE_MODES, D_MODES
from ..scenegen import WorldSpec
from ..spe import HEADS

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).replace(",", " ").split())


def _str(text) -> str:
    return str(text).strip()


def _opt_str(text) -> str:
    return str(text).strip()


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "config_version": (int, CONFIG_VERSION),
        "dataset": (_opt_str, ""),
        "eval_dataset": (_opt_str, ""),
        "seed": (int, 0),
        "workers": (int, 1),
        "tag": (_str, "run"),
    },
    "model": {
        "branches": (_str, "PID"),
        "channels": (int, 8),
        "encoder_hidden": (int, 16),
        "embed_dim": (int, 16),
        "reduced_points": (int, 32),
        "phi_hidden": (int, 64),
        "psi_hidden": (int, 64),
        "head": (_str, "spe"),
        "levels": (int, 3),
        "iterations": (int, 5),
        "output_scale": (_floats, ()),
        "output_decay": (float, 1.0),
        "detach_pose": (_bool, True),
    },
    "candidates": {
        "per_direction": (int, 2),
        "fraction_of_range": (float, 0.25),
        "mode": (_str, "axis"),
    },
    "d_branch": {
        "mode": (_str, "norm"),
        "axes": (_str, "x,y,theta"),
        "stop_gradient": (_bool, True),
    },
    "coefficients": {
        "learnable": (_bool, True),
        "k_p": (float, 1.0),
        "k_i": (float, 1.0),
        "k_d": (float, 1.0),
        "learning_rate": (float, 1e-4),
    },
    "train": {
        "epochs": (int, 10),
        "batch_size": (int, 4),
        "learning_rate": (float, 1e-4),
        "clip_norm": (float, 10.0),
        "iterations": (int, 0),
    },
    "loss": {
        "supervise_every_iter": (_bool, False),
        "angle_weight": (float, 1.0),
    },
    "noise": {
        "x_m": (float, 0.0),
        "y_m": (float, 0.0),
        "theta_deg": (float, 0.0),
    },
    "eval": {
        "iterations": (int, 0),
        "chunk_size": (int, 16),
        "thresholds_m": (_floats, (0.25, 1.0, 5.0)),
        "thresholds_deg": (_floats, (0.25, 1.0, 5.0)),
    },
    "generate": {
        "scenes": (int, 2000),
        "eval_scenes": (int, 500),
        "seed": (int, 0),
        "eval_seed": (int, 1),
    },
    # procedural world and sensor rig; mirrors WorldSpec field by field
    "world": {f.name: (int if f.type == "int" else float, f.default) for f in fields(WorldSpec)},
}

AXIS_NAMES = ("x", "y", "theta")


def parse_axes(text: str) -> tuple[bool, bool, bool]:
    names = [t.strip() for t in str(text).replace(" ", ",").split(",") if t.strip()]
    bad = [n for n in names if n not in AXIS_NAMES]
    if bad:
        raise ConfigError(f"d_branch.axes: unknown axis {bad}, expected a subset of {AXIS_NAMES}")
    return tuple(a in names for a in AXIS_NAMES)


class RunConfig:
    """Typed view over the INI sections; access as ``cfg["model"]["levels"]``."""

    def __init__(self, values: dict | None = None):
        self.values = {s: {k: copy.deepcopy(d) for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        if values:
            self.update(values)
        self.validate()

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, dotted: str):
        s, k = dotted.split(".", 1)
        return self.values[s][k]

    def update(self, values: dict) -> RunConfig:
        """Merge ``{section: {key: value}}`` or ``{"section.key": value}`` entries."""
        flat = {}
        for k, v in values.items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    flat[f"{k}.{kk}"] = vv
            else:
                flat[k] = v
        for dotted, raw in flat.items():
            if "." not in dotted:
                raise ConfigError(f"config key {dotted!r} needs a section")
            s, k = dotted.split(".", 1)
            if s not in SCHEMA:
                raise ConfigError(f"unknown config section [{s}]")
            if k not in SCHEMA[s]:
                raise ConfigError(f"unknown config key {k!r} in [{s}]")
            parser = SCHEMA[s][k][0]
            try:
                self.values[s][k] = parser(raw) if not isinstance(raw, bool) or parser is _bool else raw
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{s}] {k}: {exc}") from None
        return self

    def validate(self) -> None:
        v = self.values
        if v["run"]["config_version"] != CONFIG_VERSION:
            raise ConfigError(f"config_version {v['run']['config_version']} unsupported (expected {CONFIG_VERSION})")
        m = v["model"]
        if m["branches"] not in BRANCH_CONFIGS:
            raise ConfigError(f"[model] branches {m['branches']!r} not in {BRANCH_CONFIGS}")
        if m["head"] not in HEADS:
            raise ConfigError(f"[model] head {m['head']!r} not in {HEADS}")
        for key in ("channels", "encoder_hidden", "embed_dim", "reduced_points", "phi_hidden", "psi_hidden",
                    "levels", "iterations"):
            if m[key] < 1:
                raise ConfigError(f"[model] {key} must be >= 1")
        if m["output_scale"] and len(m["output_scale"]) != 3:
            raise ConfigError("[model] output_scale needs three values (m, m, deg)")
        c = v["candidates"]
        if c["per_direction"] < 0 or c["per_direction"] % 2:
            raise ConfigError("[candidates] per_direction must be a non-negative even number")
        if c["mode"] not in CANDIDATE_MODES:
            raise ConfigError(f"[candidates] mode {c['mode']!r} not in {CANDIDATE_MODES}")
        if not 0 < c["fraction_of_range"] <= 1:
            raise ConfigError("[candidates] fraction_of_range must be in (0, 1]")
        d = v["d_branch"]
        if d["mode"] not in D_MODES:
            raise ConfigError(f"[d_branch] mode {d['mode']!r} not in {D_MODES}")
        parse_axes(d["axes"])
        t = v["train"]
        if t["epochs"] < 0 or t["batch_size"] < 1 or t["iterations"] < 0:
            raise ConfigError("[train] epochs >= 0, batch_size >= 1 and iterations >= 0 required")
        for key, val in (("train.learning_rate", t["learning_rate"]),
                         ("coefficients.learning_rate", v["coefficients"]["learning_rate"]),
                         ("train.clip_norm", t["clip_norm"])):
            if not (val > 0 and math.isfinite(val)):
                raise ConfigError(f"{key} must be positive")
        n = v["noise"]
        if min(n["x_m"], n["y_m"], n["theta_deg"]) < 0:
            raise ConfigError("[noise] radii must be non-negative")
        e = v["eval"]
        if e["chunk_size"] < 1 or e["iterations"] < 0:
            raise ConfigError("[eval] chunk_size >= 1 and iterations >= 0 required")
        if not e["thresholds_m"] or not e["thresholds_deg"]:
            raise ConfigError("[eval] thresholds must not be empty")
        if v["run"]["workers"] < 1:
            raise ConfigError("[run] workers must be >= 1")
        if v["generate"]["scenes"] < 0 or v["generate"]["eval_scenes"] < 0:
            raise ConfigError("[generate] scene counts must be non-negative")
        try:
            self.world_spec()
        except ValueError as exc:
            raise ConfigError(f"[world] {exc}") from None

    def world_spec(self) -> WorldSpec:
        return WorldSpec(**self.values["world"])

    def noise_radii(self) -> tuple[float, float, float]:
        n = self.values["noise"]
        return (n["x_m"], n["y_m"], math.radians(n["theta_deg"]))

    # -- io --------------------------------------------------------------------
    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        values = {s: dict(cp[s]) for s in cp.sections()}
        return cls(values)

    @classmethod
    def load(cls, path) -> RunConfig:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        return cls.from_text(p.read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = []
        for s, keys in self.values.items():
            lines.append(f"[{s}]")
            for k, val in keys.items():
                lines.append(f"{k} = {_format(val)}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"), default=list)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def copy(self) -> RunConfig:
        return RunConfig(copy.deepcopy(self.values))


def _format(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, (tuple, list)):
        return ", ".join(repr(float(x)) for x in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)
