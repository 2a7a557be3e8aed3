"""Command line entry point: ``crossview-pid <subcommand>``.

Every RunConfig field is exposed as ``--section.key VALUE``; a ``--config``
file is applied first and explicit flags override it.

Exit codes: 0 ok, 1 invalid input, 2 runtime failure, 3 gradcheck failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .harness.ablate import PlanError, ablate, load_plan
from .harness.config import SCHEMA, ConfigError, RunConfig
from .harness.evaluate import IncompatibleCheckpointError, evaluate
from .harness.gradcheck import FAULTS, SUITES, gradcheck
from .harness.report import make_report
from .harness.train import TrainingError, train
from .scenegen import DatasetFormatError, SceneGenerationError, generate_dataset, load_dataset, save_dataset

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3
# noise radii used by ``generate`` when the config leaves them at zero (m, m, deg)
DEFAULT_NOISE = (18.75, 18.75, 15.0)

log = logging.getLogger("crossview_pid")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run config applied before the flags")
    g = p.add_argument_group("run config overrides")
    for section, keys in SCHEMA.items():
        for key in keys:
            g.add_argument(f"--{section}.{key}", dest=f"cfg:{section}.{key}", metavar="V", default=None)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    cfg.update(overrides)
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crossview-pid", description="Cross-view pose refinement with PID branches.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, help="defaults to [generate] scenes")
    g.add_argument("--seed", type=int, help="defaults to [generate] seed")
    g.add_argument("--split", choices=("train", "eval"), default="train",
                   help="eval uses [generate] eval_scenes and eval_seed")
    _add_config_flags(g)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--dataset", help="defaults to [run] dataset")
    t.add_argument("--out", required=True, help="checkpoint path")
    _add_config_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint; writes report.json and scenes.csv")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help="defaults to [run] eval_dataset")
    e.add_argument("--out", required=True, help="output directory")
    _add_config_flags(e)

    a = sub.add_parser("ablate", help="train and evaluate a matrix of variants")
    a.add_argument("--plan", required=True)
    a.add_argument("--dataset")
    a.add_argument("--eval-dataset")
    a.add_argument("--out", required=True, help="table CSV path")
    _add_config_flags(a)

    gc = sub.add_parser("gradcheck", help="finite-difference oracles for every analytic derivative")
    gc.add_argument("--instances", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--suite", action="append", choices=tuple(SUITES))
    gc.add_argument("--inject-fault", choices=FAULTS)
    gc.add_argument("--out", help="write the JSON result here")

    r = sub.add_parser("report", help="SVG plots from an eval directory and/or ablation table")
    r.add_argument("--eval-dir", required=True)
    r.add_argument("--table")
    r.add_argument("--out")
    return p


def _cmd_generate(args) -> int:
    cfg = _config(args)
    radii = cfg.noise_radii()
    if not any(radii):
        radii = (DEFAULT_NOISE[0], DEFAULT_NOISE[1], math.radians(DEFAULT_NOISE[2]))
    prefix = "eval_" if args.split == "eval" else ""
    n = cfg["generate"][prefix + "scenes"] if args.scenes is None else args.scenes
    seed = cfg["generate"][prefix + "seed"] if args.seed is None else args.seed
    if n < 1:
        raise UsageError("--scenes must be >= 1")
    ds = generate_dataset(cfg.world_spec(), n, radii, seed, cfg["run"]["workers"])
    path = save_dataset(ds, args.out)
    log.info("wrote %d scenes to %s", n, path)
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.dataset or cfg["run"]["dataset"] or _missing("--dataset"))

    def progress(epoch, rec):
        log.info("epoch %d loss %.4f grad-norm %.3f coefficients %s (%.1fs)", epoch, rec["mean_loss"],
                 rec["mean_grad_norm"], rec["coefficients"], rec["seconds"])

    train(cfg, ds, checkpoint_path=args.out, progress=progress)
    log.info("checkpoint written to %s", args.out)
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _config(args)
    ds = load_dataset(args.dataset or cfg["run"]["eval_dataset"] or cfg["run"]["dataset"] or _missing("--dataset"))
    report = evaluate(cfg, checkpoint=args.checkpoint, dataset=ds, out_dir=args.out)
    r = report["metrics"]["recall"]
    log.info("R@1m lateral %.2f longitudinal %.2f, R@1deg %.2f", r["lateral"]["1"], r["longitudinal"]["1"],
             r["orientation"]["1"])
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _config(args)
    settings, variants = load_plan(args.plan)
    if settings.get("base") and not args.config:
        cfg = RunConfig.load(settings["base"])
    tr = load_dataset(args.dataset) if args.dataset else None
    ev = load_dataset(args.eval_dataset) if args.eval_dataset else None
    ablate(settings, variants, cfg, tr, ev, args.out, log=log.info)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    res = gradcheck(args.instances, args.seed, args.suite, args.inject_fault)
    text = json.dumps(res, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    for name, suite in res["suites"].items():
        log.info("%s: %s (max relative error %.3g)", name, "ok" if suite["passed"] else "FAILED", suite["max_rel_err"])
    if not res["passed"]:
        print("gradcheck failed: " + ", ".join(res["failing_checks"]), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def _cmd_report(args) -> int:
    for path in make_report(args.eval_dir, args.out, args.table):
        log.info("wrote %s", path)
    return EXIT_OK


def _missing(flag: str):
    raise UsageError(f"{flag} is required")


COMMANDS = {
    "generate": _cmd_generate, "train": _cmd_train, "eval": _cmd_eval,
    "ablate": _cmd_ablate, "gradcheck": _cmd_gradcheck, "report": _cmd_report,
}
VALIDATION_ERRORS = (UsageError, ConfigError, PlanError, DatasetFormatError, CheckpointError,
                     IncompatibleCheckpointError, FileNotFoundError, SceneGenerationError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
