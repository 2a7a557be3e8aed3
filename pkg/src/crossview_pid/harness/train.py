"""Seeded end-to-end training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..checkpoint import save_checkpoint
from ..pid import CandidateSpec
from ..refine import ModelConfig, RefinementNetwork
from ..scenegen import Dataset, load_dataset
from ..tensorlib import Adam, NonFiniteError, l1_pose_loss
from .config import RunConfig, parse_axes


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss, mismatched inputs)."""

    def __init__(self, message: str, scene_index: int | None = None):
        super().__init__(message)
        self.scene_index = scene_index


def noise_radii(config: RunConfig, dataset: Dataset | None = None) -> tuple[float, float, float]:
    """Noise radii (m, m, rad): from the config when set, else from the dataset."""
    n = config["noise"]
    if n["x_m"] or n["y_m"] or n["theta_deg"]:
        return (n["x_m"], n["y_m"], math.radians(n["theta_deg"]))
    if dataset is None:
        raise TrainingError("noise radii are not configured and no dataset was given")
    return tuple(float(r) for r in dataset.noise_radii)


def model_config(config: RunConfig, dataset: Dataset) -> ModelConfig:
    """Resolve the architecture for ``dataset`` from the run config."""
    m = config["model"]
    radii = noise_radii(config, dataset)
    c = config["candidates"]
    cand = CandidateSpec.from_noise(radii, c["per_direction"], c["fraction_of_range"], c["mode"])
    if m["output_scale"]:
        sx, sy, sdeg = m["output_scale"]
        scale = (sx, sy, math.radians(sdeg))
    else:
        # corrections of the order of the initial error keep the head output O(1)
        scale = tuple(0.5 * r if r > 0 else 1.0 for r in radii)
    co = config["coefficients"]
    return ModelConfig(
        n_points=dataset.spec.n_points,
        raw_channels=dataset.spec.channels,
        channels=m["channels"],
        encoder_hidden=m["encoder_hidden"],
        branches=m["branches"],
        d_mode=config["d_branch"]["mode"],
        d_axes=parse_axes(config["d_branch"]["axes"]),
        d_stop_gradient=config["d_branch"]["stop_gradient"],
        candidates=cand,
        levels=m["levels"],
        iterations=m["iterations"],
        embed_dim=m["embed_dim"],
        reduced_points=m["reduced_points"],
        phi_hidden=m["phi_hidden"],
        psi_hidden=m["psi_hidden"],
        head=m["head"],
        output_scale=scale,
        output_decay=m["output_decay"],
        detach_pose=m["detach_pose"],
        coefficients=(co["k_p"], co["k_i"], co["k_d"]),
        seed=config["run"]["seed"],
    )


@dataclass
class TrainResult:
    model: RefinementNetwork
    optimizer: Adam
    log: list = field(default_factory=list)
    seconds: float = 0.0


def _check_compatible(model: RefinementNetwork, dataset: Dataset) -> None:
    cfg = model.config
    if dataset.spec.n_points != cfg.n_points or dataset.spec.channels != cfg.raw_channels:
        raise TrainingError(
            f"dataset has {dataset.spec.n_points} points x {dataset.spec.channels} channels, "
            f"model expects {cfg.n_points} x {cfg.raw_channels}"
        )
    need = 2 ** (cfg.levels - 1)
    if dataset.spec.map_size % need:
        raise TrainingError(f"map size {dataset.spec.map_size} is not divisible by {need} for {cfg.levels} levels")


def _locate_nonfinite(model, dataset, indices, iters, every, angle_weight) -> int:
    for i in indices:
        b = dataset.batch([int(i)], model.config.levels)
        try:
            res = model.forward(b, supervise_every_iter=every, iterations=iters, record=False)
            loss = l1_pose_loss(res.estimates, b.gt, angle_weight)
            if not np.isfinite(loss.data).all():
                return int(i)
        except NonFiniteError:
            return int(i)
    return int(indices[0])


def train(config: RunConfig, dataset: Dataset | None = None, model: RefinementNetwork | None = None,
          checkpoint_path=None, progress=None) -> TrainResult:
    """Train on ``dataset`` (or ``[run] dataset``); optionally write a checkpoint.

    ``progress(epoch, record)`` is called after every epoch.
    """
    if dataset is None:
        if not config["run"]["dataset"]:
            raise TrainingError("no training dataset configured")
        dataset = load_dataset(config["run"]["dataset"])
    if len(dataset) == 0:
        raise TrainingError("training dataset is empty")
    if model is None:
        model = RefinementNetwork(model_config(config, dataset))
    _check_compatible(model, dataset)
    t_cfg = config["train"]
    co = config["coefficients"]
    coef_ids = {id(p) for p in model.coefficients.parameters()}
    params = [p for p in model.parameters() if co["learnable"] or id(p) not in coef_ids]
    lrs = [co["learning_rate"] if id(p) in coef_ids else t_cfg["learning_rate"] for p in params]
    opt = Adam(params, lr=t_cfg["learning_rate"], max_norm=t_cfg["clip_norm"], lrs=lrs)
    iters = t_cfg["iterations"] or None
    every = config["loss"]["supervise_every_iter"]
    angle_weight = config["loss"]["angle_weight"]
    rng = np.random.default_rng([config["run"]["seed"], 2])
    bs = t_cfg["batch_size"]
    result = TrainResult(model, opt)
    t0 = time.perf_counter()
    for epoch in range(1, t_cfg["epochs"] + 1):
        order = rng.permutation(len(dataset))
        losses, norms = [], []
        te = time.perf_counter()
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            batch = dataset.batch(idx, model.config.levels)
            try:
                res = model.forward(batch, supervise_every_iter=every, iterations=iters, record=False)
                loss = l1_pose_loss(res.estimates, batch.gt, angle_weight)
                if not np.isfinite(loss.data).all():
                    raise NonFiniteError("loss")
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NonFiniteError as exc:
                bad = _locate_nonfinite(model, dataset, idx, iters, every, angle_weight)
                raise TrainingError(f"epoch {epoch}: non-finite value ({exc.op}) at scene {bad}", bad) from None
            losses.append(float(loss.data))
            norms.append(opt.last_grad_norm)
        record = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)),
            "mean_grad_norm": float(np.mean(norms)),
            "coefficients": model.coefficients.values(),
            "seconds": time.perf_counter() - te,
        }
        result.log.append(record)
        if progress is not None:
            progress(epoch, record)
    result.seconds = time.perf_counter() - t0
    if checkpoint_path is not None:
        log = [{k: v for k, v in r.items() if k != "seconds"} for r in result.log]
        save_checkpoint(checkpoint_path, model, opt,
                        {"config_hash": config.hash(), "epochs": t_cfg["epochs"], "log": log})
    return result
