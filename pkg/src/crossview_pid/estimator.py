"""scikit-learn style wrapper: ``fit(dataset)`` / ``predict(dataset)``.

Inputs are :class:`~crossview_pid.scenegen.Dataset` objects rather than 2-D
feature matrices, so the estimator plugs into ``get_params`` / ``set_params``
/ ``clone`` but not into sklearn's array-based model selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import load_checkpoint, save_checkpoint
from .harness.config import RunConfig
from .harness.evaluate import predict_dataset
from .harness.metrics import compute_metrics
from .harness.train import train
from .pid import BRANCH_CONFIGS, D_MODES
from .spe import HEADS
from .validation import check_choice, check_dataset, check_int, check_pose_array, check_positive


class PidPoseRefiner(BaseEstimator):
    """Train and apply the cross-view refinement network."""

    def __init__(self, branches: str = "PID", levels: int = 3, iterations: int = 5, train_iterations: int = 0,
                 epochs: int = 10, batch_size: int = 4, learning_rate: float = 1e-4,
                 coefficient_learning_rate: float = 1e-4, learn_coefficients: bool = True,
                 candidates_per_direction: int = 2, d_mode: str = "norm", d_axes: str = "x,y,theta",
                 d_stop_gradient: bool = True, head: str = "spe", channels: int = 8, detach_pose: bool = True,
                 supervise_every_iter: bool = False, chunk_size: int = 16, random_state: int = 0):
        self.branches = branches
        self.levels = levels
        self.iterations = iterations
        self.train_iterations = train_iterations
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.coefficient_learning_rate = coefficient_learning_rate
        self.learn_coefficients = learn_coefficients
        self.candidates_per_direction = candidates_per_direction
        self.d_mode = d_mode
        self.d_axes = d_axes
        self.d_stop_gradient = d_stop_gradient
        self.head = head
        self.channels = channels
        self.detach_pose = detach_pose
        self.supervise_every_iter = supervise_every_iter
        self.chunk_size = chunk_size
        self.random_state = random_state

    def _validate_params(self) -> None:
        check_choice(self.branches, BRANCH_CONFIGS, "branches")
        check_choice(self.d_mode, D_MODES, "d_mode")
        check_choice(self.head, HEADS, "head")
        for name in ("levels", "iterations", "batch_size", "channels", "chunk_size"):
            check_int(getattr(self, name), name, 1)
        for name in ("epochs", "train_iterations", "candidates_per_direction", "random_state"):
            check_int(getattr(self, name), name, 0)
        check_positive(self.learning_rate, "learning_rate")
        check_positive(self.coefficient_learning_rate, "coefficient_learning_rate")

    def to_run_config(self) -> RunConfig:
        self._validate_params()
        return RunConfig({
            "run.seed": self.random_state,
            "model.branches": self.branches,
            "model.levels": self.levels,
            "model.iterations": self.iterations,
            "model.head": self.head,
            "model.channels": self.channels,
            "model.detach_pose": self.detach_pose,
            "candidates.per_direction": self.candidates_per_direction,
            "d_branch.mode": self.d_mode,
            "d_branch.axes": self.d_axes,
            "d_branch.stop_gradient": self.d_stop_gradient,
            "coefficients.learnable": self.learn_coefficients,
            "coefficients.learning_rate": self.coefficient_learning_rate,
            "train.epochs": self.epochs,
            "train.batch_size": self.batch_size,
            "train.learning_rate": self.learning_rate,
            "train.iterations": self.train_iterations,
            "loss.supervise_every_iter": self.supervise_every_iter,
            "eval.chunk_size": self.chunk_size,
        })

    def fit(self, X, y=None):
        """Train on dataset ``X``; ground truth comes from the dataset itself."""
        X = check_dataset(X)
        if y is not None:
            y = check_pose_array(y, "y")
            if y.shape[0] != len(X):
                raise ValueError(f"y has {y.shape[0]} rows for {len(X)} scenes")
            if not np.array_equal(y.astype(np.float32), X.poses[:, 0]):
                raise ValueError("y disagrees with the dataset's ground-truth poses")
        self.config_ = self.to_run_config()
        result = train(self.config_, X)
        self.model_ = result.model
        self.train_log_ = result.log
        self.coefficients_ = self.model_.coefficients.values()
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("PidPoseRefiner is not fitted yet; call fit or load first")

    def predict(self, X, iterations: int | None = None) -> np.ndarray:
        """Refined poses ``(n, 3)`` (x m, y m, theta rad) in each scene's map frame."""
        self._check_fitted()
        X = check_dataset(X, allow_empty=True)
        if len(X) == 0:
            return np.zeros((0, 3))
        return predict_dataset(self.model_, X, iterations or self.iterations, self.chunk_size)

    def score(self, X, y=None) -> float:
        """Mean of lateral and longitudinal recall@1 m, as a fraction in [0, 1]."""
        est = self.predict(X)
        gt = X.poses[:, 0] if y is None else check_pose_array(y, "y")
        rec = compute_metrics(est, gt)["recall"]
        return (rec["lateral"]["1"] + rec["longitudinal"]["1"]) / 200.0

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(path, self.model_, meta={"estimator_params": self.get_params()})

    @classmethod
    def load(cls, path) -> PidPoseRefiner:
        model, header = load_checkpoint(path)
        params = header.get("meta", {}).get("estimator_params", {})
        est = cls(**params)
        est.model_ = model
        est.coefficients_ = model.coefficients.values()
        return est
