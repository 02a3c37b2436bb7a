"""scikit-learn style wrapper around the trainer.

``fit`` takes a :class:`SceneDataset` (or a dataset directory), ``predict``
renders cameras, ``score`` returns mean PSNR on a split.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .constraints import ConstraintWeights, Schedule
from .data import SceneDataset, load_depth_priors, load_nerf_synthetic
from .field import EncodingConfig, FieldConfig
from .render import Camera, render_image
from .train import TrainConfig, Trainer, evaluate


def check_dataset(X) -> SceneDataset:
    """Accept a SceneDataset or a path to a NeRF-synthetic style directory."""
    if isinstance(X, SceneDataset):
        dataset = X
    elif isinstance(X, (str, Path)):
        dataset = load_nerf_synthetic(X)
        priors = Path(X) / "depth_train"
        if priors.is_dir():
            load_depth_priors(priors, dataset)
    else:
        raise TypeError(f"expected SceneDataset or dataset directory, got {type(X).__name__}")
    if len(dataset.train) < 2:
        raise ValueError("dataset needs at least two training views")
    return dataset


def check_cameras(cameras) -> list[Camera]:
    if isinstance(cameras, Camera):
        return [cameras]
    cams = list(cameras)
    if not cams or not all(isinstance(c, Camera) for c in cams):
        raise TypeError("expected a Camera or a non-empty sequence of Camera objects")
    return cams


class PhysicsNeRF(BaseEstimator):
    """Sparse-view radiance field with scheduled physics-guided regularizers."""

    def __init__(
        self,
        iterations: int = 5000,
        rays_per_batch: int = 64,
        patch_size: int = 4,
        n_samples: int = 32,
        lr0: float = 5e-4,
        gamma: float = 0.998,
        lambda_depth: float = 0.1,
        lambda_cv: float = 0.05,
        lambda_sparse: float = 0.01,
        lambda_reg: float = 0.01,
        schedule_thresholds=(5000, 15000),
        schedule_values=(0.008, 0.025, 0.08),
        hidden_width: int = 192,
        depth: int = 7,
        precision: str = "float32",
        eval_every: int = 0,
        log_every: int = 100,
        seed: int = 0,
    ):
        self.iterations = iterations
        self.rays_per_batch = rays_per_batch
        self.patch_size = patch_size
        self.n_samples = n_samples
        self.lr0 = lr0
        self.gamma = gamma
        self.lambda_depth = lambda_depth
        self.lambda_cv = lambda_cv
        self.lambda_sparse = lambda_sparse
        self.lambda_reg = lambda_reg
        self.schedule_thresholds = schedule_thresholds
        self.schedule_values = schedule_values
        self.hidden_width = hidden_width
        self.depth = depth
        self.precision = precision
        self.eval_every = eval_every
        self.log_every = log_every
        self.seed = seed

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            rays_per_batch=self.rays_per_batch,
            patch_size=self.patch_size,
            n_samples=self.n_samples,
            lr0=self.lr0,
            gamma=self.gamma,
            seed=self.seed,
            precision=self.precision,
            eval_every=self.eval_every,
            log_every=self.log_every,
            weights=ConstraintWeights(self.lambda_depth, self.lambda_cv, self.lambda_sparse, self.lambda_reg),
            schedule=Schedule(list(self.schedule_thresholds), list(self.schedule_values)),
            field=FieldConfig(hidden_width=self.hidden_width, depth=self.depth),
            encoding=EncodingConfig(),
        )

    def fit(self, X, y=None):
        dataset = check_dataset(X)
        trainer = Trainer(dataset, self.to_train_config())
        trainer.run()
        self.trainer_ = trainer
        self.field_ = trainer.model
        self.background_ = dataset.background
        self.n_parameters_ = trainer.model.num_parameters()
        self.metrics_ = list(trainer.metrics.records)
        return self

    def predict(self, cameras) -> np.ndarray:
        """Render each camera; returns (n, H, W, 3) images."""
        check_is_fitted(self, "field_")
        images = [render_image(self.field_, cam, self.n_samples, self.background_)[0]
                  for cam in check_cameras(cameras)]
        return np.stack(images)

    def predict_depth(self, cameras) -> np.ndarray:
        check_is_fitted(self, "field_")
        return np.stack([render_image(self.field_, cam, self.n_samples, self.background_)[1]
                         for cam in check_cameras(cameras)])

    def score(self, X, y=None, split: str = "test") -> float:
        """Mean PSNR (dB) on ``split``."""
        check_is_fitted(self, "field_")
        dataset = check_dataset(X)
        return evaluate(self.field_, dataset, split, self.n_samples)["mean"]
