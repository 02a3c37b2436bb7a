"""Training loop, evaluation, checkpointing, metrics logging and ablations."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from dataclasses import field as dc_field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .constraints import (
    ConstraintWeights,
    LossBreakdown,
    Schedule,
    cross_view_loss,
    depth_ranking_loss,
    find_correspondences,
    rgb_loss,
    sample_pairs,
    smoothness_loss,
    sparsity_loss,
    total_loss,
)
from .data import SceneDataset
from .field import EncodingConfig, FieldConfig, RadianceField, read_tensors, write_tensors
from .render import EMPTY_ACC, Rays, generate_rays, render_image, render_rays, sample_along_ray

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
METRICS_HEADER = ["step", "alpha", "lr", "loss_rgb", "loss_depth", "loss_cv", "loss_sparse", "loss_reg",
                  "total", "psnr_train", "psnr_test"]
ABLATION_ROWS = [
    ("RGB only", ()),
    ("+ Depth ranking", ("depth",)),
    ("+ Cross-view consistency", ("depth", "cv")),
    ("+ Sparsity", ("depth", "cv", "sparse")),
    ("+ All constraints", ("depth", "cv", "sparse", "reg")),
]


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 150_000
    rays_per_batch: int = 1024
    patch_size: int = 4
    n_samples: int = 64
    stratified: bool = True
    lr0: float = 5e-4
    gamma: float = 0.998
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    log_every: int = 100
    eval_every: int = 500
    eval_downscale: int = 4
    checkpoint_every: int = 0
    n_depth_pairs: int = 512
    depth_margin: float = 1e-3
    prior_tie_eps: float = 1e-6
    n_cv_rays: int = 64
    cv_color_weight: float = 1.0
    cv_density_weight: float = 1.0
    occlusion_tol: float = 0.05
    n_sparsity_points: int = 1024
    weights: ConstraintWeights = dc_field(default_factory=ConstraintWeights)
    schedule: Schedule = dc_field(default_factory=Schedule)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    encoding: EncodingConfig = dc_field(default_factory=EncodingConfig)

    def __post_init__(self):
        if self.rays_per_batch % (self.patch_size ** 2):
            raise ValueError(f"rays_per_batch ({self.rays_per_batch}) must be divisible by "
                             f"patch_size^2 ({self.patch_size ** 2})")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be 'float32' or 'float64', got {self.precision!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        nested = {"weights": ConstraintWeights, "schedule": Schedule, "field": FieldConfig,
                  "encoding": EncodingConfig}
        for key, sub in nested.items():
            if isinstance(data.get(key), dict):
                data[key] = sub(**data[key])
        return cls(**data)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; capped at 99 dB."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def block_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return np.asarray(image, dtype=np.float64)
    h, w = image.shape[0] // factor, image.shape[1] // factor
    img = np.asarray(image[:h * factor, :w * factor], dtype=np.float64)
    return img.reshape(h, factor, w, factor, -1).mean(axis=(1, 3))


def evaluate(model: RadianceField, dataset: SceneDataset, split: str = "test", n_samples: int = 64,
             downscale: int = 1, chunk: int = 1024) -> dict:
    """Per-view and mean PSNR for one split."""
    frames = dataset.split(split)
    if not frames:
        raise ValueError(f"cannot evaluate: split {split!r} is empty")
    scores = []
    for frame in frames:
        cam = frame.camera.scaled(downscale) if downscale > 1 else frame.camera
        image, _, _ = render_image(model, cam, n_samples, dataset.background, chunk=chunk)
        scores.append(psnr(image, block_downsample(frame.image, downscale)))
    return {"split": split, "psnr": scores, "mean": float(np.mean(scores))}


def gap_report(model: RadianceField, dataset: SceneDataset, n_samples: int = 64, downscale: int = 1) -> dict:
    train = evaluate(model, dataset, "train", n_samples, downscale)
    test = evaluate(model, dataset, "test", n_samples, downscale)
    return {"train": train["mean"], "test": test["mean"], "gap": train["mean"] - test["mean"],
            "train_views": train["psnr"], "test_views": test["psnr"]}


# metrics CSV

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


class MetricsLog:
    """Append-only CSV with the fixed metrics header."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(record.get(k)) for k in METRICS_HEADER])

    def truncate_after(self, step: int) -> None:
        """Drop rows past ``step`` (used when resuming from an older checkpoint)."""
        if self.path is None or not self.path.exists():
            return
        rows = [r for r in read_metrics(self.path) if r["step"] <= step]
        with self.path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            for r in rows:
                writer.writerow([_fmt(r.get(k)) for k in METRICS_HEADER])


def read_metrics(path) -> list[dict]:
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        for row in reader:
            rec = {}
            for k in METRICS_HEADER:
                v = row[k]
                rec[k] = None if v == "" else (int(v) if k == "step" else float(v))
            out.append(rec)
    return out


# training state

@dataclass
class TrainState:
    step: int
    model: RadianceField
    adam: dm.AdamState
    rng: np.random.Generator  # ray batches and stratification
    aux_rng: np.random.Generator  # constraint sampling, kept apart so ablations share batches
    best_test_psnr: float | None = None
    best_step: int | None = None
    best_params: dict | None = None


@dataclass
class Batch:
    rays: Rays
    colors: np.ndarray  # (R, 3)
    views: np.ndarray  # (R,) training-frame index per ray
    prior: np.ndarray  # (R,) prior depth, NaN where unavailable


class Trainer:
    """Owns one training run: model, optimizer state, rng and metrics."""

    def __init__(self, dataset: SceneDataset, config: TrainConfig, out_dir=None, metrics_path=None):
        if len(dataset.train) < 2:
            raise ValueError("training needs at least two training views")
        self.dataset = dataset
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        model = RadianceField(config.field, config.encoding, seed=config.seed, dtype=config.dtype)
        self.state = TrainState(step=0, model=model, adam=dm.AdamState(model.parameters()),
                                rng=np.random.default_rng(config.seed),
                                aux_rng=np.random.default_rng([config.seed, 1]))
        if metrics_path is None and self.out_dir is not None:
            metrics_path = self.out_dir / "metrics.csv"
        self.metrics = MetricsLog(metrics_path)
        self.last_breakdown: LossBreakdown | None = None

    @property
    def model(self) -> RadianceField:
        return self.state.model

    def lr_at(self, step: int) -> float:
        return dm.exponential_lr(self.config.lr0, self.config.gamma, step)

    # batch construction

    def sample_batch(self, rng: np.random.Generator) -> Batch:
        cfg = self.config
        s = cfg.patch_size
        h, w = self.dataset.image_shape
        n_patches = cfg.rays_per_batch // (s * s)
        rays, colors, views, priors = [], [], [], []
        rows, cols = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        rows, cols = rows.ravel(), cols.ravel()
        for _ in range(n_patches):
            v = int(rng.integers(len(self.dataset.train)))
            y0 = int(rng.integers(0, h - s + 1))
            x0 = int(rng.integers(0, w - s + 1))
            frame = self.dataset.train[v]
            r, c = rows + y0, cols + x0
            rays.append(generate_rays(frame.camera, np.stack([c, r], axis=1)))
            colors.append(frame.image[r, c])
            views.append(np.full(s * s, v))
            if frame.depth_prior is not None:
                priors.append(frame.depth_prior[r, c].astype(np.float64))
            else:
                priors.append(np.full(s * s, np.nan))
        return Batch(Rays.cat(rays), np.concatenate(colors), np.concatenate(views), np.concatenate(priors))

    # loss assembly

    def _cross_view_term(self, out, batch: Batch, rng: np.random.Generator):
        cfg, model = self.config, self.model
        view_b = int(rng.integers(len(self.dataset.train)))
        cand = np.flatnonzero((batch.views != view_b) & (out.acc.values >= EMPTY_ACC))
        if len(cand) > cfg.n_cv_rays:
            cand = np.sort(rng.choice(cand, size=cfg.n_cv_rays, replace=False))
        camera_b = self.dataset.train[view_b].camera
        probe = {}

        def depth_fn(rays_b):
            # occlusion probe only; the kept rays are re-rendered on the tape below
            probe["samples"] = sample_along_ray(rays_b, cfg.n_samples, cfg.stratified, rng)
            with dm.no_grad():
                return render_rays(model, rays_b, cfg.n_samples, background=self.dataset.background,
                                   samples=probe["samples"]).depth.values

        sub = batch.rays.subset(cand)
        corr = find_correspondences(sub, out.depth.values[cand], camera_b, depth_fn, cfg.occlusion_tol)
        dm.note_branch(cand)
        dm.note_branch(corr.index_a)
        if len(corr) == 0:
            return cross_view_loss(dm.tensor(np.zeros((0, 3), dtype=model.dtype)),
                                   dm.tensor(np.zeros((0, 3), dtype=model.dtype)))
        k = len(corr)
        rows_a = cand[corr.index_a]
        # view-B rays aim at the lifted point, so they move with the view-A depth
        pts_a = _lift(batch.rays.subset(rows_a), dm.take(out.depth, rows_a), model.dtype)
        to_point = pts_a - dm.tensor(np.broadcast_to(camera_b.origin, (k, 3)).astype(model.dtype))
        length = dm.sqrt(dm.sum(dm.square(to_point), axis=1))
        dirs_b = to_point / dm.broadcast_to(dm.reshape(length, (k, 1)), (k, 3))
        t_b, deltas_b = (a[corr.index_b] for a in probe["samples"])
        out_b = render_rays(model, corr.rays_b, cfg.n_samples, background=self.dataset.background,
                            samples=(t_b, deltas_b), directions=dirs_b)
        color_a = dm.take(out.color, rows_a)
        sigma_a = sigma_b = None
        if cfg.cv_density_weight > 0:
            pts_b = _lift_tensor(corr.rays_b.origins, dirs_b, out_b.depth, model.dtype)
            sigma = model.density(dm.concat([pts_a, pts_b], axis=0)).sigma
            sigma_a, sigma_b = sigma[:k], sigma[k:]
        return cross_view_loss(color_a, out_b.color, sigma_a, sigma_b, cfg.cv_color_weight, cfg.cv_density_weight)

    def compute_losses(self, step: int, batch: Batch, rng: np.random.Generator, aux_rng: np.random.Generator):
        """Forward pass for one step; returns (total, breakdown, render output)."""
        cfg, model, weights = self.config, self.model, self.config.weights
        out = render_rays(model, batch.rays, cfg.n_samples, cfg.stratified, rng, self.dataset.background)
        rng = aux_rng
        l_rgb = rgb_loss(out.color, batch.colors)
        terms = {}
        if weights.depth > 0:
            valid = np.isfinite(batch.prior) & (out.acc.values >= EMPTY_ACC)
            dm.note_branch(valid)
            pairs = sample_pairs(batch.views, batch.prior, valid, cfg.n_depth_pairs, rng,
                                 cfg.depth_margin, cfg.prior_tie_eps)
            terms["depth"] = depth_ranking_loss(pairs, out.depth)
        if weights.cv > 0:
            terms["cv"] = self._cross_view_term(out, batch, rng)
        if weights.sparse > 0:
            terms["sparse"] = sparsity_loss(model, self.dataset.bounds, cfg.n_sparsity_points, rng)
        if weights.reg > 0:
            terms["reg"] = smoothness_loss(out.depth, out.color, cfg.patch_size)
        total, breakdown = total_loss(step, l_rgb, terms, weights, cfg.schedule)
        return total, breakdown, out

    def peek_losses(self) -> LossBreakdown:
        """Loss breakdown the next step would log, without changing any state."""
        rng = copy.deepcopy(self.state.rng)
        aux_rng = copy.deepcopy(self.state.aux_rng)
        with dm.no_grad():
            batch = self.sample_batch(rng)
            _, breakdown, _ = self.compute_losses(self.state.step, batch, rng, aux_rng)
        return breakdown

    def train_step(self) -> LossBreakdown:
        st, cfg = self.state, self.config
        step = st.step
        with dm.Tape() as tape:
            batch = self.sample_batch(st.rng)
            total, breakdown, _ = self.compute_losses(step, batch, st.rng, st.aux_rng)
        if not math.isfinite(breakdown.total):
            self._dump_divergence(breakdown)
            raise TrainingDiverged(f"non-finite total loss at step {step}: rgb={breakdown.rgb}, "
                                   f"terms={breakdown.weighted}, alpha={breakdown.alpha}")
        self.model.zero_grad()
        tape.backward(total)
        dm.adam_step(self.model.parameters(), st.adam, self.lr_at(step), cfg.beta1, cfg.beta2, cfg.adam_eps)
        st.step += 1
        self.last_breakdown = breakdown
        return breakdown

    def _dump_divergence(self, breakdown: LossBreakdown) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "divergence.json").write_text(json.dumps(asdict(breakdown), indent=2))

    # logging / evaluation

    def dynamics_log(self, breakdown: LossBreakdown, psnr_test: float | None = None) -> dict:
        record = {
            "step": breakdown.step,
            "alpha": breakdown.alpha,
            "lr": self.lr_at(breakdown.step),
            "loss_rgb": breakdown.rgb,
            **{f"loss_{k}": v for k, v in breakdown.weighted.items()},
            "total": breakdown.total,
            "psnr_train": min(PSNR_CAP, -10.0 * math.log10(breakdown.rgb)) if breakdown.rgb > 0 else PSNR_CAP,
            "psnr_test": psnr_test,
        }
        self.metrics.append(record)
        return record

    def quick_test_psnr(self) -> float:
        cfg = self.config
        return evaluate(self.model, self.dataset, "test" if self.dataset.test else "train",
                        cfg.n_samples, cfg.eval_downscale)["mean"]

    def run(self, until: int | None = None, progress: bool = False) -> TrainState:
        """Train up to step ``until`` (default: config.iterations)."""
        cfg, st = self.config, self.state
        until = cfg.iterations if until is None else until
        t0 = time.time()
        while st.step < until:
            breakdown = self.train_step()
            t = breakdown.step
            last = st.step == cfg.iterations  # not until: a resumed run must log what a full run logs
            do_eval = cfg.eval_every > 0 and (t % cfg.eval_every == 0 or last)
            if (cfg.log_every > 0 and t % cfg.log_every == 0) or do_eval or last:
                test_psnr = self.quick_test_psnr() if do_eval else None
                if test_psnr is not None and (st.best_test_psnr is None or test_psnr > st.best_test_psnr):
                    st.best_test_psnr, st.best_step = test_psnr, st.step
                    st.best_params = self.model.state_dict()
                rec = self.dynamics_log(breakdown, test_psnr)
                if progress:
                    logger.info("step %d  rgb %.5f  psnr_train %.2f  psnr_test %s  (%.1fs)", t, rec["loss_rgb"],
                                rec["psnr_train"], "-" if test_psnr is None else f"{test_psnr:.2f}",
                                time.time() - t0)
            if cfg.checkpoint_every > 0 and self.out_dir is not None and st.step % cfg.checkpoint_every == 0:
                self.save(self.out_dir / f"step_{st.step:06d}.ckpt")
        return st

    # checkpoints

    def save(self, path) -> Path:
        """Write ``path`` (field), ``path.optim`` (Adam moments) and ``path.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        st = self.state
        write_tensors(path, self.model.state_dict())
        names = list(self.model.params)
        moments = {f"m.{n}": m for n, m in zip(names, st.adam.m)}
        moments.update({f"v.{n}": v for n, v in zip(names, st.adam.v)})
        write_tensors(Path(str(path) + ".optim"), moments)
        if st.best_params is not None:
            write_tensors(Path(str(path) + ".best"), st.best_params)
        sidecar = {
            "format": "PNRF1",
            "step": st.step,
            "config_hash": self.config.hash(),
            "config": self.config.to_dict(),
            "rng_state": st.rng.bit_generator.state,
            "aux_rng_state": st.aux_rng.bit_generator.state,
            "adam": {"t": st.adam.t, "skipped": st.adam.skipped},
            "best_test_psnr": st.best_test_psnr,
            "best_step": st.best_step,
            "dataset": self.dataset.source,
        }
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))
        return path

    def load(self, path) -> "Trainer":
        path = Path(path)
        self.model.load_state_dict(read_tensors(path))
        sidecar = json.loads(Path(str(path) + ".json").read_text())
        st = self.state
        moments = read_tensors(Path(str(path) + ".optim"))
        for i, name in enumerate(self.model.params):
            shape = st.adam.m[i].shape
            st.adam.m[i] = moments[f"m.{name}"].reshape(shape).astype(self.model.dtype)
            st.adam.v[i] = moments[f"v.{name}"].reshape(shape).astype(self.model.dtype)
        st.adam.t = int(sidecar["adam"]["t"])
        st.adam.skipped = int(sidecar["adam"]["skipped"])
        st.step = int(sidecar["step"])
        st.rng = np.random.default_rng()
        st.rng.bit_generator.state = sidecar["rng_state"]
        st.aux_rng = np.random.default_rng()
        st.aux_rng.bit_generator.state = sidecar["aux_rng_state"]
        st.best_test_psnr = sidecar.get("best_test_psnr")
        st.best_step = sidecar.get("best_step")
        best = Path(str(path) + ".best")
        st.best_params = read_tensors(best) if best.exists() else None
        self.metrics.truncate_after(st.step - 1)
        return self


def _lift(rays: Rays, depth: dm.ParamTensor, dtype) -> dm.ParamTensor:
    """origin + depth * direction with depth on the tape."""
    return _lift_tensor(rays.origins, dm.tensor(rays.directions.astype(dtype)), depth, dtype)


def _lift_tensor(origins: np.ndarray, directions: dm.ParamTensor, depth: dm.ParamTensor, dtype) -> dm.ParamTensor:
    k = len(origins)
    d3 = dm.broadcast_to(dm.reshape(depth, (k, 1)), (k, 3))
    return dm.tensor(origins.astype(dtype)) + d3 * directions


def train(dataset: SceneDataset, config: TrainConfig, out_dir=None, resume=None,
          progress: bool = False) -> Trainer:
    """Run (or resume) a training job; writes final.ckpt, metrics.csv and report.json when
    ``out_dir`` is given."""
    trainer = Trainer(dataset, config, out_dir)
    if resume is not None:
        trainer.load(resume)
    trainer.run(progress=progress)
    if trainer.out_dir is not None:
        trainer.save(trainer.out_dir / "final.ckpt")
    return trainer


def weights_for(row_terms, base: ConstraintWeights) -> ConstraintWeights:
    return ConstraintWeights(**{k: (v if k in row_terms else 0.0) for k, v in base.as_dict().items()})


def ablation_suite(dataset: SceneDataset, base: TrainConfig, out_dir=None, progress: bool = False,
                   eval_samples: int | None = None) -> list[dict]:
    """Train the five cumulative constraint configurations and report
    train / test / gap PSNR for each."""
    rows = []
    for label, terms in ABLATION_ROWS:
        cfg = copy.deepcopy(base)
        cfg.weights = weights_for(terms, base.weights)
        run_dir = None
        if out_dir is not None:
            run_dir = Path(out_dir) / label.replace("+ ", "plus_").replace(" ", "_").lower()
        t0 = time.time()
        trainer = train(dataset, cfg, run_dir, progress=progress)
        seconds = time.time() - t0
        report = gap_report(trainer.model, dataset, eval_samples or cfg.n_samples)
        rows.append({
            "configuration": label,
            "train": report["train"],
            "test": report["test"],
            "gap": report["gap"],
            **{f"lambda_{k}": v for k, v in cfg.weights.as_dict().items()},
            "iterations": cfg.iterations,
            "seconds": seconds,
        })
    return rows
