"""Reconstruction loss, the four physics-guided regularizers and their
scheduled combination."""

from __future__ import annotations

import bisect
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import ParamTensor
from .render import EMPTY_ACC, Camera, Rays, generate_rays, project

logger = logging.getLogger(__name__)

# how often a loss fell back to zero for lack of input (pairs, patches, ...)
WARNINGS: Counter = Counter()

TERMS = ("depth", "cv", "sparse", "reg")


def _warn(key: str, msg: str) -> None:
    # first occurrence is logged, the rest only counted
    WARNINGS[key] += 1
    if WARNINGS[key] == 1:
        logger.warning("%s (further occurrences are counted in constraints.WARNINGS)", msg)
    else:
        logger.debug(msg)


@dataclass
class ConstraintWeights:
    depth: float = 0.1
    cv: float = 0.05
    sparse: float = 0.01
    reg: float = 0.01

    def __post_init__(self):
        for name in TERMS:
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"constraint weight {name!r} must be finite and >= 0, got {value}")

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in TERMS}

    def active(self) -> list[str]:
        return [name for name in TERMS if getattr(self, name) > 0]


@dataclass
class Schedule:
    """Piecewise-constant multiplier on the auxiliary terms."""

    thresholds: list[int] = field(default_factory=lambda: [5000, 15000])
    values: list[float] = field(default_factory=lambda: [0.008, 0.025, 0.08])

    def __post_init__(self):
        if len(self.values) != len(self.thresholds) + 1:
            raise ValueError("schedule needs exactly one more value than thresholds")
        if list(self.thresholds) != sorted(self.thresholds):
            raise ValueError("schedule thresholds must be increasing")

    def alpha(self, step: int) -> float:
        return self.values[bisect.bisect_right(self.thresholds, step)]


def rgb_loss(pred, target) -> ParamTensor:
    """Mean squared error over every channel."""
    pred = pred if isinstance(pred, ParamTensor) else dm.tensor(np.asarray(pred, dtype=np.float64))
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise dm.ShapeError(f"rgb_loss: prediction {pred.shape} and target {target.shape} differ")
    return dm.mean(dm.square(pred - dm.tensor(target)))


# depth ranking

@dataclass
class PairSet:
    """Pixel pairs with the prior's ordinal relation only.

    ``signs[k]`` is sgn(prior[i] - prior[j]); ``ties[k]`` marks pairs whose
    prior depths are closer than the tie threshold (they contribute zero).
    """

    i: np.ndarray
    j: np.ndarray
    signs: np.ndarray
    ties: np.ndarray
    margin: float = 1e-3

    def __len__(self) -> int:
        return len(self.i)

    @classmethod
    def from_priors(cls, i, j, prior_i, prior_j, margin: float = 1e-3, tie_eps: float = 1e-6) -> "PairSet":
        i, j = np.asarray(i, dtype=np.intp), np.asarray(j, dtype=np.intp)
        if (i == j).any():
            raise ValueError("pair members must be distinct pixels")
        diff = np.asarray(prior_i, dtype=np.float64) - np.asarray(prior_j, dtype=np.float64)
        ties = np.abs(diff) < tie_eps
        signs = np.where(ties, 0.0, np.sign(diff))
        return cls(i=i, j=j, signs=signs, ties=ties, margin=margin)

    def usable(self) -> "PairSet":
        keep = ~self.ties
        return PairSet(self.i[keep], self.j[keep], self.signs[keep], self.ties[keep], self.margin)


def sample_pairs(group: np.ndarray, prior: np.ndarray, valid: np.ndarray, n_pairs: int,
                 rng: np.random.Generator, margin: float = 1e-3, tie_eps: float = 1e-6) -> PairSet:
    """Draw ``n_pairs`` pixel pairs, both members from the same image group and
    both valid (prior present, rendered ray non-empty). Ties are dropped."""
    group = np.asarray(group)
    candidates = np.flatnonzero(valid)
    if len(candidates) < 2:
        return PairSet.from_priors([], [], [], [], margin, tie_eps)
    first = rng.choice(candidates, size=n_pairs)
    second = np.empty_like(first)
    by_group = {g: candidates[group[candidates] == g] for g in np.unique(group[candidates])}
    u = rng.random(n_pairs)
    for k, a in enumerate(first):
        pool = by_group[group[a]]
        second[k] = pool[min(int(u[k] * len(pool)), len(pool) - 1)]
    keep = first != second
    pairs = PairSet.from_priors(first[keep], second[keep], prior[first[keep]], prior[second[keep]],
                                margin, tie_eps)
    return pairs.usable()


def depth_ranking_loss(pairs: PairSet, depth: ParamTensor) -> ParamTensor:
    """Mean hinge max(0, margin - s * (D(i) - D(j))) over pairs; tied pairs give 0."""
    if len(pairs) == 0:
        _warn("depth_ranking_empty", "depth_ranking_loss: empty pair set, contributing 0")
        return dm.tensor(np.zeros((), dtype=depth.dtype))
    diff = dm.take(depth, pairs.i) - dm.take(depth, pairs.j)
    signs = dm.tensor(pairs.signs.astype(depth.dtype))
    hinge = dm.relu(pairs.margin - signs * diff)
    active = dm.tensor((~pairs.ties).astype(depth.dtype))
    return dm.mean(hinge * active)


# cross-view consistency

@dataclass
class Correspondences:
    index_a: np.ndarray  # rows of the view-A batch that found a partner
    rays_b: Rays  # matching view-B rays through the projected pixel
    points: np.ndarray  # lifted 3-D points (K, 3)
    index_b: np.ndarray  # rows of the rays handed to depth_fn that were kept

    def __len__(self) -> int:
        return len(self.index_a)


def find_correspondences(rays_a: Rays, depth_a: np.ndarray, camera_b: Camera, depth_fn,
                         occlusion_tol: float = 0.05, acc_a: np.ndarray | None = None) -> Correspondences:
    """Lift view-A rays to 3-D at their rendered depth and re-project into B.

    ``depth_fn(rays)`` returns view-B depths for the emitted rays (the field's
    rendered depth during training, analytic depth in tests). Points behind B,
    outside its image, or farther than ``occlusion_tol`` (relative) from B's
    depth along the ray are rejected.
    """
    depth_a = np.asarray(depth_a, dtype=np.float64)
    idx = np.arange(len(rays_a))
    if acc_a is not None:
        idx = idx[np.asarray(acc_a) >= EMPTY_ACC]
    points = rays_a.origins[idx] + depth_a[idx, None] * rays_a.directions[idx]
    uv, forward = project(camera_b, points)
    inside = (forward > 1e-6) & np.isfinite(uv).all(axis=1)
    inside &= (uv[:, 0] >= 0) & (uv[:, 0] < camera_b.width) & (uv[:, 1] >= 0) & (uv[:, 1] < camera_b.height)
    idx, points, uv = idx[inside], points[inside], uv[inside]
    empty = Correspondences(np.zeros(0, dtype=np.intp), Rays(*(np.zeros((0, 3)),) * 2, np.zeros(0), np.zeros(0)),
                            np.zeros((0, 3)), np.zeros(0, dtype=np.intp))
    if len(idx) == 0:
        return empty
    rays_b = generate_rays(camera_b, uv, center=False)
    expected = np.linalg.norm(points - rays_b.origins, axis=1)
    seen = np.asarray(depth_fn(rays_b), dtype=np.float64)
    visible = np.abs(seen - expected) <= occlusion_tol * expected
    if not visible.any():
        return empty
    keep = np.flatnonzero(visible)
    return Correspondences(idx[keep], rays_b.subset(keep), points[keep], keep)


def cross_view_loss(color_a: ParamTensor, color_b: ParamTensor, sigma_a: ParamTensor | None = None,
                    sigma_b: ParamTensor | None = None, color_weight: float = 1.0,
                    density_weight: float = 1.0) -> ParamTensor:
    """Mean over correspondences of w_c * ||c_a - c_b||^2 + w_d * (sigma_a - sigma_b)^2."""
    if color_a.shape[0] == 0:
        _warn("cross_view_empty", "cross_view_loss: no valid correspondences, contributing 0")
        return dm.tensor(np.zeros((), dtype=color_a.dtype))
    if color_a.shape != color_b.shape:
        raise dm.ShapeError(f"cross_view_loss: color shapes {color_a.shape} and {color_b.shape} differ")
    k = color_a.shape[0]
    per = dm.tensor(np.zeros(k, dtype=color_a.dtype))
    if color_weight > 0:
        per = per + color_weight * dm.sum(dm.square(color_a - color_b), axis=1)
    if density_weight > 0 and sigma_a is not None and sigma_b is not None:
        per = per + density_weight * dm.square(sigma_a - sigma_b)
    return dm.mean(per)


# sparsity

def sample_uniform(bounds: np.ndarray, n_points: int, rng: np.random.Generator) -> np.ndarray:
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if not (bounds[1] > bounds[0]).all():
        raise ValueError(f"degenerate scene bounds {bounds.tolist()}")
    return bounds[0] + rng.random((n_points, 3)) * (bounds[1] - bounds[0])


def sparsity_loss(model, bounds, n_points: int, rng: np.random.Generator) -> ParamTensor:
    """Monte Carlo mean of softplus(raw density) over uniform points in the box."""
    pts = sample_uniform(bounds, n_points, rng).astype(model.dtype)
    raw = model.density(pts).raw_sigma
    return dm.mean(dm.softplus(raw))


def sparsity_estimate(model, bounds, n_points: int, rng: np.random.Generator,
                      chunk: int = 65536) -> tuple[float, float]:
    """Gradient-free Monte Carlo estimate: (mean, standard error)."""
    total = total_sq = 0.0
    remaining = n_points
    with dm.no_grad():
        while remaining > 0:
            n = min(chunk, remaining)
            pts = sample_uniform(bounds, n, rng).astype(model.dtype)
            vals = np.logaddexp(0.0, model.density(pts).raw_sigma.values.astype(np.float64))
            total += vals.sum()
            total_sq += np.square(vals).sum()
            remaining -= n
    mean = total / n_points
    var = max(total_sq / n_points - mean * mean, 0.0) * n_points / max(n_points - 1, 1)
    return mean, math.sqrt(var / n_points)


# smoothness

def patch_neighbors(n_patches: int, patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat index pairs of horizontally and vertically adjacent pixels, for
    a batch laid out as consecutive row-major s x s patches."""
    s = patch_size
    grid = np.arange(s * s).reshape(s, s)
    a = np.concatenate([grid[:, :-1].ravel(), grid[:-1, :].ravel()])
    b = np.concatenate([grid[:, 1:].ravel(), grid[1:, :].ravel()])
    offsets = (np.arange(n_patches) * s * s)[:, None]
    return (offsets + a).ravel(), (offsets + b).ravel()


def smoothness_loss(depth: ParamTensor, color: ParamTensor, patch_size: int = 4) -> ParamTensor:
    """Mean over adjacent pixel pairs of (dDepth)^2 + ||dColor||^2."""
    per_patch = patch_size * patch_size
    n = depth.shape[0]
    if patch_size < 2 or n < per_patch or n % per_patch:
        _warn("smoothness_no_patches", "smoothness_loss: batch has no complete patches, contributing 0")
        return dm.tensor(np.zeros((), dtype=depth.dtype))
    a, b = patch_neighbors(n // per_patch, patch_size)
    dd = dm.square(dm.take(depth, a) - dm.take(depth, b))
    dc = dm.sum(dm.square(dm.take(color, a) - dm.take(color, b)), axis=1)
    return dm.mean(dd + dc)


# total

@dataclass
class LossBreakdown:
    step: int
    alpha: float
    rgb: float
    weighted: dict[str, float]  # lambda_i * L_i per term
    total: float


def total_loss(step: int, rgb: ParamTensor, terms: dict[str, ParamTensor], weights: ConstraintWeights,
               schedule: Schedule) -> tuple[ParamTensor, LossBreakdown]:
    """L_rgb + alpha(step) * sum_i lambda_i * L_i."""
    if step < 0:
        raise ValueError("step must be >= 0")
    alpha = schedule.alpha(step)
    aux = None
    weighted = {}
    for name in TERMS:
        lam = getattr(weights, name)
        term = terms.get(name)
        if term is None or lam == 0:
            weighted[name] = 0.0
            continue
        scaled = lam * term
        weighted[name] = float(scaled.values)
        aux = scaled if aux is None else aux + scaled
    total = rgb if aux is None else rgb + alpha * aux
    breakdown = LossBreakdown(step=step, alpha=alpha, rgb=float(rgb.values), weighted=weighted,
                              total=float(total.values))
    return total, breakdown
