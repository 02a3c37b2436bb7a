"""Pinhole ray generation and differentiable emission-absorption rendering.

Cameras follow the NeRF-synthetic convention: right-handed, looking down -z,
+y up in camera space, image rows growing downward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import ParamTensor

EMPTY_ACC = 1e-4
DEPTH_EPS = 1e-8


@dataclass
class Camera:
    transform: np.ndarray  # 4x4 camera-to-world
    focal: float
    width: int
    height: int
    near: float = 2.0
    far: float = 6.0

    def __post_init__(self):
        self.transform = np.asarray(self.transform, dtype=np.float64)
        if self.transform.shape != (4, 4):
            raise ValueError(f"camera transform must be 4x4, got {self.transform.shape}")
        rot = self.transform[:3, :3]
        if abs(np.linalg.det(rot)) < 1e-8:
            raise ValueError("camera transform is singular")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-4:
            raise ValueError("camera rotation block is not orthonormal within 1e-4")
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be less than far ({self.far})")

    @property
    def origin(self) -> np.ndarray:
        return self.transform[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.transform[:3, :3]

    def scaled(self, factor: int) -> "Camera":
        """Same pose at 1/factor resolution."""
        return Camera(self.transform, self.focal / factor, self.width // factor,
                      self.height // factor, self.near, self.far)

    def pixel_grid(self) -> np.ndarray:
        """(H*W, 2) integer (col, row) coordinates in raster order."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([cols.ravel(), rows.ravel()], axis=1)


@dataclass
class Rays:
    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3), unit length
    near: np.ndarray  # (N,)
    far: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx])

    @staticmethod
    def cat(parts: list["Rays"]) -> "Rays":
        return Rays(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                      ("origins", "directions", "near", "far")))


@dataclass
class RenderOutput:
    color: ParamTensor  # (N, 3)
    depth: ParamTensor  # (N,)
    acc: ParamTensor  # (N,)
    weights: ParamTensor  # (N, S)
    transmittance: np.ndarray  # (N,) transmittance left after the last sample
    t: np.ndarray  # (N, S)

    def depth_map(self, far: np.ndarray) -> np.ndarray:
        """Expected depth with empty rays reported at ``far``."""
        d = np.array(self.depth.values, dtype=np.float64)
        empty = self.acc.values < EMPTY_ACC
        d[empty] = np.broadcast_to(far, d.shape)[empty]
        return d


def generate_rays(camera: Camera, pixels, center: bool = True) -> Rays:
    """Rays through pixel centres (``center=True``, integer (col, row) input)
    or through continuous image-plane coordinates (``center=False``)."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    limit_w = camera.width if center else camera.width + 1e-9
    limit_h = camera.height if center else camera.height + 1e-9
    if px.size and (px.min() < 0 or (px[:, 0] >= limit_w).any() or (px[:, 1] >= limit_h).any()):
        raise ValueError("pixel coordinates outside image bounds")
    u = px[:, 0] + (0.5 if center else 0.0)
    v = px[:, 1] + (0.5 if center else 0.0)
    dirs_cam = np.stack([(u - 0.5 * camera.width) / camera.focal,
                         -(v - 0.5 * camera.height) / camera.focal,
                         -np.ones_like(u)], axis=1)
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    n = len(px)
    return Rays(np.broadcast_to(camera.origin, (n, 3)).copy(), dirs,
                np.full(n, camera.near), np.full(n, camera.far))


def project(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World points -> continuous (u, v) image coordinates and camera-space
    forward distance (positive in front of the camera)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = (pts - camera.origin) @ camera.rotation
    forward = -cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.focal * cam[:, 0] / forward + 0.5 * camera.width
        v = -camera.focal * cam[:, 1] / forward + 0.5 * camera.height
    return np.stack([u, v], axis=1), forward


def sample_along_ray(rays: Rays, n_samples: int, stratified: bool = False,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return (t, deltas), both (N, n_samples). Deterministic bin centres or
    uniform jitter inside equal-width bins; deltas are the bin widths."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    near = np.asarray(rays.near, dtype=np.float64)[:, None]
    far = np.asarray(rays.far, dtype=np.float64)[:, None]
    width = (far - near) / n_samples
    idx = np.arange(n_samples, dtype=np.float64)[None, :]
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        jitter = rng.random((len(near), n_samples))
    else:
        jitter = 0.5
    t = near + (idx + jitter) * width
    deltas = np.broadcast_to(width, t.shape).copy()
    return t, deltas


def volume_render(sigma, rgb, deltas, t, background=(1.0, 1.0, 1.0)) -> RenderOutput:
    """Composite (N, S) densities and (N, S, 3) colors along each ray."""
    sigma = sigma if isinstance(sigma, ParamTensor) else dm.tensor(np.asarray(sigma, dtype=np.float64))
    rgb = rgb if isinstance(rgb, ParamTensor) else dm.tensor(np.asarray(rgb, dtype=sigma.dtype))
    dtype = sigma.dtype
    deltas = np.asarray(deltas, dtype=dtype)
    t = np.asarray(t, dtype=dtype)
    for name, arr in (("sigma", sigma.values), ("rgb", rgb.values), ("deltas", deltas), ("t", t)):
        if not np.isfinite(arr).all():
            raise ValueError(f"volume_render: non-finite {name}")
    if (sigma.values < 0).any():
        raise ValueError("volume_render: negative density")
    if (deltas <= 0).any():
        raise ValueError("volume_render: intervals must be positive")
    n, s = sigma.shape
    if rgb.shape != (n, s, 3) or deltas.shape != (n, s) or t.shape != (n, s):
        raise dm.ShapeError(f"volume_render: inconsistent shapes sigma {sigma.shape}, rgb {rgb.shape}, "
                            f"deltas {deltas.shape}, t {t.shape}")
    tau = sigma * dm.tensor(deltas)
    alpha = 1.0 - dm.exp(-tau)
    trans = dm.exp(-dm.cumsum_exclusive(tau, axis=1))
    weights = trans * alpha
    w3 = dm.broadcast_to(dm.reshape(weights, (n, s, 1)), (n, s, 3))
    acc = dm.sum(weights, axis=1)
    bg = dm.tensor(np.broadcast_to(np.asarray(background, dtype=dtype), (n, 3)).copy())
    color = dm.sum(w3 * rgb, axis=1) + dm.broadcast_to(dm.reshape(1.0 - acc, (n, 1)), (n, 3)) * bg
    depth = dm.sum(weights * dm.tensor(t), axis=1) / dm.clamp_min(acc, DEPTH_EPS)
    final_trans = np.exp(-tau.values.sum(axis=1))
    return RenderOutput(color=color, depth=depth, acc=acc, weights=weights,
                        transmittance=final_trans, t=t)


def render_rays(model, rays: Rays, n_samples: int, stratified: bool = False,
                rng: np.random.Generator | None = None, background=(1.0, 1.0, 1.0),
                samples: tuple[np.ndarray, np.ndarray] | None = None,
                directions: ParamTensor | None = None) -> RenderOutput:
    """Render a batch of rays through ``model``.

    ``samples`` reuses precomputed (t, deltas); ``directions`` supplies the
    ray directions as a tensor so gradients flow into them (its values must
    match ``rays.directions``).
    """
    t, deltas = samples if samples is not None else sample_along_ray(rays, n_samples, stratified, rng)
    n, s = t.shape
    dtype = model.dtype
    if directions is None:
        pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
        dirs = np.broadcast_to(rays.directions[:, None, :], pts.shape)
        out = model(pts.reshape(-1, 3).astype(dtype), dirs.reshape(-1, 3).astype(dtype))
    else:
        d = dm.broadcast_to(dm.reshape(directions, (n, 1, 3)), (n, s, 3))
        steps = dm.tensor(np.broadcast_to(t[..., None], (n, s, 3)).astype(dtype))
        origins = dm.tensor(np.broadcast_to(rays.origins[:, None, :], (n, s, 3)).astype(dtype))
        pts = origins + steps * d
        out = model(dm.reshape(pts, (n * s, 3)), dm.reshape(d, (n * s, 3)))
    sigma = dm.reshape(out.sigma, (n, s))
    rgb = dm.reshape(out.rgb, (n, s, 3))
    return volume_render(sigma, rgb, deltas, t, background)


def render_image(model, camera: Camera, n_samples: int = 64, background=(1.0, 1.0, 1.0),
                 chunk: int = 1024, stratified: bool = False, seed: int = 0):
    """Render a full frame without recording gradients.

    Returns (image (H, W, 3), depth (H, W), acc (H, W)) as float64 arrays.
    """
    rays = generate_rays(camera, camera.pixel_grid())
    rng = np.random.default_rng(seed)
    colors, depths, accs = [], [], []
    with dm.no_grad():
        for start in range(0, len(rays), chunk):
            sub = rays.subset(slice(start, start + chunk))
            out = render_rays(model, sub, n_samples, stratified, rng, background)
            colors.append(out.color.values)
            depths.append(out.depth_map(sub.far))
            accs.append(out.acc.values)
    h, w = camera.height, camera.width
    image = np.clip(np.concatenate(colors).astype(np.float64), 0.0, 1.0).reshape(h, w, 3)
    return image, np.concatenate(depths).reshape(h, w), np.concatenate(accs).astype(np.float64).reshape(h, w)
