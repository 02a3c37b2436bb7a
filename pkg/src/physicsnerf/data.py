"""Scene datasets: NeRF-synthetic loader, depth priors, procedural toy scenes."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import read_pfm, read_png, to_uint8, write_pfm, write_png
from .render import Camera, Rays, generate_rays

logger = logging.getLogger(__name__)

NERF_SYNTHETIC_BOUNDS = ((-4.0, -4.0, -4.0), (4.0, 4.0, 4.0))
TOY_BOUNDS = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))


class DatasetError(ValueError):
    pass


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    camera: Camera
    depth_prior: np.ndarray | None = None  # (H, W), used only ordinally
    file_path: str = ""

    @property
    def stem(self) -> str:
        return Path(self.file_path).name if self.file_path else ""


@dataclass
class SceneDataset:
    train: list[Frame]
    test: list[Frame]
    bounds: np.ndarray  # (2, 3) min / max corner of the scene box
    background: np.ndarray = field(default_factory=lambda: np.ones(3))
    source: str = ""

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if not (self.bounds[1] > self.bounds[0]).all():
            raise DatasetError(f"scene bounds must have positive volume, got {self.bounds.tolist()}")
        shapes = {f.image.shape for f in self.train + self.test}
        if len(shapes) > 1:
            raise DatasetError(f"all images must share dimensions, got {sorted(shapes)}")

    def split(self, name: str) -> list[Frame]:
        if name not in ("train", "test"):
            raise DatasetError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test

    @property
    def image_shape(self) -> tuple[int, int]:
        frame = (self.train or self.test)[0]
        return frame.image.shape[:2]


# NeRF-synthetic layout

def composite_rgba(rgba: np.ndarray, background) -> np.ndarray:
    """uint8 RGB(A) -> float32 RGB composited over ``background``."""
    img = rgba.astype(np.float32) / np.float32(255.0)
    if img.shape[-1] == 3:
        return img
    rgb, alpha = img[..., :3], img[..., 3:4]
    bg = np.asarray(background, dtype=np.float32)
    return (rgb * alpha + bg * (np.float32(1.0) - alpha)).astype(np.float32)


def focal_from_angle(width: int, camera_angle_x: float) -> float:
    return 0.5 * width / math.tan(0.5 * camera_angle_x)


def evenly_spaced(n_total: int, n_pick: int) -> list[int]:
    if n_pick >= n_total:
        return list(range(n_total))
    return [int(round(i)) for i in np.linspace(0, n_total - 1, n_pick)]


def _read_transforms(path: Path) -> dict:
    if not path.exists():
        raise DatasetError(f"missing transforms file: {path}")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise DatasetError(f"{path}: expected 'camera_angle_x' and 'frames' keys")
    return meta


def _load_split(directory: Path, split: str, background, indices=None) -> tuple[list[Frame], dict]:
    path = directory / f"transforms_{split}.json"
    meta = _read_transforms(path)
    frames_meta = meta["frames"]
    if indices is not None:
        bad = [i for i in indices if not 0 <= i < len(frames_meta)]
        if bad:
            raise DatasetError(f"{path}: frame indices {bad} out of range (0..{len(frames_meta) - 1})")
        frames_meta = [frames_meta[i] for i in indices]
    near = float(meta.get("near", 2.0))
    far = float(meta.get("far", 6.0))
    frames = []
    for fm in frames_meta:
        rel = fm["file_path"]
        img_path = directory / rel
        if img_path.suffix.lower() != ".png":
            img_path = img_path.with_name(img_path.name + ".png")
        if not img_path.exists():
            raise DatasetError(f"missing image: {img_path}")
        image = composite_rgba(read_png(img_path), background)
        h, w = image.shape[:2]
        focal = focal_from_angle(w, float(meta["camera_angle_x"]))
        if "camera_angle_y" in meta:
            focal_y = 0.5 * h / math.tan(0.5 * float(meta["camera_angle_y"]))
            if abs(focal_y - focal) > 1e-3 * focal:
                raise DatasetError(f"{path}: non-square intrinsics (fx={focal:.4f}, fy={focal_y:.4f})")
        try:
            camera = Camera(np.asarray(fm["transform_matrix"], dtype=np.float64), focal, w, h, near, far)
        except ValueError as exc:
            raise DatasetError(f"{path}: frame {rel!r}: {exc}") from exc
        frames.append(Frame(image=image, camera=camera, file_path=rel))
    return frames, meta


def load_nerf_synthetic(directory, n_train: int = 8, train_indices=None,
                        background=(1.0, 1.0, 1.0), bounds=None) -> SceneDataset:
    """Load a NeRF-synthetic style directory keeping a sparse training set.

    ``train_indices`` defaults to ``n_train`` evenly spaced frames.
    """
    directory = Path(directory)
    meta = _read_transforms(directory / "transforms_train.json")
    if train_indices is None:
        train_indices = evenly_spaced(len(meta["frames"]), n_train)
    train, meta = _load_split(directory, "train", background, train_indices)
    test_path = directory / "transforms_test.json"
    test, _ = _load_split(directory, "test", background) if test_path.exists() else ([], {})
    if bounds is None:
        bounds = meta.get("bounds", NERF_SYNTHETIC_BOUNDS)
    return SceneDataset(train=train, test=test, bounds=bounds, background=background,
                        source=str(directory))


def load_depth_priors(directory, dataset: SceneDataset) -> SceneDataset:
    """Attach ``<directory>/<frame stem>.pfm`` to each training frame.

    Frames without a prior file are kept but get no pairs sampled from them.
    """
    directory = Path(directory)
    for frame in dataset.train:
        path = directory / f"{frame.stem}.pfm"
        if not path.exists():
            logger.warning("no depth prior for frame %s (%s); excluded from pair sampling", frame.stem, path)
            frame.depth_prior = None
            continue
        prior = read_pfm(path)
        if prior.shape != frame.image.shape[:2]:
            raise DatasetError(f"{path}: depth prior shape {prior.shape} != image shape {frame.image.shape[:2]}")
        frame.depth_prior = prior
    return dataset


def write_dataset(dataset: SceneDataset, directory, camera_angle_x: float | None = None,
                  depths: dict[str, list[np.ndarray]] | None = None) -> Path:
    """Emit a dataset in the NeRF-synthetic directory layout.

    Depth rasters (``depths['train']`` etc., or the train frames' priors) go
    to ``depth_<split>/<stem>.pfm``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        frames = dataset.split(split)
        if not frames:
            continue
        (directory / split).mkdir(exist_ok=True)
        cam0 = frames[0].camera
        angle = camera_angle_x if camera_angle_x is not None else 2.0 * math.atan(0.5 * cam0.width / cam0.focal)
        meta = {
            "camera_angle_x": angle,
            "near": cam0.near,
            "far": cam0.far,
            "bounds": dataset.bounds.tolist(),
            "frames": [],
        }
        split_depths = (depths or {}).get(split)
        if split_depths is None and split == "train" and all(f.depth_prior is not None for f in frames):
            split_depths = [f.depth_prior for f in frames]
        if split_depths is not None:
            (directory / f"depth_{split}").mkdir(exist_ok=True)
        for i, frame in enumerate(frames):
            rel = frame.file_path or f"./{split}/r_{i}"
            write_png(directory / (rel + ".png"), frame.image)
            meta["frames"].append({"file_path": rel, "transform_matrix": frame.camera.transform.tolist()})
            if split_depths is not None:
                write_pfm(directory / f"depth_{split}" / f"{Path(rel).name}.pfm", split_depths[i])
        (directory / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))
    return directory


# procedural toy scenes

@dataclass
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float] = (0.8, 0.2, 0.2)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest positive hit distance (inf on miss) and surface normals."""
        c = np.asarray(self.center, dtype=np.float64)
        oc = origins - c
        b = np.einsum("ij,ij->i", oc, dirs)
        cc = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - cc
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t = np.where(hit, t, np.inf)
        pts = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        normals = (pts - c) / self.radius
        return t, normals


@dataclass
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    albedo: tuple[float, float, float] = (0.2, 0.3, 0.8)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (lo - origins) * inv
            tb = (hi - origins) * inv
        tmin = np.nan_to_num(np.minimum(ta, tb), nan=-np.inf)
        tmax = np.nan_to_num(np.maximum(ta, tb), nan=np.inf)
        t_enter = tmin.max(axis=1)
        t_exit = tmax.min(axis=1)
        axis = tmin.argmax(axis=1)
        hit = (t_enter <= t_exit) & (t_exit > 1e-9) & (t_enter > 1e-9)
        t = np.where(hit, t_enter, np.inf)
        normals = np.zeros_like(dirs)
        rows = np.arange(len(dirs))
        normals[rows, axis] = -np.sign(dirs[rows, axis])
        return t, normals


@dataclass
class ToySceneSpec:
    spheres: list[Sphere] = field(default_factory=lambda: [Sphere((-0.25, 0.3, 0.0), 0.6, (0.85, 0.25, 0.2))])
    boxes: list[Box] = field(default_factory=lambda: [Box((0.05, -0.95, -0.6), (0.85, -0.15, 0.2), (0.2, 0.35, 0.85))])
    light_direction: tuple[float, float, float] = (0.4, -0.3, 0.85)
    ambient: float = 0.25
    n_train: int = 8
    n_test: int = 8
    radius: float = 4.0
    elevation: float = 30.0
    test_elevation_range: tuple[float, float] = (15.0, 45.0)
    width: int = 64
    height: int = 64
    fov_degrees: float = 40.0
    near: float = 2.0
    far: float = 6.0
    bounds: tuple = TOY_BOUNDS
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.spheres = [s if isinstance(s, Sphere) else Sphere(**s) for s in self.spheres]
        self.boxes = [b if isinstance(b, Box) else Box(**b) for b in self.boxes]
        if self.n_train < 2:
            raise ValueError("toy scene needs at least two training cameras")
        lo, hi = np.asarray(self.bounds, dtype=np.float64)
        for s in self.spheres:
            c = np.asarray(s.center)
            if ((c - s.radius) < lo).any() or ((c + s.radius) > hi).any():
                raise ValueError(f"sphere {s} is not inside the scene bounds")
        for b in self.boxes:
            if (np.asarray(b.lo) < lo).any() or (np.asarray(b.hi) > hi).any():
                raise ValueError(f"box {b} is not inside the scene bounds")

    @classmethod
    def from_dict(cls, data: dict) -> "ToySceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown toy-scene keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("light_direction", "test_elevation_range", "background"):
            if key in data:
                data[key] = tuple(data[key])
        if "bounds" in data:
            data["bounds"] = tuple(tuple(row) for row in data["bounds"])
        return cls(**data)

    @property
    def camera_angle_x(self) -> float:
        return math.radians(self.fov_degrees)

    @property
    def focal(self) -> float:
        return focal_from_angle(self.width, self.camera_angle_x)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking down -z at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    z = -forward
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    mat = np.eye(4)
    mat[:3, 0], mat[:3, 1], mat[:3, 2], mat[:3, 3] = x, y, z, eye
    return mat


def ring_pose(radius: float, azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    eye = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    return look_at(eye)


def trace_toy(spec: ToySceneSpec, rays: Rays) -> tuple[np.ndarray, np.ndarray]:
    """Analytic lambertian shading. Returns (rgb (N, 3), depth (N,)); misses
    get the background color and depth = ray far bound."""
    n = len(rays)
    best_t = np.full(n, np.inf)
    normals = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    for prim in list(spec.spheres) + list(spec.boxes):
        t, nrm = prim.intersect(rays.origins, rays.directions)
        closer = (t < best_t) & (t >= rays.near) & (t <= rays.far)
        best_t = np.where(closer, t, best_t)
        normals[closer] = nrm[closer]
        albedo[closer] = np.asarray(prim.albedo, dtype=np.float64)
    hit = np.isfinite(best_t)
    light = np.asarray(spec.light_direction, dtype=np.float64)
    light /= np.linalg.norm(light)
    shade = spec.ambient + (1.0 - spec.ambient) * np.clip(normals @ light, 0.0, None)
    rgb = np.where(hit[:, None], albedo * shade[:, None], np.asarray(spec.background, dtype=np.float64))
    depth = np.where(hit, best_t, rays.far)
    return rgb, depth


@dataclass
class ToyScene:
    dataset: SceneDataset
    spec: ToySceneSpec
    train_depths: list[np.ndarray]
    test_depths: list[np.ndarray]

    @property
    def train_priors(self) -> list[np.ndarray]:
        return [f.depth_prior for f in self.dataset.train]

    def write(self, directory) -> Path:
        return write_dataset(self.dataset, directory, self.spec.camera_angle_x,
                             depths={"train": self.train_priors, "test": self.test_depths})


def _toy_frame(spec: ToySceneSpec, pose: np.ndarray, rel: str) -> tuple[Frame, np.ndarray]:
    camera = Camera(pose, spec.focal, spec.width, spec.height, spec.near, spec.far)
    rgb, depth = trace_toy(spec, generate_rays(camera, camera.pixel_grid()))
    image = to_uint8(rgb.reshape(spec.height, spec.width, 3)).astype(np.float32) / np.float32(255.0)
    depth = depth.reshape(spec.height, spec.width).astype(np.float32)
    return Frame(image=image, camera=camera, file_path=rel), depth


def generate_toy_scene(spec: ToySceneSpec | None = None, rng: np.random.Generator | None = None) -> ToyScene:
    """Ray-trace the toy scene from a training ring and random test views.

    Training cameras sit evenly on a ring at ``spec.elevation``; test cameras
    get random azimuths and elevations drawn from ``rng`` (seeded by
    ``spec.seed`` when omitted). Images are quantized to 8 bits so the
    in-memory dataset equals its on-disk form.
    """
    spec = spec or ToySceneSpec()
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    train, train_depths, test, test_depths = [], [], [], []
    for i in range(spec.n_train):
        frame, depth = _toy_frame(spec, ring_pose(spec.radius, 360.0 * i / spec.n_train, spec.elevation),
                                  f"./train/r_{i}")
        # a miss has no surface to rank against; NaN keeps it out of depth pairs
        frame.depth_prior = np.where(depth >= spec.far, np.float32(np.nan), depth)
        train.append(frame)
        train_depths.append(depth)
    azimuths = rng.uniform(0.0, 360.0, spec.n_test)
    elevations = rng.uniform(*spec.test_elevation_range, spec.n_test)
    for i in range(spec.n_test):
        frame, depth = _toy_frame(spec, ring_pose(spec.radius, azimuths[i], elevations[i]), f"./test/r_{i}")
        test.append(frame)
        test_depths.append(depth)
    dataset = SceneDataset(train=train, test=test, bounds=spec.bounds, background=spec.background,
                           source="toy")
    return ToyScene(dataset=dataset, spec=spec, train_depths=train_depths, test_depths=test_depths)
