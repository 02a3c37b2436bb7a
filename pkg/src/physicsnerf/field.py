"""Dual-scale radiance field: position -> density, (position, view dir) -> color."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .diffmath import ParamTensor

CHECKPOINT_MAGIC = b"PNRF1"
PARAM_BUDGET = (600_000, 750_000)


class CheckpointError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class EncodingConfig:
    position_frequencies: int = 10
    direction_frequencies: int = 4
    scales: list[float] = field(default_factory=lambda: [1.0, 2.0])
    include_input: bool = True

    def __post_init__(self):
        if len(self.scales) != 2:
            raise ValueError(f"scales must have exactly two entries, got {self.scales}")

    def encoded_dim(self, num_frequencies: int) -> int:
        return 3 * int(self.include_input) + 3 * 2 * num_frequencies


@dataclass
class FieldConfig:
    hidden_width: int = 192
    depth: int = 7
    skip_layer: int = 4
    color_head_width: int = 96


@dataclass
class FieldSample:
    """Batched field output. ``sigma`` is softplus(raw_sigma)."""

    sigma: ParamTensor
    raw_sigma: ParamTensor
    rgb: ParamTensor | None


def frequency_matrix(num_frequencies: int, scale: float, dtype=np.float32) -> np.ndarray:
    """(3, 3L) matrix so that x @ M gives 2^k * pi * s * x, k-major."""
    mat = np.zeros((3, 3 * num_frequencies), dtype=np.float64)
    for k in range(num_frequencies):
        for c in range(3):
            mat[c, 3 * k + c] = (2.0 ** k) * math.pi * scale
    return mat.astype(dtype)


def encode(x, num_frequencies: int, scale: float = 1.0, include_input: bool = True) -> ParamTensor:
    """Sinusoidal encoding of (N, 3) coordinates multiplied by ``scale``.

    Layout is ``[x*s, sin(2^k pi x s) for k, cos(2^k pi x s) for k]`` with the
    three components interleaved inside each frequency block.
    """
    x = x if isinstance(x, ParamTensor) else dm.tensor(np.atleast_2d(x))
    parts = []
    if include_input:
        parts.append(x * scale if scale != 1.0 else x)
    if num_frequencies > 0:
        arg = dm.matmul(x, dm.tensor(frequency_matrix(num_frequencies, scale, x.dtype)))
        parts.extend([dm.sin(arg), dm.cos(arg)])
    if len(parts) == 1:
        return parts[0]
    return dm.concat(parts, axis=1)


def _check_finite(t: ParamTensor, where: str) -> None:
    if not np.isfinite(t.values).all():
        raise NonFiniteError(f"non-finite values in {where}")


class RadianceField:
    """Two sinusoidal-encoding branches (coordinate scales 1x and 2x), each a
    ReLU MLP with one input skip, fused by concatenation + linear projection.

    Density reads the fused feature only; the color head additionally sees
    the encoded view direction.
    """

    def __init__(
        self,
        field_config: FieldConfig | None = None,
        encoding: EncodingConfig | None = None,
        seed: int = 0,
        dtype=np.float32,
        check_finite: bool = True,
    ):
        self.config = field_config or FieldConfig()
        self.encoding = encoding or EncodingConfig()
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.params: dict[str, ParamTensor] = {}
        rng = np.random.default_rng(seed)
        cfg, enc = self.config, self.encoding
        w = cfg.hidden_width
        pos_dim = enc.encoded_dim(enc.position_frequencies)
        dir_dim = enc.encoded_dim(enc.direction_frequencies)
        for b in range(2):
            for i in range(cfg.depth):
                fan_in = pos_dim if i == 0 else w
                if i == cfg.skip_layer and i > 0:
                    fan_in += pos_dim
                self._add_linear(f"branch{b}.layer{i}", fan_in, w, rng)
        self._add_linear("fuse", 2 * w, w, rng)
        self._add_linear("sigma", w, 1, rng)
        self._add_linear("feature", w, w, rng)
        self._add_linear("color0", w + dir_dim, cfg.color_head_width, rng)
        self._add_linear("color1", cfg.color_head_width, 3, rng)

    def _add_linear(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
        bound = math.sqrt(6.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(self.dtype)
        self.params[f"{name}.weight"] = ParamTensor(weight, requires_grad=True, name=f"{name}.weight")
        self.params[f"{name}.bias"] = ParamTensor(
            np.zeros(fan_out, dtype=self.dtype), requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> list[ParamTensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _linear(self, x: ParamTensor, name: str) -> ParamTensor:
        out = dm.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
        if self.check_finite:
            _check_finite(out, f"layer {name!r}")
        return out

    def _trunk(self, positions: ParamTensor) -> ParamTensor:
        cfg, enc = self.config, self.encoding
        heads = []
        for b, scale in enumerate(enc.scales):
            code = encode(positions, enc.position_frequencies, scale, enc.include_input)
            h = code
            for i in range(cfg.depth):
                if i == cfg.skip_layer and i > 0:
                    h = dm.concat([h, code], axis=1)
                h = dm.relu(self._linear(h, f"branch{b}.layer{i}"))
            heads.append(h)
        return dm.relu(self._linear(dm.concat(heads, axis=1), "fuse"))

    def _as_points(self, x, what: str) -> ParamTensor:
        if not isinstance(x, ParamTensor):
            x = dm.tensor(np.asarray(x, dtype=self.dtype).reshape(-1, 3))
        if self.check_finite:
            _check_finite(x, f"input {what}")
        return x

    def density(self, positions) -> FieldSample:
        """Evaluate density only (no color head)."""
        x = self._as_points(positions, "positions")
        raw = self._linear(self._trunk(x), "sigma")
        raw = dm.reshape(raw, (raw.shape[0],))
        return FieldSample(sigma=dm.softplus(raw), raw_sigma=raw, rgb=None)

    def __call__(self, positions, view_dirs) -> FieldSample:
        x = self._as_points(positions, "positions")
        d = self._as_points(view_dirs, "view directions")
        if x.shape != d.shape:
            raise dm.ShapeError(f"field: positions {x.shape} and view directions {d.shape} differ")
        norms = np.linalg.norm(d.values, axis=1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("field: view directions must be unit length")
        feat = self._trunk(x)
        raw = self._linear(feat, "sigma")
        raw = dm.reshape(raw, (raw.shape[0],))
        enc = self.encoding
        dcode = encode(d, enc.direction_frequencies, 1.0, enc.include_input)
        h = self._linear(feat, "feature")
        h = dm.relu(self._linear(dm.concat([h, dcode], axis=1), "color0"))
        rgb = dm.sigmoid(self._linear(h, "color1"))
        return FieldSample(sigma=dm.softplus(raw), raw_sigma=raw, rgb=rgb)

    # parameter vector helpers

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.values.ravel() for p in self.params.values()])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self.params.values():
            n = p.size
            p.values[...] = flat[offset:offset + n].reshape(p.shape)
            offset += n

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"checkpoint layers do not match model (missing={sorted(missing)}, "
                                  f"unexpected={sorted(extra)})")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.size != p.size:
                raise CheckpointError(f"layer {k!r}: expected {p.size} elements, got {arr.size}")
            p.values[...] = arr.reshape(p.shape).astype(self.dtype)


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 buffers in the PNRF1 container."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(arr, dtype="<f4").ravel()
        chunks += [struct.pack("<I", len(raw)), raw, struct.pack("<I", data.size), data.tobytes()]
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic string, expected {CHECKPOINT_MAGIC.decode()!r}")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if pos + 4 * n > len(buf):
                raise CheckpointError(f"{path}: truncated data for layer {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).copy()
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def save_field(path, model: RadianceField) -> None:
    write_tensors(path, model.state_dict())


def load_field(path, model: RadianceField) -> RadianceField:
    model.load_state_dict(read_tensors(path))
    return model
