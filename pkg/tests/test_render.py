import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physicsnerf import diffmath as dm
from physicsnerf.field import FieldConfig, RadianceField
from physicsnerf.fileio import read_pfm, read_png, write_pfm, write_png
from physicsnerf.render import (
    Camera,
    Rays,
    generate_rays,
    project,
    render_image,
    render_rays,
    sample_along_ray,
    volume_render,
)

from conftest import numeric_grad, rel_error


def pose(rx=0.3, ry=-0.5, t=(0.5, -1.0, 3.0)):
    cx, sx, cy, sy = math.cos(rx), math.sin(rx), math.cos(ry), math.sin(ry)
    rot = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]]) @ np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    m = np.eye(4)
    m[:3, :3], m[:3, 3] = rot, t
    return m


def one_ray(near=0.0, far=1.0):
    return Rays(np.zeros((1, 3)), np.array([[0.0, 0.0, -1.0]]), np.array([near]), np.array([far]))


# cameras and rays

def test_center_pixel_looks_down_minus_z():
    cam = Camera(np.eye(4), focal=50.0, width=65, height=65)
    rays = generate_rays(cam, [[32, 32]])
    np.testing.assert_allclose(rays.directions[0], [0.0, 0.0, -1.0], atol=1e-12)


def test_adjacent_pixel_angle_is_inverse_focal():
    cam = Camera(np.eye(4), focal=400.0, width=64, height=64)
    d = generate_rays(cam, [[32, 32], [33, 32]]).directions
    angle = math.acos(np.clip(d[0] @ d[1], -1, 1))
    assert angle == pytest.approx(1 / 400.0, rel=1e-3)


def test_directions_unit_norm(rng):
    cam = Camera(pose(), focal=30.0, width=20, height=16)
    d = generate_rays(cam, cam.pixel_grid()).directions
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(col=st.integers(0, 39), row=st.integers(0, 29), depth=st.floats(0.5, 20.0))
def test_projection_round_trip(col, row, depth):
    cam = Camera(pose(), focal=35.0, width=40, height=30)
    rays = generate_rays(cam, [[col, row]])
    point = rays.origins + depth * rays.directions
    uv, forward = project(cam, point)
    assert forward[0] > 0
    np.testing.assert_allclose(uv[0], [col + 0.5, row + 0.5], atol=1e-4)


def test_camera_validation():
    bad = np.eye(4)
    bad[:3, :3] = 0.0
    with pytest.raises(ValueError, match="singular"):
        Camera(bad, 10.0, 4, 4)
    skew = np.eye(4)
    skew[0, 1] = 0.1
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(skew, 10.0, 4, 4)
    with pytest.raises(ValueError):
        Camera(np.eye(4), 0.0, 4, 4)
    with pytest.raises(ValueError):
        Camera(np.eye(4), 10.0, 4, 4, near=3.0, far=2.0)


def test_pixels_out_of_bounds():
    cam = Camera(np.eye(4), 10.0, 4, 4)
    with pytest.raises(ValueError):
        generate_rays(cam, [[4, 0]])


# sampling

def test_bin_centres():
    t, deltas = sample_along_ray(one_ray(), 5)
    np.testing.assert_allclose(t[0], [0.1, 0.3, 0.5, 0.7, 0.9])
    assert deltas.sum() == pytest.approx(1.0)


def test_stratified_deterministic_and_in_bins():
    rays = Rays.cat([one_ray(2.0, 6.0)] * 3)
    a, da = sample_along_ray(rays, 16, True, np.random.default_rng(5))
    b, _ = sample_along_ray(rays, 16, True, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert (np.diff(a, axis=1) > 0).all()
    assert (a >= 2.0).all() and (a <= 6.0).all()
    np.testing.assert_allclose(da.sum(axis=1), 4.0)


def test_sampling_needs_two():
    with pytest.raises(ValueError):
        sample_along_ray(one_ray(), 1)


# compositing

def test_empty_space_is_background():
    out = volume_render(np.zeros((2, 8)), np.full((2, 8, 3), 0.3), np.full((2, 8), 0.1),
                        np.tile(np.arange(8) * 0.1, (2, 1)), background=(0.2, 0.4, 0.6))
    np.testing.assert_array_equal(out.color.values, [[0.2, 0.4, 0.6]] * 2)
    np.testing.assert_array_equal(out.acc.values, 0.0)


def test_homogeneous_half_transmittance():
    n = 64
    delta = math.log(2) / n
    out = volume_render(np.ones((1, n)), np.zeros((1, n, 3)), np.full((1, n), delta),
                        (np.arange(n)[None] + 0.5) * delta)
    assert out.transmittance[0] == pytest.approx(0.5, abs=1e-12)
    assert out.acc.values[0] == pytest.approx(0.5, abs=1e-12)


def test_single_opaque_sample():
    sigma = np.zeros((1, 10))
    sigma[0, 6] = 1e4
    rgb = np.zeros((1, 10, 3))
    rgb[0, 6] = [0.9, 0.1, 0.4]
    t = np.arange(10)[None] * 0.1 + 2.0
    out = volume_render(sigma, rgb, np.full((1, 10), 0.1), t)
    np.testing.assert_allclose(out.color.values[0], [0.9, 0.1, 0.4], atol=1e-9)
    assert out.depth.values[0] == pytest.approx(t[0, 6])


def test_volume_render_rejects_bad_input():
    ok = dict(sigma=np.ones((1, 4)), rgb=np.zeros((1, 4, 3)), deltas=np.ones((1, 4)), t=np.ones((1, 4)))
    for key, bad in [("sigma", np.full((1, 4), np.nan)), ("rgb", np.full((1, 4, 3), np.inf)),
                     ("deltas", np.zeros((1, 4))), ("sigma", -np.ones((1, 4)))]:
        with pytest.raises(ValueError):
            volume_render(**{**ok, key: bad})


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 50.0))
def test_conservation_and_monotone_transmittance(seed, scale):
    r = np.random.default_rng(seed)
    sigma = r.exponential(scale, (4, 32))
    deltas = r.uniform(0.01, 0.2, (4, 32))
    t = np.cumsum(deltas, axis=1) + 2.0
    out = volume_render(sigma, r.random((4, 32, 3)), deltas, t)
    w = out.weights.values
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=1) + out.transmittance, 1.0, atol=1e-5)
    assert (out.acc.values <= 1 + 1e-5).all()
    trans = np.exp(-np.concatenate([np.zeros((4, 1)), np.cumsum(sigma * deltas, axis=1)], axis=1))
    assert (np.diff(trans, axis=1) <= 0).all()
    hit = out.acc.values > 1e-4
    assert ((out.depth.values[hit] >= t[hit, 0] - 1e-9) & (out.depth.values[hit] <= t[hit, -1] + 1e-9)).all()


def _slab_render(n, slabs, near=0.0, far=4.0, bg=(1.0, 1.0, 1.0)):
    rays = Rays.cat([one_ray(near, far)])
    t, deltas = sample_along_ray(rays, n)
    sigma = np.zeros_like(t)
    rgb = np.zeros(t.shape + (3,))
    for lo, hi, s, c in slabs:
        inside = (t > lo) & (t < hi)
        sigma[inside] = s
        rgb[inside] = c
    return volume_render(sigma, rgb, deltas, t, bg)


def test_homogeneous_medium_oracle():
    # sigma over the whole ray: T = exp(-sigma L), color = c (1 - T) + bg T
    s, c, bg = 0.7, np.array([0.2, 0.5, 0.9]), np.array([1.0, 1.0, 1.0])
    out = _slab_render(256, [(0.0, 4.0, s, c)])
    T = math.exp(-s * 4.0)
    assert out.transmittance[0] == pytest.approx(T, abs=1e-5)
    np.testing.assert_allclose(out.color.values[0], c * (1 - T) + bg * T, atol=1e-5)


def test_two_slab_oracle():
    # slabs aligned with bin edges of a 256-sample grid over [0, 4]
    s1, c1, l1 = 1.3, np.array([1.0, 0.0, 0.0]), 1.0
    s2, c2, l2 = 2.5, np.array([0.0, 0.0, 1.0]), 0.5
    bg = np.array([0.0, 1.0, 0.0])
    out = _slab_render(256, [(1.0, 2.0, s1, c1), (2.5, 3.0, s2, c2)], bg=tuple(bg))
    a1, a2 = 1 - math.exp(-s1 * l1), 1 - math.exp(-s2 * l2)
    color = c1 * a1 + (1 - a1) * a2 * c2 + (1 - a1) * (1 - a2) * bg
    assert out.transmittance[0] == pytest.approx((1 - a1) * (1 - a2), abs=1e-5)
    np.testing.assert_allclose(out.color.values[0], color, atol=1e-5)


def test_pixel_color_gradient_matches_finite_differences(rng):
    model = RadianceField(FieldConfig(hidden_width=16, color_head_width=8), seed=3, dtype=np.float64)
    cam = Camera(pose(t=(0.0, 0.0, 2.5)), focal=8.0, width=6, height=6, near=1.0, far=4.0)
    rays = generate_rays(cam, [[2, 3], [4, 1]])
    w = model.params["sigma.weight"]
    v = model.params["color0.weight"]

    def fn():
        out = render_rays(model, rays, 16)
        return dm.sum(out.color * dm.tensor(np.array([[0.3, -0.2, 0.5], [0.1, 0.4, -0.7]])))

    for p in (w, v):
        model.zero_grad()
        with dm.Tape() as tape:
            loss = fn()
        tape.backward(loss)
        idx = rng.choice(p.size, min(12, p.size), replace=False)
        num = numeric_grad(fn, p, h=1e-5, indices=idx)
        assert rel_error(p.grad.ravel()[idx], num, floor=1e-6).max() < 1e-3


def test_render_image_range_and_determinism():
    model = RadianceField(seed=0)
    cam = Camera(pose(t=(0.0, 0.0, 4.0)), focal=12.0, width=8, height=8)
    img, depth, acc = render_image(model, cam, 16, stratified=True, seed=9)
    img2, depth2, _ = render_image(model, cam, 16, stratified=True, seed=9)
    assert img.shape == (8, 8, 3) and depth.shape == (8, 8)
    assert np.isfinite(img).all() and (img >= 0).all() and (img <= 1).all()
    assert img.tobytes() == img2.tobytes() and depth.tobytes() == depth2.tobytes()
    assert ((depth >= cam.near - 1e-6) & (depth <= cam.far + 1e-6)).all()


# file formats

def test_png_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    write_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_png(tmp_path / "a.png"), img)


def test_pfm_round_trip_and_header(tmp_path, rng):
    d = rng.uniform(2, 6, (4, 6)).astype(np.float32)
    write_pfm(tmp_path / "d.pfm", d)
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n6 4\n-1.0\n")
    np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), d)
