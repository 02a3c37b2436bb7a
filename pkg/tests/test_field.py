import math

import numpy as np
import pytest

from physicsnerf import diffmath as dm
from physicsnerf.field import (
    PARAM_BUDGET,
    CheckpointError,
    EncodingConfig,
    FieldConfig,
    NonFiniteError,
    RadianceField,
    encode,
    load_field,
    read_tensors,
    save_field,
    write_tensors,
)

from conftest import analytic_grad, numeric_grad, rel_error

SMALL = FieldConfig(hidden_width=16, color_head_width=8)


def test_encode_origin():
    out = encode(np.zeros((1, 3)), 10).values[0]
    np.testing.assert_array_equal(out[:3], 0.0)
    np.testing.assert_array_equal(out[3:33], 0.0)  # sin block
    np.testing.assert_array_equal(out[33:], 1.0)  # cos block


def test_encode_single_frequency_definition():
    x = np.array([[0.3, -0.7, 1.1]])
    out = encode(x, 1, scale=1.0).values[0]
    np.testing.assert_allclose(out, np.concatenate([x[0], np.sin(math.pi * x[0]), np.cos(math.pi * x[0])]),
                               rtol=1e-6)


def test_encode_scale_multiplies_coordinates():
    x = np.array([[0.1, 0.2, 0.3]])
    np.testing.assert_allclose(encode(x, 3, scale=2.0).values, encode(2 * x, 3, scale=1.0).values, rtol=1e-6)


@pytest.mark.parametrize("L,include,expected", [(10, True, 63), (4, True, 27), (10, False, 60), (0, True, 3)])
def test_encoded_dimension(L, include, expected):
    # 3 * include_input + 3 * 2 * L
    assert EncodingConfig(include_input=include).encoded_dim(L) == expected
    assert encode(np.zeros((2, 3)), L, include_input=include).shape == (2, expected)


def test_encoding_requires_two_scales():
    with pytest.raises(ValueError):
        EncodingConfig(scales=[1.0])


def test_default_parameter_budget():
    n = RadianceField().num_parameters()
    assert PARAM_BUDGET[0] <= n <= PARAM_BUDGET[1]
    assert n == 626_020


def test_output_ranges_fresh_network(rng):
    model = RadianceField(seed=7)
    pts = rng.uniform(-4, 4, (256, 3))
    dirs = rng.normal(size=(256, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    with dm.no_grad():
        out = model(pts, dirs)
    assert np.isfinite(out.sigma.values).all() and (out.sigma.values >= 0).all()
    assert ((out.rgb.values >= 0) & (out.rgb.values <= 1)).all()


def test_density_is_view_independent(rng):
    model = RadianceField(SMALL, seed=2)
    pos = np.tile(rng.uniform(-1, 1, (1, 3)), (100, 1))
    dirs = rng.normal(size=(100, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    with dm.no_grad():
        out = model(pos, dirs)
    sigma = out.sigma.values
    assert (sigma == sigma[0]).all()
    assert np.ptp(out.rgb.values, axis=0).max() > 0  # color does react to direction


def test_density_path_matches_full_eval(rng):
    model = RadianceField(SMALL, seed=2)
    pts = rng.uniform(-1, 1, (10, 3))
    dirs = np.tile([[0.0, 1.0, 0.0]], (10, 1))
    with dm.no_grad():
        np.testing.assert_array_equal(model.density(pts).raw_sigma.values, model(pts, dirs).raw_sigma.values)


def test_non_unit_direction_rejected():
    model = RadianceField(SMALL)
    with pytest.raises(ValueError, match="unit"):
        model(np.zeros((1, 3)), np.array([[0.0, 0.0, 2.0]]))


def test_non_finite_parameter_names_layer():
    model = RadianceField(SMALL)
    model.params["branch1.layer3.weight"].values[0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="branch1.layer3"):
        with dm.no_grad():
            model(np.full((2, 3), 0.5), np.tile([[1.0, 0.0, 0.0]], (2, 1)))


def test_non_finite_input_rejected():
    model = RadianceField(SMALL)
    with pytest.raises(NonFiniteError, match="input"):
        model.density(np.array([[np.inf, 0.0, 0.0]]))


def test_rgb_gradient_end_to_end(rng):
    model = RadianceField(SMALL, seed=4, dtype=np.float64)
    pts = rng.uniform(-1, 1, (4, 3))
    dirs = rng.normal(size=(4, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    w = model.params["branch0.layer2.weight"]

    def fn():
        return dm.sum(model(pts, dirs).rgb)

    (g,), _ = analytic_grad(fn, [w])
    idx = rng.choice(w.size, 10, replace=False)
    assert rel_error(g.ravel()[idx], numeric_grad(fn, w, indices=idx), floor=1e-7).max() < 1e-4


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = RadianceField(seed=11)
    path = tmp_path / "f.ckpt"
    save_field(path, model)
    assert path.read_bytes()[:5] == b"PNRF1"
    other = load_field(path, RadianceField(seed=99))
    for k in model.params:
        assert model.params[k].values.tobytes() == other.params[k].values.tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "x.ckpt"
    write_tensors(path, {"ab": np.array([1.5, -2.0], dtype=np.float32)})
    raw = path.read_bytes()
    assert raw == (b"PNRF1" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"ab"
                   + (2).to_bytes(4, "little") + np.array([1.5, -2.0], dtype="<f4").tobytes())
    np.testing.assert_array_equal(read_tensors(path)["ab"], [1.5, -2.0])


def test_corrupted_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE!" + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="magic"):
        read_tensors(bad)
    trunc = tmp_path / "trunc.ckpt"
    write_tensors(trunc, {"w": np.ones(10, dtype=np.float32)})
    trunc.write_bytes(trunc.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        read_tensors(trunc)


def test_checkpoint_layer_mismatch(tmp_path):
    path = tmp_path / "s.ckpt"
    save_field(path, RadianceField(SMALL))
    with pytest.raises(CheckpointError):
        load_field(path, RadianceField(FieldConfig(hidden_width=8, color_head_width=8)))
