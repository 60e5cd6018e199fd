import json
import struct

import numpy as np
import pytest

from advlab.io import (
    MAGIC,
    load_arrays,
    load_fit,
    load_params,
    load_rf,
    save_arrays,
    save_fit,
    save_params,
    save_rf,
    sha256_file,
)
from advlab.models import Activation, init_deep, init_two_layer
from advlab.ntk_rf import KernelSpec, rf_construct, single_anchor_fit
from advlab.numerics import RngStream, sample_sphere


def test_binary_layout(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5])}
    bin_path, json_path = save_arrays(tmp_path / "x", arrays, {"seed": 3})
    raw = bin_path.read_bytes()
    assert raw[:8] == MAGIC
    assert struct.unpack_from("<Q", raw, 8) == (2,)
    # header: count, (ndim=2, 2, 3), (ndim=1, 1), then 7 doubles
    assert len(raw) == 8 + 8 + 8 * 3 + 8 * 2 + 8 * 7
    assert np.array_equal(np.frombuffer(raw[-56:], "<f8"), np.r_[np.arange(6.0), 1.5])
    side = json.loads(json_path.read_text())
    assert side == {"arrays": ["a", "b"], "meta": {"seed": 3}}
    back, meta = load_arrays(tmp_path / "x")
    assert meta == {"seed": 3}
    assert all(np.array_equal(back[k], arrays[k]) for k in arrays)


def test_corrupt_checkpoint_rejected(tmp_path):
    bin_path, _ = save_arrays(tmp_path / "x", {"a": np.ones(3)})
    bin_path.write_bytes(bin_path.read_bytes() + b"\0" * 8)
    with pytest.raises(ValueError, match="trailing"):
        load_arrays(tmp_path / "x")
    bin_path.write_bytes(b"NOTMAGIC" + bin_path.read_bytes()[8:])
    with pytest.raises(ValueError):
        load_arrays(tmp_path / "x")


def test_deep_params_roundtrip(tmp_path):
    p = init_deep(RngStream(1), 16, 4, 3)
    save_params(tmp_path / "p", p, {"seed": 1})
    q, meta = load_params(tmp_path / "p")
    assert meta["kind"] == "deep" and meta["H"] == 3 and meta["seed"] == 1
    X = sample_sphere(RngStream(2), 4, n=5)
    assert np.array_equal(p.predict(X), q.predict(X))


def test_two_layer_params_roundtrip(tmp_path):
    p = init_two_layer(RngStream(1), 16, 4)
    save_params(tmp_path / "p", p)
    q, meta = load_params(tmp_path / "p")
    assert meta["kind"] == "two_layer" and meta["m"] == 16
    assert np.array_equal(p.w, q.w) and np.array_equal(p.signs, q.signs)


def test_fit_and_rf_roundtrip(tmp_path):
    fit = single_anchor_fit(KernelSpec(Activation("quad_relu"), "sphere_sqrt_d"), np.array([0.0, 1.0, 0.0]))
    save_fit(tmp_path / "f", fit)
    g = load_fit(tmp_path / "f")
    X = sample_sphere(RngStream(3), 3, n=4)
    assert np.array_equal(fit.predict(X), g.predict(X))
    model = rf_construct(fit, RngStream(4), 10)
    save_rf(tmp_path / "r", model)
    back = load_rf(tmp_path / "r")
    assert np.array_equal(model.predict(X), back.predict(X))


def test_save_params_rejects_unknown(tmp_path):
    with pytest.raises(TypeError):
        save_params(tmp_path / "p", object())


def test_sha256_stable(tmp_path):
    (tmp_path / "a").write_bytes(b"abc")
    assert sha256_file(tmp_path / "a") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
