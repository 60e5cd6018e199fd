"""Checkpoints: a flat binary record plus a JSON sidecar.

Binary layout (little endian)::

    b"ADVLAB01"  uint64 n_arrays
    per array:   uint64 ndim, uint64 dims[ndim]
    then every array's float64 entries in row-major order, in the same order

The sidecar ``<stem>.json`` lists the array names in order and carries free-form
metadata (m, d, H, activation, seed, ...).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .models import Activation, DeepNetParams, TwoLayerParams
from .ntk_rf import KernelFit, KernelSpec, RfModel

MAGIC = b"ADVLAB01"


def save_arrays(stem, arrays: dict[str, np.ndarray], meta: dict | None = None) -> tuple[Path, Path]:
    stem = Path(stem)
    names = list(arrays)
    header = bytearray(MAGIC)
    header += struct.pack("<Q", len(names))
    for name in names:
        a = np.asarray(arrays[name])
        header += struct.pack("<Q", a.ndim)
        header += struct.pack(f"<{a.ndim}Q", *a.shape)
    body = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names)
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.write_bytes(bytes(header) + body)
    json_path.write_text(json.dumps({"arrays": names, "meta": meta or {}}, indent=2, sort_keys=True))
    return bin_path, json_path


def load_arrays(stem) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError("not an advlab checkpoint")
    pos = 8
    (count,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if count != len(side["arrays"]):
        raise ValueError("sidecar and binary disagree on the number of arrays")
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        shapes.append(struct.unpack_from(f"<{ndim}Q", raw, pos))
        pos += 8 * ndim
    out = {}
    for name, shape in zip(side["arrays"], shapes):
        size = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    return out, side["meta"]


def save_params(stem, params, meta: dict | None = None):
    meta = dict(meta or {})
    if isinstance(params, DeepNetParams):
        arrays = {"A": params.A, **{f"W{h + 1}": W for h, W in enumerate(params.layers)}, "a": params.a}
        meta.update(kind="deep", m=params.m, d=params.d, H=params.H)
    elif isinstance(params, TwoLayerParams):
        arrays = {"w": params.w, "wbar": params.wbar, "signs": params.signs}
        meta.update(kind="two_layer", m=params.m, d=params.d)
    else:
        raise TypeError(f"cannot checkpoint {type(params).__name__}")
    return save_arrays(stem, arrays, meta)


def load_params(stem):
    arrays, meta = load_arrays(stem)
    if meta.get("kind") == "deep":
        layers = tuple(arrays[f"W{h + 1}"] for h in range(meta["H"]))
        return DeepNetParams(arrays["A"], layers, arrays["a"]), meta
    if meta.get("kind") == "two_layer":
        return TwoLayerParams(arrays["w"], arrays["wbar"], arrays["signs"]), meta
    raise ValueError(f"unknown checkpoint kind {meta.get('kind')!r}")


def save_fit(stem, fit: KernelFit, meta: dict | None = None):
    meta = dict(meta or {})
    meta.update(
        kind="kernel_fit",
        activation=fit.spec.activation.kind,
        init_law=fit.spec.init_law,
        mc_samples=fit.spec.mc_samples,
        kernel_seed=fit.spec.seed,
        lam=fit.lam,
        lifted=fit.lifted,
    )
    return save_arrays(stem, {"anchors": fit.anchors, "coeffs": fit.coeffs, "targets": fit.targets}, meta)


def load_fit(stem) -> KernelFit:
    arrays, meta = load_arrays(stem)
    spec = KernelSpec(Activation(meta["activation"]), meta["init_law"], meta["mc_samples"], meta["kernel_seed"])
    return KernelFit(spec, arrays["anchors"], arrays["coeffs"], arrays["targets"], meta["lam"], meta["lifted"])


def save_rf(stem, model: RfModel, meta: dict | None = None):
    meta = dict(meta or {})
    meta.update(kind="rf_model", activation=model.activation.kind, lifted=model.lifted, M=model.M)
    return save_arrays(stem, {"directions": model.directions, "coeffs": model.coeffs}, meta)


def load_rf(stem) -> RfModel:
    arrays, meta = load_arrays(stem)
    return RfModel(arrays["directions"], arrays["coeffs"], Activation(meta["activation"]), meta["lifted"])


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
