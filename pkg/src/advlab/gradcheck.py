"""Finite-difference checks of the analytic parameter gradients."""

from __future__ import annotations

import numpy as np

from .models import (
    Activation,
    TwoLayerParams,
    deep_predict,
    forward_deep,
    grad_deep,
    grad_two_layer,
    init_deep,
    init_two_layer,
    two_layer_predict,
)
from .numerics import RngStream, sample_sphere


def kink_free(p, x: np.ndarray, margin: float = 1e-4) -> bool:
    """All hidden pre-activations of the deep net at ``x`` are at least ``margin`` from 0."""
    _, cache = forward_deep(p, x)
    return all(np.min(np.abs(z)) > margin for z in cache.pre[1:])


def _fd_matrix(fn, W: np.ndarray, step: float) -> np.ndarray:
    W = W.copy()
    g = np.empty_like(W)
    for i in np.ndindex(W.shape):
        old = W[i]
        W[i] = old + step
        fp = fn(W)
        W[i] = old - step
        fm = fn(W)
        W[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def two_layer_case(p: TwoLayerParams, act: Activation, x: np.ndarray, step: float) -> float:
    """Max entrywise error over both weight matrices, relative to the largest gradient entry."""
    gw, gwb = grad_two_layer(p, act, x)
    fw = _fd_matrix(lambda w: two_layer_predict(TwoLayerParams(w, p.wbar, p.signs), act, x)[0], p.w, step)
    fb = _fd_matrix(lambda w: two_layer_predict(TwoLayerParams(p.w, w, p.signs), act, x)[0], p.wbar, step)
    scale = max(np.max(np.abs(gw)), np.max(np.abs(gwb)), 1e-12)
    return float(max(np.max(np.abs(fw - gw)), np.max(np.abs(fb - gwb))) / scale)


def deep_case(p, x: np.ndarray, step: float, rng: np.random.Generator) -> float:
    """Directional derivative along a random unit-Frobenius direction per layer."""
    grads = grad_deep(p, x)
    worst = 0.0
    for h in range(p.H):
        D = rng.standard_normal(p.layers[h].shape)
        D /= np.linalg.norm(D)

        def f_at(s):
            layers = list(p.layers)
            layers[h] = layers[h] + s * D
            return deep_predict(p.with_layers(layers), x)[0]

        fd = (f_at(step) - f_at(-step)) / (2 * step)
        an = float(np.sum(grads[h] * D))
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-8))
    return worst


def gradcheck(
    arch: str,
    m: int,
    d: int,
    cases: int,
    seed: int = 0,
    H: int = 2,
    activation: str = "softplus",
    step: float = 1e-5,
    displace: float = 0.3,
) -> np.ndarray:
    """Relative gradient error for ``cases`` random (parameters, input) pairs.

    Two-layer parameters are displaced from initialization by ``displace`` times
    Gaussian noise so the net is not identically zero. Deep-net inputs that land
    within 1e-4 of a ReLU kink are skipped and redrawn.
    """
    root = RngStream(seed)
    errs = []
    if arch == "two_layer":
        act = Activation(activation)
        for c in range(cases):
            p = init_two_layer(root.fork(c, 0), m, d)
            g = root.fork(c, 1).generator()
            p = p.displaced(displace * g.standard_normal(p.w.shape), displace * g.standard_normal(p.w.shape))
            x = sample_sphere(root.fork(c, 2), d)
            errs.append(two_layer_case(p, act, x, step))
    elif arch == "deep":
        p = init_deep(root.fork(0), m, d, H)
        k = 0
        while len(errs) < cases:
            x = sample_sphere(root.fork(1, k), d)
            k += 1
            if not kink_free(p, x):
                continue
            errs.append(deep_case(p, x, step, root.fork(2, k).generator()))
    else:
        raise ValueError(f"unknown arch {arch!r}")
    return np.array(errs)
