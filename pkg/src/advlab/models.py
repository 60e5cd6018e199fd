"""Deep ReLU net with frozen input/output layers, and the symmetric two-layer net.

Scaling conventions differ on purpose:

* deep net: no explicit output scaling; ``A`` and every ``W^(h)`` start at
  N(0, 2/m), ``a`` at N(0, 1). Trainable weights are ``W^(1..H)`` only.
* two-layer net: ``f = m^{-1/2} (sum a_r s(w_r.x) + sum a'_r s(wbar_r.x))``
  with ``wbar_r = w_r`` and ``a'_r = -a_r`` at init, so ``f = 0`` there.

Both expose ``predict`` / ``input_grad`` on batches ``X`` of shape ``(n, d)``;
that pair is the whole interface the attacks need.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.special import expit, log_expit

from .numerics import RngStream, gaussian_mat, gaussian_vec, sample_sphere_radius

UNIT_TOL = 1e-8


class Model(Protocol):
    def predict(self, X: np.ndarray) -> np.ndarray: ...

    def input_grad(self, X: np.ndarray) -> np.ndarray: ...


def _check_unit(X: np.ndarray) -> None:
    norms = np.linalg.norm(X, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError("inputs must lie on the unit sphere")


# --------------------------------------------------------------------------
# activations and loss


@dataclass(frozen=True)
class Activation:
    """Pointwise activation with first and second derivatives.

    ``C`` bounds ``|s'|`` and the Lipschitz constant of ``s'`` where such a
    global constant exists (None otherwise).
    """

    kind: str = "softplus"

    def __post_init__(self):
        if self.kind not in ("relu", "softplus", "quad_relu"):
            raise ValueError(f"unknown activation {self.kind!r}")

    @property
    def C(self) -> float | None:
        return {"relu": None, "softplus": 1.0, "quad_relu": None}[self.kind]

    @property
    def deriv_lipschitz(self) -> float | None:
        return {"relu": None, "softplus": 0.25, "quad_relu": 2.0}[self.kind]

    def value(self, z):
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "softplus":
            z = np.asarray(z, dtype=float)
            return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
        return np.square(np.maximum(z, 0.0))

    def deriv(self, z):
        if self.kind == "relu":
            return (np.asarray(z) >= 0).astype(float)
        if self.kind == "softplus":
            return expit(z)
        return 2.0 * np.maximum(z, 0.0)

    def second(self, z):
        if self.kind == "relu":
            return np.zeros_like(np.asarray(z, dtype=float))
        if self.kind == "softplus":
            s = expit(z)
            return s * (1.0 - s)
        return 2.0 * (np.asarray(z) >= 0).astype(float)

    def deriv_bound(self, radius: float) -> float:
        """sup |s'(w.x)| over unit x and ``|w| <= radius``."""
        if self.kind == "quad_relu":
            return 2.0 * radius
        return 1.0


@dataclass(frozen=True)
class LogisticLoss:
    """``l(f, y) = log(1 + exp(-y f))`` for labels in {+1, -1}."""

    @staticmethod
    def _check(y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.abs(y) == 1.0):
            raise ValueError("labels must be +1 or -1")
        return y

    def value(self, f, y):
        y = self._check(y)
        return -log_expit(y * np.asarray(f, dtype=float))

    def grad(self, f, y):
        y = self._check(y)
        return -y * expit(-y * np.asarray(f, dtype=float))


LOGISTIC = LogisticLoss()


def loss(f, y, ell: LogisticLoss = LOGISTIC):
    return ell.value(f, y)


def loss_grad(f, y, ell: LogisticLoss = LOGISTIC):
    return ell.grad(f, y)


# --------------------------------------------------------------------------
# deep ReLU network


@dataclass(frozen=True)
class DeepNetParams:
    A: np.ndarray
    layers: tuple[np.ndarray, ...]
    a: np.ndarray

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def H(self) -> int:
        return len(self.layers)

    def with_layers(self, layers) -> "DeepNetParams":
        return DeepNetParams(self.A, tuple(layers), self.a)

    def predict(self, X):
        return deep_predict(self, X)

    def input_grad(self, X):
        return deep_input_grad(self, X)

    def predict_and_input_grad(self, X):
        f, cache = _deep_forward_batch(self, np.atleast_2d(X))
        back = _deep_backward(self, cache)
        return f, (back[0] @ self.layers[0]) @ self.A


@dataclass
class DeepCache:
    """Per-layer activations of one or more inputs (rows).

    ``pre[h]`` is the pre-activation of layer h (``pre[0] = A x``), ``post[h]`` the
    post-activation, ``mask[h-1]`` the diagonal of ``D^(h)``.
    """

    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    mask: list = field(default_factory=list)


def init_deep(rng: RngStream, m: int, d: int, H: int) -> DeepNetParams:
    if H < 1:
        raise ValueError("depth H must be >= 1")
    if m < d:
        raise ValueError(f"width m={m} must be >= input dimension d={d}")
    A = gaussian_mat(rng.fork(0), m, d, 2.0 / m)
    layers = tuple(gaussian_mat(rng.fork(1, h), m, m, 2.0 / m) for h in range(H))
    a = gaussian_vec(rng.fork(2), m, 1.0)
    # A and a are never trained
    A.setflags(write=False)
    a.setflags(write=False)
    return DeepNetParams(A, layers, a)


def _deep_forward_batch(p: DeepNetParams, X: np.ndarray) -> tuple[np.ndarray, DeepCache]:
    cache = DeepCache()
    h = X @ p.A.T
    cache.pre.append(h)
    cache.post.append(h)
    for W in p.layers:
        z = h @ W.T
        mask = z >= 0
        h = np.where(mask, z, 0.0)
        cache.pre.append(z)
        cache.post.append(h)
        cache.mask.append(mask)
    return h @ p.a, cache


def forward_deep(p: DeepNetParams, x: np.ndarray) -> tuple[float, DeepCache]:
    x = np.asarray(x, dtype=float)
    _check_unit(x)
    f, cache = _deep_forward_batch(p, x[None, :])
    single = DeepCache([v[0] for v in cache.pre], [v[0] for v in cache.post], [v[0] for v in cache.mask])
    return float(f[0]), single


def deep_predict(p: DeepNetParams, X: np.ndarray) -> np.ndarray:
    return _deep_forward_batch(p, np.atleast_2d(X))[0]


def _deep_backward(p: DeepNetParams, cache: DeepCache) -> list[np.ndarray]:
    """Row-wise vectors ``b_h = a^T D^(H) W^(H) ... D^(h)`` for h = H..1 (returned as index h-1)."""
    n = cache.pre[0].shape[0]
    back = [None] * p.H
    b = np.broadcast_to(p.a, (n, p.m)) * cache.mask[-1]
    back[p.H - 1] = b
    for h in range(p.H - 1, 0, -1):
        b = (b @ p.layers[h]) * cache.mask[h - 1]
        back[h - 1] = b
    return back


def grad_deep(p: DeepNetParams, x: np.ndarray) -> list[np.ndarray]:
    """Gradient of f w.r.t. each trainable ``W^(h)``: ``(D^(h) W^(h+1)^T ... a) x^(h-1)^T``."""
    x = np.asarray(x, dtype=float)
    _check_unit(x)
    _, cache = _deep_forward_batch(p, x[None, :])
    back = _deep_backward(p, cache)
    return [np.outer(back[h][0], cache.post[h][0]) for h in range(p.H)]


def deep_forward_batch(p: DeepNetParams, X: np.ndarray) -> tuple[np.ndarray, DeepCache]:
    """Outputs and activations for a batch; the cache can be passed to :func:`deep_weighted_grad`."""
    return _deep_forward_batch(p, np.atleast_2d(X))


def deep_weighted_grad(
    p: DeepNetParams, X: np.ndarray, coef: np.ndarray, cache: DeepCache | None = None
) -> list[np.ndarray]:
    """``sum_i coef_i * grad_W f(W, x_i)`` per layer, in one batched pass."""
    if cache is None:
        _, cache = _deep_forward_batch(p, np.atleast_2d(X))
    back = _deep_backward(p, cache)
    return [(back[h] * coef[:, None]).T @ cache.post[h] for h in range(p.H)]


def deep_input_grad(p: DeepNetParams, X: np.ndarray) -> np.ndarray:
    _, cache = _deep_forward_batch(p, np.atleast_2d(X))
    back = _deep_backward(p, cache)
    return (back[0] @ p.layers[0]) @ p.A


def deep_backward_vectors(p: DeepNetParams, X: np.ndarray) -> tuple[list[np.ndarray], DeepCache]:
    _, cache = _deep_forward_batch(p, np.atleast_2d(X))
    return _deep_backward(p, cache), cache


# --------------------------------------------------------------------------
# symmetric two-layer network


@dataclass(frozen=True)
class TwoLayerParams:
    """Paired hidden weights ``w`` / ``wbar`` (each ``(m/2, d)``) and output signs.

    The output weights are ``a_r = signs[r]`` for the ``w`` half and
    ``a'_r = -signs[r]`` for the ``wbar`` half.
    """

    w: np.ndarray
    wbar: np.ndarray
    signs: np.ndarray

    @property
    def m(self) -> int:
        return 2 * self.w.shape[0]

    @property
    def d(self) -> int:
        return self.w.shape[1]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.w, self.wbar])

    def displaced(self, dw: np.ndarray, dwbar: np.ndarray) -> "TwoLayerParams":
        return TwoLayerParams(self.w + dw, self.wbar + dwbar, self.signs)


def init_two_layer(rng: RngStream, m: int, d: int, init: str = "gaussian_identity") -> TwoLayerParams:
    if m < 2 or m % 2:
        raise ValueError(f"width m={m} must be a positive even number")
    half = m // 2
    if init == "gaussian_identity":
        w = gaussian_mat(rng.fork(0), half, d, 1.0)
    elif init == "sphere_sqrt_d":
        w = sample_sphere_radius(rng.fork(0), d, np.sqrt(d), n=half)
    else:
        raise ValueError(f"unknown init law {init!r}")
    signs = np.where(rng.fork(1).generator().random(half) < 0.5, 1.0, -1.0)
    return TwoLayerParams(w, w.copy(), signs)


def two_layer_predict(p: TwoLayerParams, act: Activation, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    s = act.value(X @ p.w.T) @ p.signs - act.value(X @ p.wbar.T) @ p.signs
    return s / np.sqrt(p.m)


def forward_two_layer(p: TwoLayerParams, act: Activation, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    _check_unit(x)
    return float(two_layer_predict(p, act, x[None, :])[0])


def grad_two_layer(p: TwoLayerParams, act: Activation, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(df/dw, df/dwbar)``, each ``(m/2, d)``: row r is ``m^{-1/2} a_r s'(w_r.x) x``."""
    x = np.asarray(x, dtype=float)
    _check_unit(x)
    c = 1.0 / np.sqrt(p.m)
    gw = c * (p.signs * act.deriv(p.w @ x))[:, None] * x[None, :]
    gwb = -c * (p.signs * act.deriv(p.wbar @ x))[:, None] * x[None, :]
    return gw, gwb


def two_layer_weighted_grad(p: TwoLayerParams, act: Activation, X: np.ndarray, coef: np.ndarray):
    X = np.atleast_2d(X)
    c = 1.0 / np.sqrt(p.m)
    gw = c * p.signs[:, None] * (act.deriv(p.w @ X.T) @ (coef[:, None] * X))
    gwb = -c * p.signs[:, None] * (act.deriv(p.wbar @ X.T) @ (coef[:, None] * X))
    return gw, gwb


def two_layer_input_grad(p: TwoLayerParams, act: Activation, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    g = (act.deriv(X @ p.w.T) * p.signs) @ p.w - (act.deriv(X @ p.wbar.T) * p.signs) @ p.wbar
    return g / np.sqrt(p.m)


@dataclass(frozen=True)
class TwoLayerNet:
    """Two-layer parameters bound to an activation; satisfies :class:`Model`."""

    params: TwoLayerParams
    act: Activation = Activation("softplus")

    def predict(self, X):
        return two_layer_predict(self.params, self.act, X)

    def input_grad(self, X):
        return two_layer_input_grad(self.params, self.act, X)

    def predict_and_input_grad(self, X):
        p, act = self.params, self.act
        X = np.atleast_2d(X)
        Z, Zb = X @ p.w.T, X @ p.wbar.T
        c = 1.0 / np.sqrt(p.m)
        f = c * (act.value(Z) @ p.signs - act.value(Zb) @ p.signs)
        g = c * ((act.deriv(Z) * p.signs) @ p.w - (act.deriv(Zb) * p.signs) @ p.wbar)
        return f, g


@dataclass(frozen=True)
class LinearModel:
    """``f(x) = v.x``; a test fixture with a closed-form attack optimum."""

    v: np.ndarray

    def predict(self, X):
        return np.atleast_2d(X) @ self.v

    def input_grad(self, X):
        return np.broadcast_to(self.v, np.atleast_2d(X).shape).copy()


def as_model(params, act: Activation | None = None) -> Model:
    if isinstance(params, TwoLayerParams):
        return TwoLayerNet(params, act or Activation("softplus"))
    return params
