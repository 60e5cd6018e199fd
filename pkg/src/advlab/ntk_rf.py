"""Two-layer NTK, random-feature approximation, and the near-init robust construction.

The kernel is ``K(x, y) = E_w <x s'(w.x), y s'(w.y)> = (x.y) E_w[s'(w.x) s'(w.y)]``
with ``w`` drawn from the initialization law. For the ReLU and quadratic-ReLU
derivatives the expectation is an arc-cosine kernel and is the same under
``N(0, I)`` and the uniform law on the radius-sqrt(d) sphere (both are
rotation invariant with ``E|w|^2 = d``).

A kernel fit ``h(x) = sum_t a_t K(x, x_t)`` is exactly representable with
random features: ``h(x) = E_w[c(w).x s'(w.x)]`` where
``c(w) = sum_t a_t x_t s'(w.x_t)``, so ``M`` sampled directions with
``c_i = c(w_i) / M`` give an unbiased finite-sum approximant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import ndtri
from scipy.stats import qmc

from .attacks import Dataset, random_in_caps
from .models import Activation, TwoLayerParams
from .numerics import RngStream, gaussian_mat, normalize_rows, sample_sphere_radius

INIT_LAWS = ("gaussian", "sphere_sqrt_d")
COND_LIMIT = 1e12


@dataclass(frozen=True)
class KernelSpec:
    activation: Activation = field(default_factory=lambda: Activation("relu"))
    init_law: str = "gaussian"
    mc_samples: int = 200_000
    seed: int = 0

    def __post_init__(self):
        if self.init_law not in INIT_LAWS:
            raise ValueError(f"unknown init law {self.init_law!r}")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")

    @property
    def has_closed_form(self) -> bool:
        return self.activation.kind in ("relu", "quad_relu")


def sample_directions(rng: RngStream, d: int, M: int, law: str) -> np.ndarray:
    if law == "gaussian":
        return gaussian_mat(rng, M, d, 1.0)
    if law == "sphere_sqrt_d":
        return sample_sphere_radius(rng, d, np.sqrt(d), n=M)
    raise ValueError(f"unknown init law {law!r}")


def lift(X: np.ndarray) -> np.ndarray:
    """``x -> [x, 1] / |[x, 1]|``: moves data onto the open upper hemisphere of R^(d+1)."""
    X = np.atleast_2d(X)
    return normalize_rows(np.hstack([X, np.ones((X.shape[0], 1))]))


def _cos_angle(X, Y):
    return np.clip(np.atleast_2d(X) @ np.atleast_2d(Y).T, -1.0, 1.0)


def ntk_closed_form(act: Activation, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Exact kernel matrix for unit-norm rows, ReLU or quadratic ReLU."""
    c = _cos_angle(X, Y)
    theta = np.arccos(c)
    if act.kind == "relu":
        return c * (np.pi - theta) / (2 * np.pi)
    if act.kind == "quad_relu":
        # E[4 (w.x)_+ (w.y)_+] = (2/pi) (sin t + (pi - t) cos t)
        return c * (2 / np.pi) * (np.sin(theta) + (np.pi - theta) * c)
    raise ValueError(f"no closed form for {act.kind}")


def ntk_mc(spec: KernelSpec, rng: RngStream, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Monte Carlo kernel value and its standard error."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    W = sample_directions(rng, len(x), spec.mc_samples, spec.init_law)
    act = spec.activation
    vals = (x @ y) * act.deriv(W @ x) * act.deriv(W @ y)
    se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else np.inf
    return float(vals.mean()), float(se)


def ntk_gram(spec: KernelSpec, X: np.ndarray, Y: np.ndarray | None = None) -> np.ndarray:
    """Kernel matrix; closed form when available, otherwise MC with one shared feature draw.

    Sharing the draw makes the MC Gram matrix exactly PSD.
    """
    X = np.atleast_2d(X)
    Y = X if Y is None else np.atleast_2d(Y)
    if spec.has_closed_form:
        return ntk_closed_form(spec.activation, X, Y)
    W = sample_directions(RngStream(spec.seed).fork(7), X.shape[1], spec.mc_samples, spec.init_law)
    act = spec.activation
    SX, SY = act.deriv(X @ W.T), act.deriv(Y @ W.T)
    return (X @ Y.T) * (SX @ SY.T) / W.shape[0]


# --------------------------------------------------------------------------
# kernel ridge fit on cap-augmented anchors


@dataclass(frozen=True)
class KernelFit:
    spec: KernelSpec
    anchors: np.ndarray
    coeffs: np.ndarray
    targets: np.ndarray
    lam: float
    lifted: bool = False

    def embed(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return lift(X) if self.lifted else X

    def predict(self, X: np.ndarray) -> np.ndarray:
        return ntk_gram(self.spec, self.embed(X), self.anchors) @ self.coeffs

    def anchor_residual(self) -> float:
        pred = ntk_gram(self.spec, self.anchors) @ self.coeffs
        return float(np.max(np.abs(pred - self.targets)))

    def rf_norm_bound(self, directions: np.ndarray) -> float:
        """``sum_t |a_t| * sup |s'|`` over the given directions; bounds ``|c(w)|`` pointwise."""
        radius = float(np.max(np.linalg.norm(directions, axis=1)))
        return float(np.sum(np.abs(self.coeffs)) * self.spec.activation.deriv_bound(radius))


def kernel_fit(
    spec: KernelSpec,
    dataset: Dataset,
    cap_samples_per_point: int,
    targets: np.ndarray | None = None,
    lam: float = 1e-6,
    rng: RngStream = RngStream(0),
    lifted: bool = False,
) -> KernelFit:
    """Ridge regression on the data points plus random points of each perturbation cap.

    ``targets`` defaults to the labels; every cap sample inherits its point's target.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    tgt = dataset.y if targets is None else np.asarray(targets, dtype=float)
    parts, tparts = [dataset.X], [tgt]
    for k in range(cap_samples_per_point):
        parts.append(random_in_caps(rng.fork(k), dataset.X, dataset.delta))
        tparts.append(tgt)
    anchors = np.vstack(parts)
    if lifted:
        anchors = lift(anchors)
    t = np.concatenate(tparts)
    K = ntk_gram(spec, anchors)
    K = 0.5 * (K + K.T)
    if lam == 0:
        cond = np.linalg.cond(K)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise ValueError(f"Gram matrix is ill-conditioned (cond={cond:.3g}); use lam > 0")
    coeffs = linalg.solve(K + lam * np.eye(len(K)), t, assume_a="sym")
    return KernelFit(spec, anchors, coeffs, t, lam, lifted)


def single_anchor_fit(spec: KernelSpec, x0: np.ndarray, a: float = 1.0) -> KernelFit:
    """``h(x) = a K(x, x0)`` as a fit object."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    return KernelFit(spec, x0, np.array([a]), np.array([a * ntk_gram(spec, x0)[0, 0]]), 0.0)


# --------------------------------------------------------------------------
# random features


@dataclass(frozen=True)
class RfModel:
    """``h_hat(x) = sum_r (c_r . x) s'(w_r . x)``."""

    directions: np.ndarray
    coeffs: np.ndarray
    activation: Activation
    lifted: bool = False

    def __post_init__(self):
        if self.directions.shape != self.coeffs.shape:
            raise ValueError("directions and coeffs must have the same shape")

    @property
    def M(self) -> int:
        return self.directions.shape[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.lifted:
            X = lift(X)
        return np.sum((X @ self.coeffs.T) * self.activation.deriv(X @ self.directions.T), axis=1)


def rf_from_directions(fit: KernelFit, directions: np.ndarray) -> RfModel:
    """Importance-sampling coefficients ``c_i = c(w_i) / M`` for the given directions."""
    W = np.atleast_2d(directions)
    S = fit.spec.activation.deriv(W @ fit.anchors.T)  # (M, T)
    C = S @ (fit.coeffs[:, None] * fit.anchors) / W.shape[0]
    return RfModel(W, C, fit.spec.activation, fit.lifted)


def rf_construct(fit: KernelFit, rng: RngStream, M: int, init_law: str | None = None) -> RfModel:
    law = init_law or fit.spec.init_law
    return rf_from_directions(fit, sample_directions(rng, fit.anchors.shape[1], M, law))


def sphere_probes(d: int, count: int, seed: int = 0) -> np.ndarray:
    """Prefix-stable quasi-random points on the unit sphere."""
    engine = qmc.Sobol(d, scramble=True, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        U = engine.random(count)
    return normalize_rows(ndtri(np.clip(U, 1e-12, 1 - 1e-12)))


def rf_sup_error(
    model: RfModel,
    fit: KernelFit,
    probe_count: int,
    refine_steps: int = 20,
    seed: int = 0,
    d: int | None = None,
) -> float:
    """Estimate ``sup_x |h(x) - h_hat(x)|`` over the unit sphere.

    Each quasi-random probe is refined by a short randomized hill climb whose
    perturbations come from that probe's own stream, so the estimate for ``N``
    probes is a max over a subset of the ones for ``2N``.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    if d is None:
        d = fit.anchors.shape[1] - (1 if fit.lifted else 0)
    X = sphere_probes(d, probe_count, seed)

    def err(P):
        return np.abs(fit.predict(P) - model.predict(P))

    best = err(X)
    if refine_steps > 0:
        root = RngStream(seed).fork(99)
        noise = np.stack([root.fork(i).generator().standard_normal((refine_steps, d)) for i in range(probe_count)])
        step = np.full(probe_count, 0.05)
        for k in range(refine_steps):
            cand = normalize_rows(X + step[:, None] * noise[:, k, :])
            e = err(cand)
            up = e > best
            X[up] = cand[up]
            best = np.where(up, e, best)
            step = np.where(up, step * 1.2, step * 0.5)
    return float(best.max())


# --------------------------------------------------------------------------
# embedding into the symmetric two-layer net


@dataclass(frozen=True)
class Embedding:
    params: TwoLayerParams
    displacement_norm: float


def embed_rf_into_net(model: RfModel, params0: TwoLayerParams) -> Embedding:
    """Displace the paired weights so the first-order term of the net equals ``h_hat``.

    ``w_i = w_i0 + sqrt(m/4) a_i c_i`` and ``wbar_i = wbar_i0 - sqrt(m/4) a_i c_i``.
    The output sign ``a_i`` appears because the first-order term of pair i is
    ``a_i (w_i - w_i0 - (wbar_i - wbar_i0)) . x s'(w_i0 . x) / sqrt(m)``.
    """
    if model.directions.shape != params0.w.shape:
        raise ValueError(
            f"random-feature model has {model.directions.shape}, net hidden half has {params0.w.shape}"
        )
    if not np.array_equal(model.directions, params0.w) or not np.array_equal(params0.w, params0.wbar):
        raise ValueError("random-feature directions must be the net's initial hidden weights")
    shift = np.sqrt(params0.m / 4) * params0.signs[:, None] * model.coeffs
    p = params0.displaced(shift, -shift)
    norm = np.sqrt(params0.m / 2) * np.sqrt(np.sum(model.coeffs**2))
    return Embedding(p, float(norm))


def linearized_output(params0: TwoLayerParams, params: TwoLayerParams, act: Activation, X: np.ndarray) -> np.ndarray:
    """First-order Taylor term of the two-layer net around ``params0``."""
    X = np.atleast_2d(X)
    dw, dwb = params.w - params0.w, params.wbar - params0.wbar
    t1 = np.sum((X @ dw.T) * act.deriv(X @ params0.w.T) * params0.signs, axis=1)
    t2 = np.sum((X @ dwb.T) * act.deriv(X @ params0.wbar.T) * params0.signs, axis=1)
    return (t1 - t2) / np.sqrt(params0.m)


def save_gram_csv(path, K: np.ndarray) -> None:
    np.savetxt(path, K, delimiter=",", fmt="%.17g")
