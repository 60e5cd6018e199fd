"""Full-batch adversarial training and the initialization diagnostics.

Ball conventions (they differ by a factor sqrt(m) because the two-layer net carries
its own 1/sqrt(m)):

* deep net:   ``|W^(h) - W0^(h)|_F <= R / sqrt(m)`` for every trainable layer h
* two-layer:  ``|W - W0|_F <= R`` over all hidden weights stacked

Each step attacks the current iterate, then differentiates the loss at the
attacked inputs with those inputs held fixed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, Dataset, attack_batch, check_compatible
from .models import (
    LOGISTIC,
    Activation,
    DeepNetParams,
    TwoLayerNet,
    TwoLayerParams,
    deep_backward_vectors,
    deep_forward_batch,
    deep_predict,
    deep_weighted_grad,
    grad_deep,
    grad_two_layer,
    init_deep,
    init_two_layer,
    two_layer_predict,
    two_layer_weighted_grad,
)
from .numerics import RngStream, fro_norm, sample_sphere

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class DeepArch:
    m: int
    d: int
    H: int


@dataclass(frozen=True)
class TwoLayerArch:
    m: int
    d: int
    activation: str = "softplus"
    init: str = "gaussian_identity"


@dataclass(frozen=True)
class TrainConfig:
    alpha: float
    T: int
    R: float
    arch: DeepArch | TwoLayerArch
    attack: AttackSpec = field(default_factory=lambda: AttackSpec("identity"))
    seed: int = 0
    project: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not self.R > 0:
            raise ValueError("R must be positive")


@dataclass
class TrainRun:
    """Per-step log of a run. Row t describes iterate ``W_t`` (t = 0 .. T-1).

    ``excursion[t, h]`` is ``|W_t^(h) - W_0^(h)|_F`` for the deep net and the
    single stacked norm for the two-layer net.
    """

    config: TrainConfig
    loss_surrogate: np.ndarray
    loss_plain: np.ndarray
    excursion: np.ndarray
    proj_active: np.ndarray
    init_params: object
    final_params: object
    best_params: object
    diverged: bool = False
    reason: str = ""

    @property
    def steps(self) -> int:
        return len(self.loss_surrogate)

    @property
    def argmin(self) -> int:
        return int(np.argmin(self.loss_surrogate))

    @property
    def min_loss(self) -> float:
        return float(np.min(self.loss_surrogate))

    def prefix_min(self) -> np.ndarray:
        return np.minimum.accumulate(self.loss_surrogate)

    def summary(self) -> dict:
        return {
            "steps": self.steps,
            "argmin_step": self.argmin,
            "min_surrogate_loss": self.min_loss,
            "final_surrogate_loss": float(self.loss_surrogate[-1]),
            "final_plain_loss": float(self.loss_plain[-1]),
            "max_excursion": float(np.max(self.excursion)),
            "diverged": self.diverged,
            "reason": self.reason,
        }


class TrainingDiverged(RuntimeError):
    def __init__(self, run: TrainRun):
        super().__init__(run.reason)
        self.run = run


def ball_radius(params, R: float) -> float:
    if isinstance(params, DeepNetParams):
        return R / np.sqrt(params.m)
    return R


def project_ball(params, init, R: float):
    """Radial projection onto B(R) around ``init``; returns ``(params, active)``.

    Deep nets are projected layer by layer; ``A`` and ``a`` are left alone.
    """
    radius = ball_radius(init, R)
    if isinstance(params, DeepNetParams):
        layers, active = [], False
        for W, W0 in zip(params.layers, init.layers):
            delta = W - W0
            nrm = fro_norm(delta)
            if nrm > radius:
                W = W0 + delta * (radius / nrm)
                active = True
            layers.append(W)
        return params.with_layers(layers), active
    dw, dwb = params.w - init.w, params.wbar - init.wbar
    nrm = np.sqrt(fro_norm(dw) ** 2 + fro_norm(dwb) ** 2)
    if nrm <= radius:
        return params, False
    s = radius / nrm
    return TwoLayerParams(init.w + s * dw, init.wbar + s * dwb, init.signs), True


def init_params(cfg: TrainConfig):
    rng = RngStream(cfg.seed).fork(0)
    if isinstance(cfg.arch, DeepArch):
        return init_deep(rng, cfg.arch.m, cfg.arch.d, cfg.arch.H)
    return init_two_layer(rng, cfg.arch.m, cfg.arch.d, cfg.arch.init)


def _excursion(params, init) -> np.ndarray:
    if isinstance(params, DeepNetParams):
        return np.array([fro_norm(W - W0) for W, W0 in zip(params.layers, init.layers)])
    return np.array([np.sqrt(fro_norm(params.w - init.w) ** 2 + fro_norm(params.wbar - init.wbar) ** 2)])


def _run(cfg: TrainConfig, dataset: Dataset, project: bool, params0=None) -> TrainRun:
    ok, pairs = check_compatible(dataset)
    if not ok:
        raise ValueError(f"dataset is not compatible with its perturbation sets: {pairs[:5]}")
    W0 = params0 if params0 is not None else init_params(cfg)
    deep = isinstance(W0, DeepNetParams)
    act = None if deep else Activation(cfg.arch.activation)
    X, y, n = dataset.X, dataset.y, dataset.n
    ell = LOGISTIC

    def model(p):
        return p if deep else TwoLayerNet(p, act)

    T = cfg.T
    width = W0.H if deep else 1
    l_sur = np.empty(T)
    l_plain = np.empty(T)
    exc = np.empty((T, width))
    active = np.zeros(T, dtype=bool)
    W = W0
    best, best_val = W0, np.inf
    reason = ""
    for t in range(T):
        spec_t = dataclasses.replace(cfg.attack, rng=cfg.attack.rng.fork(t))
        Xa = attack_batch(spec_t, model(W), X, y, dataset.delta, ell)
        cache = None
        if deep:
            f_adv, cache = deep_forward_batch(W, Xa)
        else:
            f_adv = model(W).predict(Xa)
        l_sur[t] = float(np.mean(ell.value(f_adv, y)))
        # the identity attack returns a copy of X, so the plain loss needs no second pass
        f_clean = f_adv if cfg.attack.kind == "identity" else model(W).predict(X)
        l_plain[t] = float(np.mean(ell.value(f_clean, y)))
        exc[t] = _excursion(W, W0)
        if not np.isfinite(l_sur[t]) or l_sur[t] > DIVERGENCE_LIMIT:
            reason = f"diverged: step={t} surrogate_loss={float(l_sur[t])!r}"
            T = t + 1
            break
        if l_sur[t] < best_val:
            best, best_val = W, l_sur[t]
        coef = ell.grad(f_adv, y) / n
        if deep:
            grads = deep_weighted_grad(W, Xa, coef, cache)
            V = W.with_layers([Wh - cfg.alpha * g for Wh, g in zip(W.layers, grads)])
        else:
            gw, gwb = two_layer_weighted_grad(W, act, Xa, coef)
            V = W.displaced(-cfg.alpha * gw, -cfg.alpha * gwb)
        if project:
            W, active[t] = project_ball(V, W0, cfg.R)
        else:
            W = V
    run = TrainRun(
        cfg, l_sur[:T], l_plain[:T], exc[:T], active[:T], W0, W, best, diverged=bool(reason), reason=reason
    )
    if reason:
        raise TrainingDiverged(run)
    return run


def train_projected(cfg: TrainConfig, dataset: Dataset, params0=None) -> TrainRun:
    """Projected gradient descent on the surrogate loss (projection can be switched off by ``cfg.project``)."""
    return _run(cfg, dataset, cfg.project, params0)


def train_plain(cfg: TrainConfig, dataset: Dataset, params0=None) -> TrainRun:
    """Gradient descent without projection, for the two-layer net."""
    if isinstance(cfg.arch, DeepArch):
        raise ValueError("train_plain expects a two-layer architecture")
    if Activation(cfg.arch.activation).kind == "relu":
        raise ValueError("train_plain needs a smooth activation")
    return _run(cfg, dataset, False, params0)


def within_3R(run: TrainRun) -> np.ndarray:
    """Per-step flag ``|W_t - W_0|_F <= 3R`` (two-layer convention)."""
    return run.excursion[:, 0] <= 3 * run.config.R


# --------------------------------------------------------------------------
# near-linearity


def near_linearity_residuals(p1, p2, X: np.ndarray, act: Activation | None = None) -> np.ndarray:
    """Row-wise ``|f(W2,x) - f(W1,x) - <grad f(W1,x), W2 - W1>|`` for a batch of inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if isinstance(p1, DeepNetParams):
        back, cache = deep_backward_vectors(p1, X)
        f1 = cache.post[-1] @ p1.a
        # <b_h x^(h-1)^T, Delta_h> = b_h . (Delta_h x^(h-1))
        lin = sum(
            np.sum(back[h] * (cache.post[h] @ (p2.layers[h] - p1.layers[h]).T), axis=1) for h in range(p1.H)
        )
        f2 = deep_predict(p2, X)
    else:
        act = act or Activation("softplus")
        c = 1.0 / np.sqrt(p1.m)
        dw, dwb = p2.w - p1.w, p2.wbar - p1.wbar
        lin = c * (
            np.sum(act.deriv(X @ p1.w.T) * (X @ dw.T) * p1.signs, axis=1)
            - np.sum(act.deriv(X @ p1.wbar.T) * (X @ dwb.T) * p1.signs, axis=1)
        )
        f1, f2 = two_layer_predict(p1, act, X), two_layer_predict(p2, act, X)
    return np.abs(f2 - f1 - lin)


def near_linearity_residual(p1, p2, x: np.ndarray, act: Activation | None = None) -> float:
    """``|f(W2,x) - f(W1,x) - <grad f(W1,x), W2 - W1>|``."""
    x = np.asarray(x, dtype=float)
    if isinstance(p1, DeepNetParams):
        g = grad_deep(p1, x)
        lin = sum(float(np.sum(gh * (B - A))) for gh, A, B in zip(g, p1.layers, p2.layers))
        f1, f2 = deep_predict(p1, x)[0], deep_predict(p2, x)[0]
    else:
        act = act or Activation("softplus")
        gw, gwb = grad_two_layer(p1, act, x)
        lin = float(np.sum(gw * (p2.w - p1.w)) + np.sum(gwb * (p2.wbar - p1.wbar)))
        f1, f2 = two_layer_predict(p1, act, x)[0], two_layer_predict(p2, act, x)[0]
    return abs(f2 - f1 - lin)


def near_linearity_sweep(widths, d: int = 10, H: int = 2, trials: int = 100, R: float = 1.0, seed: int = 0) -> dict:
    """Residual statistics at random displacements, per width.

    Two-layer: ``|Delta|_F = 1`` (stacked), one draw per trial, reported as
    ``max residual * sqrt(m) / |Delta|^2``. Deep ReLU: one displacement per width
    with ``|Delta^(h)|_F = R / sqrt(m)`` for every layer, evaluated at ``trials``
    random inputs, reported as the median residual.
    """
    root = RngStream(seed)
    act = Activation("softplus")
    out = {"two_layer_scaled_max": {}, "deep_median": {}}
    for m in widths:
        scaled = []
        for k in range(trials):
            p = init_two_layer(root.fork(0, m, k), m, d)
            D = root.fork(1, m, k).generator().standard_normal((2, *p.w.shape))
            D /= np.linalg.norm(D)
            x = sample_sphere(root.fork(2, m, k), d, n=1)
            r = near_linearity_residuals(p, p.displaced(D[0], D[1]), x, act)[0]
            scaled.append(r * np.sqrt(m))
        out["two_layer_scaled_max"][m] = float(max(scaled))
        p = init_deep(root.fork(3, m), m, d, H)
        g = root.fork(4, m).generator()
        layers = []
        for W in p.layers:
            D = g.standard_normal(W.shape)
            layers.append(W + D * (R / np.sqrt(m)) / np.linalg.norm(D))
        X = sample_sphere(root.fork(5, m), d, n=trials)
        out["deep_median"][m] = float(np.median(near_linearity_residuals(p, p.with_layers(layers), X)))
    return out


# --------------------------------------------------------------------------
# concentration diagnostics at initialization

HIDDEN_NORM_RANGE = (2.0 / 3.0, 4.0 / 3.0)
A_NORM_RANGE = (0.9, 1.1)
GRAD_SCALE_RANGE = (0.05, 5.0)
MEMBERSHIP_RATE = 0.99


def lemma_diagnostics(params: DeepNetParams, trials: int = 100, rng: RngStream = RngStream(1)) -> dict:
    """Empirical checks of the initialization bounds on a fresh deep net.

    Reports the output-layer norm ratio, the hidden-norm membership rate, the
    backward-vector norms ``|a^T D^(H) W^(H) ... D^(h)|`` and the per-layer gradient
    norms, each scaled by ``sqrt(mH)``.
    """
    m, H = params.m, params.H
    X = sample_sphere(rng, params.d, n=trials)
    back, cache = deep_backward_vectors(params, X)
    hidden = np.stack([np.linalg.norm(v, axis=1) for v in cache.post])  # (H+1, trials)
    lo, hi = HIDDEN_NORM_RANGE
    rate = float(np.mean((hidden >= lo) & (hidden <= hi)))
    scale = np.sqrt(m * H)
    back_ratio = np.stack([np.linalg.norm(b, axis=1) for b in back]) / scale
    # |f'^(h)|_F = |b_h| |x^(h-1)| because the gradient is an outer product
    grad_ratio = np.stack(
        [np.linalg.norm(back[h], axis=1) * np.linalg.norm(cache.post[h], axis=1) for h in range(H)]
    ) / scale
    a_ratio = float(np.linalg.norm(params.a) / np.sqrt(m))
    report = {
        "m": m,
        "H": H,
        "trials": trials,
        "a_norm_ratio": a_ratio,
        "hidden_norm_min": float(hidden.min()),
        "hidden_norm_max": float(hidden.max()),
        "hidden_membership_rate": rate,
        # with x^(0) = A x and A ~ N(0, 2/m) every |x^(h)| concentrates at sqrt(2), outside [2/3, 4/3]
        "hidden_norm_mean": hidden.mean(axis=1).tolist(),
        "backward_ratio_mean": back_ratio.mean(axis=1).tolist(),
        "grad_ratio_mean": grad_ratio.mean(axis=1).tolist(),
        "grad_ratio_min": float(grad_ratio.min()),
        "grad_ratio_max": float(grad_ratio.max()),
    }
    report["pass"] = {
        "a_norm": A_NORM_RANGE[0] <= a_ratio <= A_NORM_RANGE[1],
        "hidden_norm": rate >= MEMBERSHIP_RATE,
        "grad_scale": GRAD_SCALE_RANGE[0] <= report["grad_ratio_min"]
        and report["grad_ratio_max"] <= GRAD_SCALE_RANGE[1],
    }
    return report


def grad_scale_sweep(widths, d: int = 10, H: int = 2, trials: int = 20, seed: int = 0) -> dict[int, float]:
    """Mean ``|f'^(h)|_F / sqrt(mH)`` over layers and random inputs, per width."""
    out = {}
    for m in widths:
        p = init_deep(RngStream(seed).fork(m), m, d, H)
        out[m] = float(np.mean(lemma_diagnostics(p, trials, RngStream(seed).fork(m, 1))["grad_ratio_mean"]))
    return out


def width_step_size(m: int, H: int, eps: float, scale: float = 1.0) -> float:
    """Step size of order ``eps / (m H^2)`` with an explicit leading constant."""
    return scale * eps / (m * H**2)
