"""Perturbation caps on the unit sphere, attacks, surrogate loss and a robust-loss oracle.

A cap is ``{x' : |x' - c| <= delta, |x'| = 1}``. Equivalently
``c.x' >= 1 - delta^2 / 2``, i.e. a geodesic ball of angle ``2 arcsin(delta / 2)``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .models import LOGISTIC, LogisticLoss, Model
from .numerics import RngStream

MEMBERSHIP_TOL = 1e-8
ATTACK_KINDS = ("identity", "random", "fgsm", "pgd")


def cap_angle(delta: float) -> float:
    """Geodesic half-angle of a cap with chordal radius ``delta``."""
    if delta >= 2.0:
        return np.pi
    return 2.0 * np.arcsin(delta / 2.0)


@dataclass(frozen=True)
class PerturbCap:
    center: np.ndarray
    delta: float

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if abs(np.linalg.norm(self.center) - 1.0) > MEMBERSHIP_TOL:
            raise ValueError("cap center must be on the unit sphere")

    def contains(self, x, tol: float = MEMBERSHIP_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(
            abs(np.linalg.norm(x) - 1.0) <= tol and np.linalg.norm(x - self.center) <= self.delta + tol
        )


def project_cap_batch(C: np.ndarray, delta: float, Xp: np.ndarray) -> np.ndarray:
    """Row-wise nearest point of the cap around ``C[i]`` to ``Xp[i]``.

    Points are first pushed radially onto the sphere; if the angle to the center
    exceeds the cap angle they are rotated back to the boundary along the same
    great circle.
    """
    C = np.atleast_2d(C)
    Xp = np.atleast_2d(np.asarray(Xp, dtype=float))
    if delta == 0:
        return C.copy()
    norms = np.linalg.norm(Xp, axis=1, keepdims=True)
    X = np.where(norms > 0, Xp / np.where(norms > 0, norms, 1.0), C)
    if delta >= 2.0:
        return X
    theta_max = cap_angle(delta)
    cos_t = np.sum(X * C, axis=1)
    out = X.copy()
    outside = cos_t < np.cos(theta_max)
    if np.any(outside):
        Co, Xo = C[outside], X[outside]
        tang = Xo - cos_t[outside, None] * Co
        tn = np.linalg.norm(tang, axis=1, keepdims=True)
        degenerate = tn[:, 0] < 1e-15
        if np.any(degenerate):
            # antipodal input: every boundary point is equally close; pick a fixed one
            for k in np.flatnonzero(degenerate):
                c = Co[k]
                e = np.zeros_like(c)
                e[int(np.argmin(np.abs(c)))] = 1.0
                t = e - (e @ c) * c
                tang[k] = t
                tn[k] = np.linalg.norm(t)
        u = tang / tn
        out[outside] = np.cos(theta_max) * Co + np.sin(theta_max) * u
    return out


def project_cap(cap: PerturbCap, xp: np.ndarray) -> np.ndarray:
    return project_cap_batch(cap.center[None, :], cap.delta, np.asarray(xp, dtype=float)[None, :])[0]


def sample_cap_batch(C: np.ndarray, delta: float, U: np.ndarray) -> np.ndarray:
    """Map points ``U`` in the open unit cube ``(n, d+1)`` into caps around ``C`` (n, d).

    The first d coordinates give a tangent direction through the Gaussian inverse
    CDF, the last one the geodesic radius (area-uniform in the small-cap limit).
    """
    C = np.atleast_2d(C)
    d = C.shape[1]
    if delta == 0 or d == 1:
        return C.copy()
    G = ndtri(np.clip(U[:, :d], 1e-12, 1 - 1e-12))
    T = G - np.sum(G * C, axis=1, keepdims=True) * C
    tn = np.linalg.norm(T, axis=1, keepdims=True)
    T = T / np.where(tn > 0, tn, 1.0)
    theta = cap_angle(delta) * U[:, d] ** (1.0 / (d - 1))
    X = np.cos(theta)[:, None] * C + np.sin(theta)[:, None] * T
    return project_cap_batch(C, delta, X)


def random_in_caps(rng: RngStream, C: np.ndarray, delta: float) -> np.ndarray:
    C = np.atleast_2d(C)
    U = rng.generator().random((C.shape[0], C.shape[1] + 1))
    return sample_cap_batch(C, delta, U)


def sobol_cap_samples(C: np.ndarray, delta: float, count: int, seed: int) -> np.ndarray:
    """``count`` scrambled-Sobol samples in each cap, shape ``(count, n, d)``.

    The sequence for a given seed is prefix-stable, so a larger ``count`` is a
    superset of a smaller one.
    """
    C = np.atleast_2d(C)
    n, d = C.shape
    engine = qmc.Sobol(d + 1, scramble=True, seed=seed)
    with warnings.catch_warnings():
        # balance properties need powers of two; prefix stability is what matters here
        warnings.simplefilter("ignore", UserWarning)
        U = engine.random(count)
    Ct = np.tile(C, (count, 1))
    Ut = np.repeat(U, n, axis=0)
    return sample_cap_batch(Ct, delta, Ut).reshape(count, n, d)


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    delta: float

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if len(self.y) != len(X):
            raise ValueError("X and y lengths differ")
        if not np.all(np.abs(self.y) == 1):
            raise ValueError("labels must be +1 or -1")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def caps(self) -> list[PerturbCap]:
        return [PerturbCap(x, self.delta) for x in self.X]

    def to_jsonl(self, path) -> None:
        lines = [json.dumps({"d": self.d, "delta": self.delta})]
        lines += [json.dumps({"x": x.tolist(), "y": int(y)}) for x, y in zip(self.X, self.y)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "Dataset":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        head, recs = rows[0], rows[1:]
        if "delta" not in head or "d" not in head:
            raise ValueError("first record must be a header with 'd' and 'delta'")
        X = np.array([r["x"] for r in recs], dtype=float).reshape(len(recs), head["d"])
        return cls(X, np.array([r["y"] for r in recs], dtype=float), float(head["delta"]))


def check_compatible(dataset: Dataset) -> tuple[bool, list[tuple[int, int]]]:
    """Compatible iff every differently-labelled pair is more than ``2 delta`` apart."""
    X, y = dataset.X, dataset.y
    D = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1)
    bad = (D <= 2 * dataset.delta) & (y[:, None] != y[None, :])
    pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(np.triu(bad, 1)))]
    return not pairs, pairs


def toy_dataset(rng: RngStream, n: int, d: int, delta: float, margin: float = 0.0) -> Dataset:
    """Random sphere points labelled by a random halfspace, kept compatible.

    Points with ``|v.x| < margin`` are redrawn; pairs that break compatibility are
    redrawn too.
    """
    g = rng.generator()
    v = g.standard_normal(d)
    v /= np.linalg.norm(v)
    X = np.empty((0, d))
    while len(X) < n:
        z = g.standard_normal(d)
        z /= np.linalg.norm(z)
        if abs(z @ v) < margin:
            continue
        yz = np.sign(z @ v) or 1.0
        if len(X):
            ys = np.where(X @ v >= 0, 1.0, -1.0)
            dist = np.linalg.norm(X - z, axis=1)
            if np.any((dist <= 2 * delta) & (ys != yz)):
                continue
        X = np.vstack([X, z])
    y = np.where(X @ v >= 0, 1.0, -1.0)
    return Dataset(X, y, delta)


# --------------------------------------------------------------------------
# attacks


@dataclass(frozen=True)
class AttackSpec:
    """Perturbation function. ``rng`` seeds random starts; example i uses ``rng.fork(i, restart)``.

    PGD takes ``steps`` ascent steps of length ``step_size`` along the normalized
    input gradient of the loss, projecting onto the cap after each one. Restart 0
    starts at the clean point; later restarts start uniformly in the cap. The
    returned point is the best iterate seen.
    """

    kind: str = "pgd"
    steps: int = 10
    step_size: float | None = None
    restarts: int = 1
    rng: RngStream = field(default_factory=lambda: RngStream(0))

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "pgd" and self.steps < 1:
            raise ValueError("pgd needs steps >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    def resolved_step(self, delta: float) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.kind == "fgsm":
            return delta
        return 2.5 * delta / self.steps


def _value_and_grad(model: Model, X: np.ndarray):
    if hasattr(model, "predict_and_input_grad"):
        return model.predict_and_input_grad(X)
    return model.predict(X), model.input_grad(X)


def _ascent(model: Model, ell: LogisticLoss, X: np.ndarray, y: np.ndarray):
    """Loss at ``X`` and the unit tangent ascent direction of the loss."""
    f, gx = _value_and_grad(model, X)
    g = ell.grad(f, y)[:, None] * gx
    # only the component tangent to the sphere moves the point within the cap
    g = g - np.sum(g * X, axis=1, keepdims=True) * X
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    return ell.value(f, y), np.where(gn > 0, g / np.where(gn > 0, gn, 1.0), 0.0)


def _pgd_from(model, ell, C, y, delta, X0, steps, step):
    X = X0
    best_x = X.copy()
    best_l = np.full(len(X), -np.inf)
    for k in range(steps + 1):
        if k < steps:
            cur, direction = _ascent(model, ell, X, y)
        else:
            cur = ell.value(model.predict(X), y)
        better = cur > best_l
        best_l = np.where(better, cur, best_l)
        best_x[better] = X[better]
        if k < steps:
            X = project_cap_batch(C, delta, X + step * direction)
    return best_x, best_l


def attack_batch(
    spec: AttackSpec,
    model: Model,
    X: np.ndarray,
    y: np.ndarray,
    delta: float,
    ell: LogisticLoss = LOGISTIC,
    index_offset: int = 0,
) -> np.ndarray:
    """Attack every row of ``X`` inside its own cap. Rows are independent."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if spec.kind == "identity" or delta == 0:
        return X.copy()
    idx = np.arange(n) + index_offset

    def starts(r: int) -> np.ndarray:
        rows = [random_in_caps(spec.rng.fork(int(i), r), X[k], delta)[0] for k, i in enumerate(idx)]
        return np.array(rows)

    if spec.kind == "random":
        return starts(0)
    if spec.kind == "fgsm":
        step = spec.resolved_step(delta)
        return project_cap_batch(X, delta, X + step * _ascent(model, ell, X, y)[1])
    step = spec.resolved_step(delta)
    best_x, best_l = _pgd_from(model, ell, X, y, delta, X.copy(), spec.steps, step)
    for r in range(1, spec.restarts):
        bx, bl = _pgd_from(model, ell, X, y, delta, starts(r), spec.steps, step)
        better = bl > best_l
        best_l = np.where(better, bl, best_l)
        best_x[better] = bx[better]
    return best_x


def attack(spec: AttackSpec, model: Model, cap: PerturbCap, y: float, ell: LogisticLoss = LOGISTIC, index: int = 0):
    """Single-example form of :func:`attack_batch`."""
    out = attack_batch(spec, model, cap.center[None, :], np.array([y], dtype=float), cap.delta, ell, index)[0]
    return out


def plain_loss(model: Model, dataset: Dataset, ell: LogisticLoss = LOGISTIC) -> float:
    return float(np.mean(ell.value(model.predict(dataset.X), dataset.y)))


def surrogate_loss(spec: AttackSpec, model: Model, dataset: Dataset, ell: LogisticLoss = LOGISTIC) -> float:
    Xa = attack_batch(spec, model, dataset.X, dataset.y, dataset.delta, ell)
    return float(np.mean(ell.value(model.predict(Xa), dataset.y)))


def robust_loss_oracle(
    model: Model,
    dataset: Dataset,
    ell: LogisticLoss = LOGISTIC,
    budget: int = 4,
    rng: RngStream = RngStream(0),
    per_example: bool = False,
):
    """Lower bound on the worst-case cap loss.

    Per example, the max loss over ``budget`` PGD restarts (50 steps each, the
    first from the clean point) and ``100 * budget`` quasi-random cap points. Both
    candidate sets grow by extension as ``budget`` grows, so the bound is
    monotone in ``budget``.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    X, y, delta = dataset.X, dataset.y, dataset.delta
    base = ell.value(model.predict(X), y)
    if delta == 0:
        return base if per_example else float(np.mean(base))
    spec = AttackSpec("pgd", steps=50, restarts=budget, rng=rng.fork(0))
    Xa = attack_batch(spec, model, X, y, delta, ell)
    best = np.maximum(base, ell.value(model.predict(Xa), y))
    seed = int(rng.fork(1).generator().integers(2**31))
    samples = sobol_cap_samples(X, delta, 100 * budget, seed)
    count, n, d = samples.shape
    vals = ell.value(model.predict(samples.reshape(-1, d)), np.tile(y, count)).reshape(count, n)
    best = np.maximum(best, vals.max(axis=0))
    return best if per_example else float(np.mean(best))
