"""Robust shattering of the clustered grid construction.

Clusters sit at ``c_i = (6 i delta, 0, ..., 0)`` and hold ``d`` points
``c_i + eps e_j``. For any labelling, each cluster gets two radius-``delta``
balls, one holding its positive points and one its negative points; a function
that is constant on every ball then realizes the labelling. If a class
interpolates any ``delta``-separated set robustly, it shatters all
``[n/2] * d`` grid points.

Points here live in R^d, not on the sphere. The trained-net interpolator maps
them onto the sphere in R^(d+1) with :func:`lift_map`.
"""

from __future__ import annotations

import dataclasses
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .attacks import AttackSpec, Dataset, check_compatible
from .models import Activation, TwoLayerNet
from .numerics import RngStream
from .training import TrainConfig, TrainingDiverged, TwoLayerArch, train_plain

SEPARATION_SLACK = 1e-6  # relative gap kept between a ball and its hyperplane


@dataclass(frozen=True)
class GridDataset:
    centers: np.ndarray  # (k, d)
    points: np.ndarray  # (k * d, d), cluster-major
    delta: float
    epsilon: float

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def all_pairs_separated(self) -> bool:
        """Literal membership in the set of configurations with all pairs > 2 delta."""
        D = np.linalg.norm(self.points[:, None] - self.points[None], axis=-1)
        return bool(np.all(D[np.triu_indices(self.size, 1)] > 2 * self.delta))

    def to_dataset(self, labeling) -> Dataset:
        return Dataset(self.points, np.asarray(labeling, dtype=float), self.delta)


def build_grid(n: int, d: int, delta: float, epsilon: float) -> GridDataset:
    if n < 2 or d < 1:
        raise ValueError("need n >= 2 and d >= 1")
    if not (0 < epsilon <= delta):
        raise ValueError("need 0 < epsilon <= delta")
    k = n // 2
    centers = np.zeros((k, d))
    centers[:, 0] = 6 * delta * np.arange(1, k + 1)
    points = (centers[:, None, :] + epsilon * np.eye(d)[None]).reshape(k * d, d)
    grid = GridDataset(centers, points, delta, epsilon)
    cluster = np.repeat(np.arange(k), d)
    D = np.linalg.norm(points[:, None] - points[None], axis=-1)
    cross = cluster[:, None] != cluster[None, :]
    if np.any(cross) and np.min(D[cross]) <= 2 * delta:
        raise ValueError("clusters are within 2*delta of each other")
    return grid


@dataclass(frozen=True)
class BallPair:
    """Positive ball ``centers[0]`` and negative ball ``centers[1]`` of one cluster."""

    cluster: int
    centers: np.ndarray  # (2, d)
    radius: float
    normal: np.ndarray
    sentinel: tuple[bool, bool] = (False, False)


@dataclass
class BallSeparation:
    pairs: list[BallPair]
    violations: list[tuple[int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def ball_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """All ball centers and their labels (+1 for positive balls)."""
        C = np.vstack([p.centers for p in self.pairs])
        y = np.tile([1.0, -1.0], len(self.pairs))
        return C, y


def _sentinel(grid: GridDataset, i: int) -> np.ndarray:
    # mirror of cluster i on the negative first axis: far from every real ball
    # and 6*delta from the other sentinels
    s = np.zeros(grid.d)
    s[0] = -6 * grid.delta * (i + 1)
    return s


def _push(members: np.ndarray, direction: np.ndarray, c: np.ndarray, target: float, r: float) -> np.ndarray:
    """Centroid of ``members`` moved along ``direction`` to clear the hyperplane through ``c``.

    The ball is pushed most of the way to the farthest position that still holds
    every member, which keeps the gap to the opposite ball as wide as possible.
    """
    u = members.mean(axis=0)
    need = max(0.0, target - direction @ (u - c))
    P = members - u
    proj = P @ direction
    disc = r**2 - np.sum(P**2, axis=1) + proj**2
    s_max = float(np.min(proj + np.sqrt(np.maximum(disc, 0.0)))) if np.all(disc >= 0) else -np.inf
    s = need if s_max <= need else need + 0.95 * (s_max - need)
    return u + s * direction


def separating_balls(grid: GridDataset, labeling) -> BallSeparation:
    """Radius-delta balls per cluster, checked directly rather than through existence constants.

    With both classes present, each ball starts at its class centroid and is
    pushed along the hyperplane normal until it clears the hyperplane, then
    further while it still holds its points. A cluster
    with one class uses its centroid and a far sentinel ball for the absent class.
    """
    y = np.asarray(labeling, dtype=float).reshape(-1)
    if y.shape[0] != grid.size or not np.all(np.abs(y) == 1):
        raise ValueError(f"labeling must have {grid.size} entries in {{+1, -1}}")
    r = grid.delta
    pairs, violations = [], []
    for i in range(grid.k):
        yi = y[i * grid.d : (i + 1) * grid.d]
        pts = grid.points[i * grid.d : (i + 1) * grid.d]
        c = grid.centers[i]
        normal = yi.copy()
        nhat = normal / np.linalg.norm(normal)
        pos, neg = pts[yi > 0], pts[yi < 0]
        if len(pos) and len(neg):
            target = r * (1 + SEPARATION_SLACK)
            up = _push(pos, nhat, c, target, r)
            un = _push(neg, -nhat, c, target, r)
            pair = BallPair(i, np.stack([up, un]), r, normal)
            if nhat @ (up - c) < r or nhat @ (un - c) > -r:
                violations.append((i, "ball crosses the separating hyperplane"))
        elif len(pos):
            pair = BallPair(i, np.stack([pos.mean(axis=0), _sentinel(grid, i)]), r, normal, (False, True))
        else:
            pair = BallPair(i, np.stack([_sentinel(grid, i), neg.mean(axis=0)]), r, normal, (True, False))
        for cls, members in ((0, pos), (1, neg)):
            if len(members) and np.max(np.linalg.norm(members - pair.centers[cls], axis=1)) > r:
                violations.append((i, f"{'positive' if cls == 0 else 'negative'} points not inside their ball"))
        pairs.append(pair)
    sep = BallSeparation(pairs)
    C, _ = sep.ball_centers()
    D = np.linalg.norm(C[:, None] - C[None], axis=-1)
    iu = np.triu_indices(len(C), 1)
    if np.any(D[iu] <= 2 * r):
        a, b = iu[0][np.argmin(D[iu])], iu[1][np.argmin(D[iu])]
        violations.append((int(a // 2), f"balls {a} and {b} intersect"))
    sep.violations = violations
    return sep


# --------------------------------------------------------------------------
# interpolators


@dataclass(frozen=True)
class BallClassifier:
    """Label of the nearest ball, distance measured to the ball surface."""

    centers: np.ndarray
    labels: np.ndarray
    radius: float

    @classmethod
    def from_separation(cls, sep: BallSeparation) -> "BallClassifier":
        C, y = sep.ball_centers()
        return cls(C, y, sep.pairs[0].radius)

    def score(self, X: np.ndarray) -> np.ndarray:
        D = np.linalg.norm(np.atleast_2d(X)[:, None, :] - self.centers[None], axis=-1) - self.radius
        d_pos = np.min(np.where(self.labels > 0, D, np.inf), axis=1)
        d_neg = np.min(np.where(self.labels < 0, D, np.inf), axis=1)
        return d_neg - d_pos


@dataclass(frozen=True)
class ConstantClassifier:
    value: float = 1.0

    def score(self, X):
        return np.full(np.atleast_2d(X).shape[0], self.value)


def lift_map(X: np.ndarray, origin: np.ndarray, scale: float) -> np.ndarray:
    """``x -> [scale (x - origin), 1] / norm``, a map from R^d onto the upper hemisphere.

    It is ``scale``-Lipschitz, so a ball of radius r lands inside the cap of
    chordal radius ``scale * r`` around the image of its center.
    """
    Z = np.hstack([scale * (np.atleast_2d(X) - origin), np.ones((np.atleast_2d(X).shape[0], 1))])
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)


@dataclass(frozen=True)
class NetInterpolatorConfig:
    m: int = 4096
    T: int = 5000
    alpha: float = 32.0
    attack_steps: int = 10
    lift_scale: float = 4.0
    activation: str = "softplus"
    seed: int = 0


@dataclass(frozen=True)
class LiftedNetClassifier:
    net: TwoLayerNet
    origin: np.ndarray
    scale: float
    train_loss: float

    def score(self, X):
        return self.net.predict(lift_map(X, self.origin, self.scale))


def train_net_interpolator(
    points: np.ndarray, labels: np.ndarray, radius: float, cfg: NetInterpolatorConfig, robust: bool = True
) -> LiftedNetClassifier:
    """Two-layer net trained on lifted points; with ``robust`` it is PGD-trained on caps.

    The cap radius is ``scale * radius`` (the image of the ball fits inside it),
    clipped so differently labelled caps stay disjoint.
    """
    origin = points.mean(axis=0)
    Z = lift_map(points, origin, cfg.lift_scale)
    cap = cfg.lift_scale * radius if robust else 0.0
    D = np.linalg.norm(Z[:, None] - Z[None], axis=-1)
    cross = labels[:, None] != labels[None, :]
    if np.any(cross):
        cap = min(cap, 0.49 * float(np.min(D[cross])))
    ds = Dataset(Z, labels, cap)
    attack = AttackSpec("pgd", steps=cfg.attack_steps, rng=RngStream(cfg.seed).fork(1)) if robust else AttackSpec("identity")
    tcfg = TrainConfig(
        alpha=cfg.alpha,
        T=cfg.T,
        R=1.0,
        arch=TwoLayerArch(cfg.m, Z.shape[1], cfg.activation),
        attack=attack,
        seed=cfg.seed,
    )
    try:
        run = train_plain(tcfg, ds)
        params, loss = run.best_params, run.min_loss
    except TrainingDiverged as exc:
        params, loss = exc.run.best_params, float("nan")
    return LiftedNetClassifier(TwoLayerNet(params, Activation(cfg.activation)), origin, cfg.lift_scale, loss)


# --------------------------------------------------------------------------
# shattering checks


def ball_probes(center: np.ndarray, radius: float, count: int, seed: int = 0) -> np.ndarray:
    """Center, the 2d axis extremes and ``count`` quasi-random points of a closed ball."""
    d = len(center)
    extremes = center + radius * np.vstack([np.eye(d), -np.eye(d)])
    pts = [center[None], extremes]
    if count > 0:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            U = qmc.Sobol(d + 1, scramble=True, seed=seed).random(count)
        G = ndtri(np.clip(U[:, :d], 1e-12, 1 - 1e-12))
        G /= np.linalg.norm(G, axis=1, keepdims=True)
        pts.append(center + radius * (U[:, d:] ** (1.0 / d)) * G)
    return np.vstack(pts)


@dataclass
class ShatterResult:
    passed: bool
    min_margin: float
    failures: int


def shatter_details(grid: GridDataset, interpolator, labeling, probes_per_ball: int = 200, seed: int = 0) -> ShatterResult:
    """Check the interpolator on every grid point and on probes of every non-sentinel separating ball."""
    y = np.asarray(labeling, dtype=float)
    sep = separating_balls(grid, y)
    if not sep.ok:
        return ShatterResult(False, -np.inf, len(sep.violations))
    C, cy = sep.ball_centers()
    # sentinel balls hold no grid point, so nothing is required of the interpolator there
    real = np.array([not s for pair in sep.pairs for s in pair.sentinel])
    X = [grid.points]
    Y = [y]
    for c, lab in zip(C[real], cy[real]):
        P = ball_probes(c, grid.delta, probes_per_ball, seed)
        X.append(P)
        Y.append(np.full(len(P), lab))
    X, Y = np.vstack(X), np.concatenate(Y)
    margins = Y * interpolator.score(X)
    return ShatterResult(bool(np.all(margins > 0)), float(margins.min()), int(np.sum(margins <= 0)))


def robust_shatter_check(grid, interpolator, labeling, probes_per_ball: int = 200, seed: int = 0) -> bool:
    return shatter_details(grid, interpolator, labeling, probes_per_ball, seed).passed


def all_labelings(size: int):
    for bits in itertools.product((1.0, -1.0), repeat=size):
        yield np.array(bits)


def ball_classifier_sweep(grid: GridDataset, probes_per_ball: int = 200) -> list[dict]:
    """Ball-classifier check over every labeling, in lexicographic order."""
    rows = []
    for idx, lab in enumerate(all_labelings(grid.size)):
        sep = separating_balls(grid, lab)
        res = (
            shatter_details(grid, BallClassifier.from_separation(sep), lab, probes_per_ball)
            if sep.ok
            else ShatterResult(False, -np.inf, len(sep.violations))
        )
        rows.append({"labeling": idx, "passed": res.passed, "min_margin": res.min_margin})
    return rows


def net_shatter_check(grid: GridDataset, labeling, cfg: NetInterpolatorConfig, probes_per_ball: int = 200) -> ShatterResult:
    """Robustly train a net on the separating balls of ``labeling``, then check it."""
    sep = separating_balls(grid, labeling)
    if not sep.ok:
        return ShatterResult(False, -np.inf, len(sep.violations))
    C, cy = sep.ball_centers()
    clf = train_net_interpolator(C, cy, grid.delta, cfg, robust=True)
    return shatter_details(grid, clf, labeling, probes_per_ball)


def net_plain_check(grid: GridDataset, labeling, cfg: NetInterpolatorConfig) -> bool:
    """Plain (non-robust) interpolation of the grid points themselves."""
    y = np.asarray(labeling, dtype=float)
    clf = train_net_interpolator(grid.points, y, grid.delta, cfg, robust=False)
    return bool(np.all(y * clf.score(grid.points) > 0))


def capacity_gap_probe(
    n_list,
    d: int,
    width_grid,
    delta: float = 0.05,
    labelings: int = 20,
    base: NetInterpolatorConfig = NetInterpolatorConfig(),
    probes_per_ball: int = 50,
    seed: int = 0,
) -> dict:
    """Smallest width passing all sampled labelings, robust vs plain, for each n."""
    widths = sorted(width_grid)
    if not widths:
        raise ValueError("width_grid is empty")
    report = {"d": d, "widths": widths, "rows": []}
    for n in n_list:
        grid = build_grid(n, d, delta, delta / 4)
        g = RngStream(seed).fork(n).generator()
        labs = [np.where(g.random(grid.size) < 0.5, 1.0, -1.0) for _ in range(labelings)]
        row = {"n": n, "robust_min_width": None, "plain_min_width": None}
        for m in widths:
            cfg = dataclasses.replace(base, m=m)
            if row["plain_min_width"] is None and all(net_plain_check(grid, lab, cfg) for lab in labs):
                row["plain_min_width"] = m
            if row["robust_min_width"] is None and all(
                net_shatter_check(grid, lab, cfg, probes_per_ball).passed for lab in labs
            ):
                row["robust_min_width"] = m
        report["rows"].append(row)
    return report
