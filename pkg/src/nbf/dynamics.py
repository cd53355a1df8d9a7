"""Discrete-time systems x[k+1] = F(x[k]) + v[k] and their linear relaxations.

Each component of F is affine plus a weighted sum of univariate terms
``weight * g(x_j)`` with g in {cube, sin, cos}. That covers the three
built-in benchmarks and custom systems declared in a config file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from nbf.noise import DiagonalGaussian
from nbf.relaxation import Hyperrectangle, LinearRelaxation
from nbf.sets import BoxSet, Difference, SetExpr, Singleton, Union, circ, rect

TERM_KINDS = ("cube", "sin", "cos")


@dataclass(frozen=True)
class Term:
    """``weight * g(x[source])`` added to component ``target``."""

    target: int
    source: int
    kind: str
    weight: float

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ValueError(f"unknown term kind {self.kind!r}; expected one of {TERM_KINDS}")


def _g(kind: str, t):
    if kind == "cube":
        return t * t * t
    if kind == "sin":
        return np.sin(t)
    return np.cos(t)


def _dg(kind: str, t):
    if kind == "cube":
        return 3.0 * t * t
    if kind == "sin":
        return np.cos(t)
    return -np.sin(t)


def _stationary_points(kind: str, s: np.ndarray, l: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Candidates t in [l, u] with g'(t) = s; returns (N, K) with NaN padding."""
    if kind == "cube":
        r = np.sqrt(np.where(s >= 0.0, s / 3.0, np.nan))
        cands = np.stack([r, -r], axis=1)
    else:
        ok = np.abs(s) <= 1.0
        sc = np.clip(s, -1.0, 1.0)
        if kind == "sin":
            base = np.stack([np.arccos(sc), -np.arccos(sc)], axis=1)
        else:
            a = np.arcsin(-sc)
            base = np.stack([a, np.pi - a], axis=1)
        base = np.where(ok[:, None], base, np.nan)
        two_pi = 2.0 * np.pi
        kmin = math.floor(np.min(l) / two_pi) - 1
        kmax = math.ceil(np.max(u) / two_pi) + 1
        shifts = two_pi * np.arange(kmin, kmax + 1)
        cands = (base[:, :, None] + shifts[None, None, :]).reshape(len(s), -1)
    inside = (cands >= l[:, None]) & (cands <= u[:, None])
    return np.where(inside, cands, np.nan)


def _offset_range(kind: str, s, l, u):
    """min and max of g(t) - s t over [l, u], from endpoints and stationary points."""
    cands = np.concatenate([l[:, None], u[:, None], _stationary_points(kind, s, l, u)], axis=1)
    vals = _g(kind, cands) - s[:, None] * cands
    return np.nanmin(vals, axis=1), np.nanmax(vals, axis=1)


def relax_univariate(kind: str, l, u):
    """Linear sandwich of g on each interval [l, u].

    Two candidate slopes are tried, the chord slope and the derivative at the
    midpoint; each side keeps the one whose line is tighter at the midpoint
    (equivalently, of smaller area). Offsets come from the exact extrema of
    g(t) - s t, so the lines are sound for any interval sign configuration.
    Returns (lower_slope, lower_icpt, upper_slope, upper_icpt).
    """
    l = np.asarray(l, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    mid = (l + u) / 2.0
    width = u - l
    degenerate = width <= 0.0
    chord = np.where(degenerate, _dg(kind, l),
                     (_g(kind, u) - _g(kind, l)) / np.where(degenerate, 1.0, width))
    tangent = _dg(kind, mid)
    lo_c, hi_c = _offset_range(kind, chord, l, u)
    lo_t, hi_t = _offset_range(kind, tangent, l, u)
    # compare the two lines at the midpoint
    use_chord_up = chord * mid + hi_c <= tangent * mid + hi_t
    use_chord_lo = chord * mid + lo_c >= tangent * mid + lo_t
    up_s = np.where(use_chord_up, chord, tangent)
    up_b = np.where(use_chord_up, hi_c, hi_t)
    lo_s = np.where(use_chord_lo, chord, tangent)
    lo_b = np.where(use_chord_lo, lo_c, lo_t)
    return lo_s, lo_b, up_s, up_b


@dataclass
class DynamicsModel:
    name: str
    matrix: np.ndarray
    offset: np.ndarray
    terms: list[Term]
    state_space: Hyperrectangle
    initial_set: SetExpr
    safe_set: SetExpr
    noise: DiagonalGaussian
    unsafe_set: SetExpr = field(default=None)  # type: ignore[assignment]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        n = self.state_dim
        if self.matrix.shape != (n, n) or self.offset.shape != (n,):
            raise ValueError("affine part must be an (n, n) matrix and an n-vector")
        for t in self.terms:
            if not (0 <= t.target < n and 0 <= t.source < n):
                raise ValueError(f"term {t} refers to a coordinate outside 0..{n - 1}")
        if self.noise.dim != n or self.state_space.dim != n:
            raise ValueError("noise and state space must match the state dimension")
        if self.unsafe_set is None:
            self.unsafe_set = Difference(BoxSet(self.state_space), self.safe_set)

    @property
    def state_dim(self) -> int:
        return self.offset.shape[0]

    @property
    def is_affine(self) -> bool:
        return not self.terms

    def F_batch(self, xs) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        out = xs @ self.matrix.T + self.offset
        for t in self.terms:
            out[:, t.target] += t.weight * _g(t.kind, xs[:, t.source])
        return out

    def F(self, x) -> np.ndarray:
        return self.F_batch(np.asarray(x)[None])[0]

    def in_state_space(self, xs) -> np.ndarray:
        return BoxSet(self.state_space).contains(xs)

    def relax_batch(self, lo, hi):
        """Linear sandwich of F over each box: (Al, bl, Au, bu), A shaped (N, n, n)."""
        lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
        n_batch, n = lo.shape
        al = np.broadcast_to(self.matrix, (n_batch, n, n)).copy()
        au = al.copy()
        bl = np.broadcast_to(self.offset, (n_batch, n)).copy()
        bu = bl.copy()
        for t in self.terms:
            ls, lb, us, ub = relax_univariate(t.kind, lo[:, t.source], hi[:, t.source])
            if t.weight < 0.0:
                ls, lb, us, ub = us, ub, ls, lb
            al[:, t.target, t.source] += t.weight * ls
            bl[:, t.target] += t.weight * lb
            au[:, t.target, t.source] += t.weight * us
            bu[:, t.target] += t.weight * ub
        return al, bl, au, bu


# ---------------------------------------------------------------------------
# operations


def step(dyn: DynamicsModel, x, v) -> np.ndarray:
    x, v = np.asarray(x, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if x.shape != (dyn.state_dim,) or v.shape != (dyn.state_dim,):
        raise ValueError("state and noise must both have the system's dimension")
    return dyn.F(x) + v


def stopped_trajectory(dyn: DynamicsModel, x0, noise_draws, H: int) -> np.ndarray:
    """States x[0..H] of the process frozen at its first exit from X."""
    x0 = np.asarray(x0, dtype=np.float64)
    if not dyn.state_space.contains(x0):
        raise ValueError(f"initial state {x0} is outside the state space")
    draws = np.asarray(noise_draws, dtype=np.float64).reshape(-1, dyn.state_dim)
    if draws.shape[0] < H:
        raise ValueError(f"need {H} noise draws, got {draws.shape[0]}")
    traj = np.empty((H + 1, dyn.state_dim))
    traj[0] = x0
    stopped = False
    for k in range(H):
        traj[k + 1] = traj[k] if stopped else dyn.F(traj[k]) + draws[k]
        if not stopped and not dyn.state_space.contains(traj[k + 1]):
            stopped = True
    return traj


def stopped_trajectories(dyn: DynamicsModel, x0s, noise_draws) -> np.ndarray:
    """Vectorized stopped process for many starts; draws shaped (N, H, n)."""
    x = np.array(x0s, dtype=np.float64)
    n_traj, horizon, _ = noise_draws.shape
    out = np.empty((n_traj, horizon + 1, dyn.state_dim))
    out[:, 0] = x
    alive = dyn.in_state_space(x)
    for k in range(horizon):
        nxt = dyn.F_batch(x) + noise_draws[:, k]
        x = np.where(alive[:, None], nxt, x)
        out[:, k + 1] = x
        alive &= dyn.in_state_space(x)
    return out


def relax_F(dyn: DynamicsModel, qx: Hyperrectangle) -> LinearRelaxation:
    if qx.dim != dyn.state_dim:
        raise ValueError("box dimension does not match the system")
    if not dyn.state_space.contains_box(qx):
        raise ValueError(f"{qx} is not contained in the state space {dyn.state_space}")
    al, bl, au, bu = dyn.relax_batch(qx.lower[None], qx.upper[None])
    return LinearRelaxation(al[0], bl[0], au[0], bu[0], qx)


# ---------------------------------------------------------------------------
# benchmarks


def linear_system(m1: float = 0.3, m2: float = 0.8, m3: float = 0.4,
                  noise_variance=(0.0, 0.1), noise_as_std: bool = False) -> DynamicsModel:
    """Juvenile/adult population model on [-3, 3]^2."""
    X = Hyperrectangle([-3.0, -3.0], [3.0, 3.0])
    noise = (DiagonalGaussian.from_std if noise_as_std else DiagonalGaussian)(np.zeros(2), noise_variance)
    return DynamicsModel(
        name="linear",
        matrix=np.array([[0.0, m3], [m1, m2]]),
        offset=np.zeros(2),
        terms=[],
        state_space=X,
        initial_set=circ(0.0, 0.0, 1.5),
        safe_set=circ(0.0, 0.0, 2.0),
        noise=noise,
        params={"m1": m1, "m2": m2, "m3": m3},
    )


def polynomial_system(h: float = 0.1, noise_variance=(0.01, 0.0), noise_as_std: bool = False) -> DynamicsModel:
    """Euler-discretized 2-D polynomial system with two-piece initial and unsafe sets."""
    X = Hyperrectangle([-3.5, -2.0], [2.0, 1.0])
    noise = (DiagonalGaussian.from_std if noise_as_std else DiagonalGaussian)(np.zeros(2), noise_variance)
    initial = Union((circ(-1.5, 0.0, 0.5), rect(-1.8, -0.1, 0.6, 0.2), rect(-1.4, -0.5, 0.2, 0.6)))
    unsafe = Union((circ(-1.0, -1.0, 0.4), rect(0.4, 0.1, 0.2, 0.4), rect(0.4, 0.1, 0.4, 0.2)))
    safe = Difference(BoxSet(X), unsafe)
    return DynamicsModel(
        name="polynomial2d",
        matrix=np.array([[1.0, h], [-h, 1.0 - h]]),
        offset=np.zeros(2),
        terms=[Term(1, 0, "cube", h / 3.0)],
        state_space=X,
        initial_set=initial,
        safe_set=safe,
        noise=noise,
        unsafe_set=Difference(BoxSet(X), safe),
        params={"h": h},
    )


def dubins_car(h: float = 0.1, speed: float = 1.0, steer: float = 1.0 / 0.95,
               noise_variance=(0.0, 0.0, 0.01), noise_as_std: bool = False) -> DynamicsModel:
    """Euler-discretized Dubin's car with noise on the heading."""
    half_pi = np.pi / 2.0
    X = Hyperrectangle([-2.0, -2.0, -half_pi], [2.0, 2.0, half_pi])
    noise = (DiagonalGaussian.from_std if noise_as_std else DiagonalGaussian)(np.zeros(3), noise_variance)
    safe = BoxSet(Hyperrectangle([-1.9, -1.9, -half_pi], [1.9, 1.9, half_pi]))
    return DynamicsModel(
        name="dubins",
        matrix=np.eye(3),
        offset=np.array([0.0, 0.0, h * steer]),
        terms=[Term(0, 2, "sin", h * speed), Term(1, 2, "cos", h * speed)],
        state_space=X,
        initial_set=Singleton((-0.95, 0.0, 0.0)),
        safe_set=safe,
        noise=noise,
        params={"h": h, "speed": speed, "steer": steer},
    )


BENCHMARKS: dict[str, Callable[..., DynamicsModel]] = {
    "linear": linear_system,
    "polynomial2d": polynomial_system,
    "dubins": dubins_car,
}


def benchmark(name: str, noise_as_std: bool = False) -> DynamicsModel:
    try:
        factory = BENCHMARKS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; expected one of {sorted(BENCHMARKS)} or 'custom'") from None
    return factory(noise_as_std=noise_as_std)

