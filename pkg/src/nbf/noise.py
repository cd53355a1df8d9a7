"""Diagonal Gaussian noise: box probabilities and partial expectations.

Zero-variance coordinates are deterministic (the noise equals the mean
there); their box factor is the indicator of ``lo <= mean <= hi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from nbf.relaxation import Hyperrectangle

_SQRT2 = np.sqrt(2.0)
_SQRT2PI = np.sqrt(2.0 * np.pi)


def _interval_mass(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """P(a <= Z <= b) for standard normal Z, accurate in both tails."""
    a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    right = 0.5 * (erfc(a / _SQRT2) - erfc(b / _SQRT2))
    left = 0.5 * (erfc(-b / _SQRT2) - erfc(-a / _SQRT2))
    middle = 1.0 - 0.5 * erfc(-a / _SQRT2) - 0.5 * erfc(b / _SQRT2)
    out = np.where(a >= 0.0, right, np.where(b <= 0.0, left, middle))
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class DiagonalGaussian:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64)).copy()
        var = np.atleast_1d(np.asarray(self.variance, dtype=np.float64)).copy()
        if mean.shape != var.shape or mean.ndim != 1:
            raise ValueError("mean and variance must be vectors of equal length")
        if np.any(var < 0.0) or not np.all(np.isfinite(var)) or not np.all(np.isfinite(mean)):
            raise ValueError("variances must be finite and non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @classmethod
    def from_std(cls, mean, std) -> "DiagonalGaussian":
        return cls(mean, np.asarray(std, dtype=np.float64) ** 2)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    @property
    def stochastic(self) -> np.ndarray:
        return self.variance > 0.0

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        if isinstance(size, int):
            size = (size,)
        z = rng.standard_normal((*size, self.dim))
        return self.mean + z * self.std

    # -- per-coordinate pieces -------------------------------------------

    def _factors(self, lo: np.ndarray, hi: np.ndarray):
        """Per-coordinate masses P_i and first moments M_i = ∫ v_i p_i(v_i)."""
        mu, sd = self.mean, self.std
        safe_sd = np.where(sd > 0.0, sd, 1.0)
        a, b = (lo - mu) / safe_sd, (hi - mu) / safe_sd
        mass = _interval_mass(a, b)
        dens_diff = (np.exp(-0.5 * b * b) - np.exp(-0.5 * a * a)) / _SQRT2PI
        moment = mu * mass - sd * dens_diff
        point_mass = ((lo <= mu) & (mu <= hi)).astype(np.float64)
        det = sd == 0.0
        mass = np.where(det, point_mass, mass)
        moment = np.where(det, mu * point_mass, moment)
        return mass, moment

    def box_probability_batch(self, lo, hi) -> np.ndarray:
        lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
        mass, _ = self._factors(lo, hi)
        return np.prod(mass, axis=1)

    def partial_expectation_batch(self, lo, hi) -> np.ndarray:
        """∫_box v p(v) dv for each box; shape (N, n)."""
        lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
        mass, moment = self._factors(lo, hi)
        n = self.dim
        out = np.empty_like(mass)
        for i in range(n):
            others = np.prod(np.delete(mass, i, axis=1), axis=1) if n > 1 else 1.0
            out[:, i] = others * moment[:, i]
        return out


def box_probability(g: DiagonalGaussian, box: Hyperrectangle) -> float:
    if box.dim != g.dim:
        raise ValueError("box and noise dimensions differ")
    return float(g.box_probability_batch(box.lower[None], box.upper[None])[0])


def partial_expectation(g: DiagonalGaussian, box: Hyperrectangle) -> np.ndarray:
    if box.dim != g.dim:
        raise ValueError("box and noise dimensions differ")
    return g.partial_expectation_batch(box.lower[None], box.upper[None])[0]


def truncated_support(state_space: Hyperrectangle) -> Hyperrectangle:
    """Noise values v for which F(x) + v can land in X when F(x) ∈ X."""
    span = state_space.upper - state_space.lower
    return Hyperrectangle(-span, span)


def noise_grid(g: DiagonalGaussian, support: Hyperrectangle, cells: int | list[int]):
    """Uniform grid over ``support``; deterministic coordinates get one point cell.

    Returns (lo, hi) arrays of shape (C, n).
    """
    n = g.dim
    counts = [cells] * n if isinstance(cells, int) else list(cells)
    if len(counts) != n or any(c < 1 for c in counts):
        raise ValueError("cells must be a positive count per dimension")
    axes = []
    for i in range(n):
        if g.variance[i] == 0.0:
            axes.append(np.array([[g.mean[i], g.mean[i]]]))
        else:
            edges = np.linspace(support.lower[i], support.upper[i], counts[i] + 1)
            axes.append(np.stack([edges[:-1], edges[1:]], axis=1))
    mesh = np.meshgrid(*[np.arange(len(a)) for a in axes], indexing="ij")
    idx = np.stack([m.ravel() for m in mesh], axis=1)
    lo = np.stack([axes[i][idx[:, i], 0] for i in range(n)], axis=1)
    hi = np.stack([axes[i][idx[:, i], 1] for i in range(n)], axis=1)
    return lo, hi
