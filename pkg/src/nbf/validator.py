"""Monte-Carlo estimates used to sanity-check certificates.

Randomness: trajectory i draws its noise from ``numpy.random.Generator(PCG64)``
seeded with ``SeedSequence([seed, i])``, so an estimate depends only on the
seed and the trajectory count, never on batching or evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from nbf.dynamics import DynamicsModel, stopped_trajectories
from nbf.network import Network, forward_batch

# trajectories simulated together
_BLOCK = 8192

X0Source = Union[np.ndarray, Callable[[np.random.Generator, int], np.ndarray]]


@dataclass
class MCEstimate:
    estimate: float
    se: float
    n: int


@dataclass
class SafetyEstimate(MCEstimate):
    starts: np.ndarray            # (K, n) initial states
    start_estimates: np.ndarray   # per-start fraction of safe trajectories
    start_counts: np.ndarray      # trajectories per start

    @property
    def worst(self) -> MCEstimate:
        k = int(np.argmin(self.start_estimates))
        p, c = float(self.start_estimates[k]), int(self.start_counts[k])
        return MCEstimate(p, binomial_se(p, c), c)

    def as_dict(self) -> dict:
        w = self.worst
        return {"estimate": self.estimate, "se": self.se, "n_traj": self.n,
                "n_starts": int(self.starts.shape[0]),
                "worst_start_estimate": w.estimate, "worst_start_se": w.se}


def binomial_se(p: float, n: int) -> float:
    return float(np.sqrt(max(p * (1.0 - p), 0.0) / n)) if n > 0 else float("nan")


def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _noise_block(dyn: DynamicsModel, seed: int, start: int, stop: int, H: int) -> np.ndarray:
    return np.stack([dyn.noise.sample(H, _stream(seed, i)) for i in range(start, stop)])


def mc_psafe(dyn: DynamicsModel, x0_sampler: X0Source, H: int, n_traj: int, seed: int,
             n_starts: int = 100) -> SafetyEstimate:
    """Fraction of stopped trajectories whose states x[0..H] all lie in X_s.

    ``x0_sampler`` is either an (K, n) array of initial states or a callable
    ``(rng, k) -> (k, n)``; in the latter case ``n_starts`` states are drawn
    from a generator seeded with ``seed``. Trajectory i starts at state i mod K.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    if H < 0:
        raise ValueError("horizon must be non-negative")
    if callable(x0_sampler):
        starts = np.atleast_2d(x0_sampler(np.random.default_rng(seed), n_starts))
    else:
        starts = np.atleast_2d(np.asarray(x0_sampler, dtype=np.float64))
    if starts.shape[1] != dyn.state_dim:
        raise ValueError("initial states do not match the system dimension")
    k = starts.shape[0]
    safe_counts = np.zeros(k)
    counts = np.bincount(np.arange(n_traj) % k, minlength=k)
    for s in range(0, n_traj, _BLOCK):
        e = min(n_traj, s + _BLOCK)
        idx = np.arange(s, e) % k
        if H > 0:
            traj = stopped_trajectories(dyn, starts[idx], _noise_block(dyn, seed, s, e, H))
        else:
            traj = starts[idx][:, None, :]
        flat = traj.reshape(-1, dyn.state_dim)
        safe = dyn.safe_set.contains(flat).reshape(e - s, -1).all(axis=1)
        np.add.at(safe_counts, idx, safe)
    est = float(safe_counts.sum() / n_traj)
    per_start = np.divide(safe_counts, counts, out=np.full(k, np.nan), where=counts > 0)
    used = counts > 0
    return SafetyEstimate(est, binomial_se(est, n_traj), n_traj, starts[used], per_start[used], counts[used])


def barrier_stopped(net: Network, dyn: DynamicsModel, ys) -> np.ndarray:
    """B(y) with B set to 0 outside the state space."""
    ys = np.atleast_2d(ys)
    return forward_batch(net, ys)[:, 0] * dyn.in_state_space(ys)


def mc_expectation(net: Network, dyn: DynamicsModel, x, n: int, seed: int) -> MCEstimate:
    """Sample mean and standard error of B(F(x) + v) under the noise law."""
    if n < 1:
        raise ValueError("n must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    fx = dyn.F(x)
    if not np.any(dyn.noise.stochastic):
        return MCEstimate(float(barrier_stopped(net, dyn, fx + dyn.noise.mean)[0]), 0.0, n)
    v = dyn.noise.sample(n, _stream(seed, 0))
    vals = barrier_stopped(net, dyn, fx + v)
    se = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return MCEstimate(float(vals.mean()), se, n)


def mc_increase_grid(net: Network, dyn: DynamicsModel, xs, n: int, seed: int,
                     chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """E[B(F(x) + v)] - B(x) and its standard error at many points.

    One set of n noise draws is shared by all points.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    v = dyn.noise.sample(n, _stream(seed, 0))
    fx = dyn.F_batch(xs)
    bx = forward_batch(net, xs)[:, 0]
    means, ses = np.empty(xs.shape[0]), np.empty(xs.shape[0])
    for s in range(0, xs.shape[0], chunk):
        e = min(xs.shape[0], s + chunk)
        ys = (fx[s:e, None, :] + v[None]).reshape(-1, dyn.state_dim)
        vals = barrier_stopped(net, dyn, ys).reshape(e - s, n)
        means[s:e] = vals.mean(axis=1)
        ses[s:e] = vals.std(axis=1, ddof=1) / np.sqrt(n) if n > 1 else 0.0
    return means - bx, ses
