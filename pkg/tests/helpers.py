"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from nbf.network import Activation, LayerSpec, Network, barrier_network


def constant_net(dim: int, c: float, hidden: int = 4) -> Network:
    """Network with zero weights whose output is the constant c."""
    layers = [LayerSpec(dim, hidden, Activation.RELU), LayerSpec(hidden, 1, Activation.IDENTITY)]
    return Network(layers, [np.zeros((hidden, dim)), np.zeros((1, hidden))],
                   [np.zeros(hidden), np.array([c])])


def affine_net(a, c: float) -> Network:
    """Single identity layer computing a . x + c."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    return Network([LayerSpec(a.shape[0], 1, Activation.IDENTITY)], [a[None, :]], [np.array([c])])


def random_net(dim: int, widths, seed: int) -> Network:
    return barrier_network(dim, tuple(widths), np.random.default_rng(seed))


def preactivations(net: Network, x: np.ndarray) -> list[np.ndarray]:
    out, h = [], np.asarray(x, dtype=np.float64)
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        z = h @ w.T + b
        out.append(z)
        h = np.maximum(z, 0.0) if spec.activation is Activation.RELU else z
    return out


def kink_distance(net: Network, x: np.ndarray) -> float:
    """Smallest |pre-activation| over ReLU units at x."""
    zs = preactivations(net, x)
    vals = [np.abs(z) for z, s in zip(zs, net.layers) if s.activation is Activation.RELU]
    return float(min(v.min() for v in vals)) if vals else float("inf")
