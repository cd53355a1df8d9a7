"""Feed-forward ReLU networks used as barrier candidates.

A network is a list of affine layers, each followed by an activation
(ReLU or identity). Barrier networks end in a single identity output.
Everything is float64; parameters are plain numpy arrays so the certifier
can batch over them without a tensor framework.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from nbf import jsonio


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    activation: Activation = Activation.RELU

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise ValueError(f"layer widths must be >= 1, got {self.input_width}x{self.output_width}")
        object.__setattr__(self, "activation", Activation(self.activation))


@dataclass
class Network:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if not (len(self.layers) == len(self.weights) == len(self.biases)):
            raise ValueError("layers, weights and biases must have equal length")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (spec, w, b) in enumerate(zip(self.layers, self.weights, self.biases)):
            if i > 0 and self.layers[i - 1].output_width != spec.input_width:
                raise ValueError(f"layer {i} input width {spec.input_width} does not match "
                                 f"previous output width {self.layers[i - 1].output_width}")
            if w.shape != (spec.output_width, spec.input_width):
                raise ValueError(f"layer {i} weight shape {w.shape} != "
                                 f"{(spec.output_width, spec.input_width)}")
            if b.shape != (spec.output_width,):
                raise ValueError(f"layer {i} bias shape {b.shape} != {(spec.output_width,)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_width

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_width

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(spec.output_width for spec in self.layers[:-1])

    def copy(self) -> "Network":
        return Network(list(self.layers), [w.copy() for w in self.weights],
                       [b.copy() for b in self.biases])

    def __call__(self, x) -> float:
        return forward(self, x)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "layers": [{"in": s.input_width, "out": s.output_width, "activation": s.activation.value}
                       for s in self.layers],
            "params": [{"weight": w.tolist(), "bias": b.tolist()}
                       for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Network":
        try:
            layers = [LayerSpec(int(d["in"]), int(d["out"]), Activation(d["activation"]))
                      for d in data["layers"]]
            weights = [np.array(p["weight"], dtype=np.float64).reshape(s.output_width, s.input_width)
                       for p, s in zip(data["params"], layers)]
            biases = [np.array(p["bias"], dtype=np.float64) for p in data["params"]]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed network document: {exc}") from exc
        if len(data["params"]) != len(layers):
            raise ValueError("params and layers lengths differ")
        return cls(layers, weights, biases)

    def to_json(self) -> str:
        return jsonio.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Network":
        return cls.from_dict(jsonio.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Network":
        return cls.from_json(Path(path).read_text())


@dataclass
class GradientSet:
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


def barrier_network(input_dim: int, hidden: Sequence[int] = (128, 128, 128),
                    rng: np.random.Generator | None = None) -> Network:
    """Fresh ReLU network with a scalar identity output.

    Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    rng = np.random.default_rng() if rng is None else rng
    widths = [input_dim, *hidden, 1]
    layers, weights, biases = [], [], []
    for i in range(len(widths) - 1):
        act = Activation.IDENTITY if i == len(widths) - 2 else Activation.RELU
        layers.append(LayerSpec(widths[i], widths[i + 1], act))
        bound = 1.0 / np.sqrt(widths[i])
        weights.append(rng.uniform(-bound, bound, size=(widths[i + 1], widths[i])))
        biases.append(rng.uniform(-bound, bound, size=widths[i + 1]))
    return Network(layers, weights, biases)


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"input has dimension {x.shape[-1]}, network expects {net.input_dim}")
    return x


def forward_batch(net: Network, xs) -> np.ndarray:
    """Evaluate on a batch ``xs`` of shape (N, n); returns (N, output_dim)."""
    h = _check_input(net, xs)
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        h = h @ w.T + b
        if spec.activation is Activation.RELU:
            h = np.maximum(h, 0.0)
    return h


def forward(net: Network, x) -> float:
    """B(x) for a single state; the network must have a scalar output."""
    x = _check_input(net, x)
    if x.ndim != 1:
        raise ValueError("forward takes a single vector; use forward_batch for batches")
    out = forward_batch(net, x[None, :])[0]
    if out.shape != (1,):
        raise ValueError("forward expects a scalar-output network")
    return float(out[0])


def grad_params(net: Network, x, upstream: float = 1.0) -> GradientSet:
    """Reverse-mode gradient of ``upstream * B(x)`` w.r.t. every parameter.

    The ReLU derivative at exactly zero is taken as 0.
    """
    x = _check_input(net, x)
    if x.ndim != 1:
        raise ValueError("grad_params takes a single vector")
    if net.output_dim != 1:
        raise ValueError("grad_params expects a scalar-output network")

    inputs, masks = [], []
    h = x
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        inputs.append(h)
        z = w @ h + b
        if spec.activation is Activation.RELU:
            mask = z > 0.0
            h = np.where(mask, z, 0.0)
        else:
            mask = None
            h = z
        masks.append(mask)

    delta = np.array([float(upstream)])
    gw: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    for i in reversed(range(len(net.layers))):
        if masks[i] is not None:
            delta = delta * masks[i]
        gw[i] = np.outer(delta, inputs[i])
        gb[i] = delta.copy()
        delta = net.weights[i].T @ delta
    return GradientSet(gw, gb)


def compose_affine(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """(A, c) with net(x) = A x + c, valid only when no layer uses ReLU."""
    if any(s.activation is Activation.RELU for s in net.layers):
        raise ValueError("network has ReLU layers and is not affine")
    a = np.eye(net.input_dim)
    c = np.zeros(net.input_dim)
    for w, b in zip(net.weights, net.biases):
        a, c = w @ a, w @ c + b
    return a, c
