"""Robust training of barrier candidates.

Each iteration samples m points from X, X_0, X_s and X_u plus l noise
vectors, bounds the network over an eps-box around every point with
CROWN-IBP, and minimizes

    (1 - kappa) * L_violation + kappa * (gamma_m + beta_m * H)

where L_violation averages the hinges max(0, d0 - min B) over X points and
max(0, 1 + d1 - min B) over X_u points (divided by 2m; the margins
(d0, d1) default to 0), gamma_m is the largest
upper bound of B on the X_0 boxes and beta_m the largest upper bound of
mean_j B(F(x') + v_j) - B(x') on the X_s boxes, both clamped at 0 (without the
clamp the loss is unbounded below at kappa = 1). kappa starts at kappa0 and is
multiplied by kappa_decay after every epoch.

The bounds are written in torch so gradients flow through the relaxation
itself; ``evaluate_loss`` recomputes the same quantity with the numpy
relaxation code and serves as an independent check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from nbf.dynamics import DynamicsModel
from nbf.network import Activation, GradientSet, Network, barrier_network, forward_batch
from nbf.relaxation import CROWN_IBP, crown_batch, linear_to_interval_batch, max_line_rows, min_line_rows
from nbf.sets import BoxSet, SetExpr, Singleton

MIN_ACCEPTANCE = 1e-4
# draws after which a low rejection-sampling acceptance rate is treated as an error
_ACCEPTANCE_PROBE = 200_000


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    m: int = 250
    l: int = 500
    eps: float = 1e-5
    H: int = 10
    epochs: int = 150
    iters_per_epoch: int = 400
    kappa0: float = 1.0
    kappa_decay: float = 0.97
    learning_rate: float = 1e-3
    lr_decay: float = 0.97
    margin_nonneg: float = 0.0
    margin_unsafe: float = 0.0
    hidden: tuple[int, ...] = (128, 128, 128)
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("m", "l", "H", "epochs", "iters_per_epoch"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.eps < 0 or self.margin_nonneg < 0 or self.margin_unsafe < 0:
            raise ValueError("eps and the margins must be non-negative")
        if not (0.0 <= self.kappa0 <= 1.0) or not (0.0 < self.kappa_decay <= 1.0):
            raise ValueError("kappa0 must lie in [0, 1] and kappa_decay in (0, 1]")
        if self.learning_rate <= 0 or not (0.0 < self.lr_decay <= 1.0):
            raise ValueError("learning_rate must be positive and lr_decay in (0, 1]")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")

    @property
    def margins(self) -> tuple[float, float]:
        return (self.margin_nonneg, self.margin_unsafe)

    def kappa(self, epoch: int) -> float:
        return self.kappa0 * self.kappa_decay ** epoch


@dataclass
class TrainBatch:
    X: np.ndarray
    X0: np.ndarray
    Xs: np.ndarray
    Xu: np.ndarray


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    violation: float
    gamma_m: float
    beta_m: float
    kappa: float
    learning_rate: float
    seconds: float


METRIC_FIELDS = ("epoch", "loss", "violation", "gamma_m", "beta_m", "kappa")


# ---------------------------------------------------------------------------
# sampling


def sample_set(s: SetExpr, within, m: int, rng: np.random.Generator) -> np.ndarray:
    """m points uniform over ``s`` by rejection inside its bounding box clipped to ``within``."""
    if s.is_empty():
        return np.zeros((0, s.dim))
    if isinstance(s, Singleton):
        return np.tile(np.asarray(s.point, dtype=np.float64), (m, 1))
    bb = s.bounding_box()
    lo, hi = np.maximum(bb.lower, within.lower), np.minimum(bb.upper, within.upper)
    if np.any(lo > hi):
        raise ValueError("set does not meet the state space")
    chunk = max(4 * m, 1024)
    out, drawn, accepted = [], 0, 0
    while accepted < m:
        pts = rng.uniform(lo, hi, size=(chunk, s.dim))
        pts = pts[s.contains(pts)]
        drawn += chunk
        accepted += pts.shape[0]
        out.append(pts)
        if drawn >= _ACCEPTANCE_PROBE and accepted < MIN_ACCEPTANCE * drawn:
            raise ValueError(f"rejection sampling accepted {accepted} of {drawn} draws; "
                             "the set is (nearly) degenerate")
    return np.concatenate(out)[:m]


def sample_batch(dyn: DynamicsModel, m: int, rng: np.random.Generator) -> TrainBatch:
    X = dyn.state_space
    return TrainBatch(
        X=sample_set(BoxSet(X), X, m, rng),
        X0=sample_set(dyn.initial_set, X, m, rng),
        Xs=sample_set(dyn.safe_set, X, m, rng),
        Xu=sample_set(dyn.unsafe_set, X, m, rng),
    )


# ---------------------------------------------------------------------------
# torch relaxation


def _to_torch(net: Network, requires_grad: bool = True):
    params = []
    for w, b in zip(net.weights, net.biases):
        params.append((torch.tensor(w, dtype=torch.float64, requires_grad=requires_grad),
                       torch.tensor(b, dtype=torch.float64, requires_grad=requires_grad)))
    return params


def _to_network(net: Network, params) -> Network:
    return Network(list(net.layers), [w.detach().numpy().copy() for w, _ in params],
                   [b.detach().numpy().copy() for _, b in params])


def torch_forward(params, acts, x: torch.Tensor) -> torch.Tensor:
    for (w, b), act in zip(params, acts):
        x = x @ w.T + b
        if act is Activation.RELU:
            x = torch.relu(x)
    return x[:, 0]


def torch_bounds(params, acts, lo: torch.Tensor, hi: torch.Tensor,
                 lower: bool = True, upper: bool = True):
    """CROWN-IBP interval bounds of a scalar-output network over boxes.

    Returns (lower (N,), upper (N,)); a side that is not requested is None.
    """
    mid0, rad0 = (lo + hi) / 2.0, (hi - lo) / 2.0
    mid, rad = mid0, rad0
    pre = []
    for (w, b), act in zip(params, acts):
        zm = mid @ w.T + b
        zr = rad @ w.abs().T
        zl, zu = zm - zr, zm + zr
        pre.append((zl, zu))
        if act is Activation.RELU:
            zl, zu = torch.relu(zl), torch.relu(zu)
        mid, rad = (zl + zu) / 2.0, (zu - zl) / 2.0

    n_batch = lo.shape[0]
    w, b = params[-1]
    sides = {}
    if lower:
        sides["l"] = [w[0].expand(n_batch, -1), b[0].expand(n_batch)]
    if upper:
        sides["u"] = [w[0].expand(n_batch, -1), b[0].expand(n_batch)]
    for i in range(len(params) - 2, -1, -1):
        if acts[i] is Activation.RELU:
            zl, zu = pre[i]
            active = zl >= 0.0
            unstable = (zl < 0.0) & (zu > 0.0)
            denom = torch.where(unstable, zu - zl, torch.ones_like(zu))
            up_s = torch.where(active, torch.ones_like(zu), torch.where(unstable, zu / denom, torch.zeros_like(zu)))
            up_c = torch.where(unstable, -zu * zl / denom, torch.zeros_like(zu))
            lo_s = (active | (unstable & (zu >= -zl))).to(zu.dtype)
            for key, pair in sides.items():
                lam, bias = pair
                pos, neg = torch.clamp(lam, min=0.0), torch.clamp(lam, max=0.0)
                if key == "u":
                    bias = bias + (pos * up_c).sum(-1)
                    lam = pos * up_s + neg * lo_s
                else:
                    bias = bias + (neg * up_c).sum(-1)
                    lam = pos * lo_s + neg * up_s
                pair[0], pair[1] = lam, bias
        w, b = params[i]
        for pair in sides.values():
            pair[1] = pair[1] + pair[0] @ b
            pair[0] = pair[0] @ w
    out_l = out_u = None
    if lower:
        lam, bias = sides["l"]
        out_l = (lam * mid0).sum(-1) - (lam.abs() * rad0).sum(-1) + bias
    if upper:
        lam, bias = sides["u"]
        out_u = (lam * mid0).sum(-1) + (lam.abs() * rad0).sum(-1) + bias
    return out_l, out_u


def _next_boxes(dyn: DynamicsModel, xs: np.ndarray, eps: float, v: np.ndarray):
    """Boxes around F(ball) + v_j, ordered point-major; shape (m * l, n)."""
    lo, hi = xs - eps, xs + eps
    if eps == 0.0:
        f_lo = f_hi = dyn.F_batch(xs)
    else:
        al, bl, au, bu = dyn.relax_batch(lo, hi)
        f_lo, f_hi = min_line_rows(al, bl, lo, hi), max_line_rows(au, bu, lo, hi)
    y_lo = (f_lo[:, None, :] + v[None, :, :]).reshape(-1, xs.shape[1])
    y_hi = (f_hi[:, None, :] + v[None, :, :]).reshape(-1, xs.shape[1])
    return y_lo, y_hi


def _region_masks(dyn: DynamicsModel, y_lo, y_hi):
    X = dyn.state_space
    inside = np.all((y_lo >= X.lower) & (y_hi <= X.upper), axis=1)
    outside = np.any((y_hi < X.lower) | (y_lo > X.upper), axis=1)
    return inside, outside


def _loss_terms(params, acts, dyn: DynamicsModel, batch: TrainBatch, v: np.ndarray,
                kappa: float, eps: float, H: int, margins: tuple[float, float] = (0.0, 0.0)):
    t = lambda a: torch.as_tensor(a, dtype=torch.float64)  # noqa: E731
    m = batch.X.shape[0]

    lb_x, _ = torch_bounds(params, acts, t(batch.X - eps), t(batch.X + eps), upper=False)
    viol = torch.relu(margins[0] - lb_x).sum()
    if batch.Xu.shape[0]:
        lb_u, _ = torch_bounds(params, acts, t(batch.Xu - eps), t(batch.Xu + eps), upper=False)
        viol = viol + torch.relu(1.0 + margins[1] - lb_u).sum()
    viol = viol / (2.0 * m)

    _, ub_0 = torch_bounds(params, acts, t(batch.X0 - eps), t(batch.X0 + eps), lower=False)
    gamma = torch.relu(ub_0.max())

    y_lo, y_hi = _next_boxes(dyn, batch.Xs, eps, v)
    inside, outside = _region_masks(dyn, y_lo, y_hi)
    _, ub_next = torch_bounds(params, acts, t(y_lo), t(y_hi), lower=False)
    # B is 0 outside X: straddling boxes are bounded by max(B, 0)
    ub_next = torch.where(t(inside).bool(), ub_next,
                          torch.where(t(outside).bool(), torch.zeros_like(ub_next), torch.relu(ub_next)))
    mean_next = ub_next.reshape(batch.Xs.shape[0], v.shape[0]).mean(dim=1)
    lb_s, _ = torch_bounds(params, acts, t(batch.Xs - eps), t(batch.Xs + eps), upper=False)
    beta = torch.relu((mean_next - lb_s).max())

    loss = (1.0 - kappa) * viol + kappa * (gamma + beta * H)
    return loss, viol, gamma, beta


def robust_loss(net: Network, dyn: DynamicsModel, batch: TrainBatch, v_samples: np.ndarray,
                kappa: float, eps: float, H: int,
                margins: tuple[float, float] = (0.0, 0.0)) -> tuple[float, GradientSet]:
    """Loss value and its parameter gradient for a numpy network."""
    params = _to_torch(net)
    acts = [s.activation for s in net.layers]
    loss, *_ = _loss_terms(params, acts, dyn, batch, np.asarray(v_samples, dtype=np.float64),
                           kappa, eps, H, margins)
    loss.backward()
    grads = GradientSet([w.grad.numpy().copy() for w, _ in params],
                        [b.grad.numpy().copy() for _, b in params])
    return float(loss.detach()), grads


def evaluate_loss(net: Network, dyn: DynamicsModel, batch: TrainBatch, v_samples: np.ndarray,
                  kappa: float, eps: float, H: int, margins: tuple[float, float] = (0.0, 0.0)
                  ) -> dict:
    """The same loss computed with the numpy relaxation code (no gradients)."""

    def bounds(lo, hi):
        if lo.shape[0] == 0:
            return np.zeros(0), np.zeros(0)
        rel = crown_batch(net, lo, hi, CROWN_IBP)
        lower, upper = linear_to_interval_batch(*rel, lo, hi)
        return lower[:, 0], upper[:, 0]

    m = batch.X.shape[0]
    lb_x, _ = bounds(batch.X - eps, batch.X + eps)
    lb_u, _ = bounds(batch.Xu - eps, batch.Xu + eps)
    viol = (np.maximum(margins[0] - lb_x, 0.0).sum() + np.maximum(1.0 + margins[1] - lb_u, 0.0).sum()) / (2.0 * m)
    _, ub_0 = bounds(batch.X0 - eps, batch.X0 + eps)
    gamma = max(0.0, float(np.max(ub_0)))
    v = np.asarray(v_samples, dtype=np.float64)
    y_lo, y_hi = _next_boxes(dyn, batch.Xs, eps, v)
    inside, outside = _region_masks(dyn, y_lo, y_hi)
    _, ub_next = bounds(y_lo, y_hi)
    ub_next = np.where(inside, ub_next, np.where(outside, 0.0, np.maximum(ub_next, 0.0)))
    lb_s, _ = bounds(batch.Xs - eps, batch.Xs + eps)
    beta = max(0.0, float(np.max(ub_next.reshape(batch.Xs.shape[0], v.shape[0]).mean(axis=1) - lb_s)))
    loss = (1.0 - kappa) * viol + kappa * (gamma + beta * H)
    return {"loss": float(loss), "violation": float(viol), "gamma_m": gamma, "beta_m": beta}


def pointwise_loss(net: Network, dyn: DynamicsModel, batch: TrainBatch, v_samples: np.ndarray,
                   kappa: float, H: int, margins: tuple[float, float] = (0.0, 0.0)) -> float:
    """Sampled loss with point evaluations only (B set to 0 outside X)."""
    m = batch.X.shape[0]
    b_x = forward_batch(net, batch.X)[:, 0]
    b_u = forward_batch(net, batch.Xu)[:, 0] if batch.Xu.shape[0] else np.zeros(0)
    viol = (np.maximum(margins[0] - b_x, 0.0).sum() + np.maximum(1.0 + margins[1] - b_u, 0.0).sum()) / (2.0 * m)
    gamma = max(0.0, float(np.max(forward_batch(net, batch.X0)[:, 0])))
    v = np.asarray(v_samples, dtype=np.float64)
    y = (dyn.F_batch(batch.Xs)[:, None, :] + v[None]).reshape(-1, batch.Xs.shape[1])
    b_next = forward_batch(net, y)[:, 0] * dyn.in_state_space(y)
    g = b_next.reshape(batch.Xs.shape[0], -1).mean(axis=1) - forward_batch(net, batch.Xs)[:, 0]
    return float((1.0 - kappa) * viol + kappa * (gamma + max(0.0, float(np.max(g))) * H))


# ---------------------------------------------------------------------------
# training loop


def train(dyn: DynamicsModel, cfg: TrainConfig, init: Optional[Network] = None,
          on_epoch: Optional[Callable[[EpochMetrics, Network], None]] = None
          ) -> tuple[Network, list[EpochMetrics]]:
    """Adam with per-epoch learning-rate decay; deterministic given cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    net = init.copy() if init is not None else barrier_network(dyn.state_dim, cfg.hidden, rng)
    if net.input_dim != dyn.state_dim or net.output_dim != 1:
        raise ValueError("initial network does not match the system dimension")
    params = _to_torch(net)
    acts = [s.activation for s in net.layers]
    opt = torch.optim.Adam([p for pair in params for p in pair], lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.lr_decay)
    history: list[EpochMetrics] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        kappa = cfg.kappa(epoch)
        lr = opt.param_groups[0]["lr"]
        sums = np.zeros(4)
        for it in range(cfg.iters_per_epoch):
            batch = sample_batch(dyn, cfg.m, rng)
            v = dyn.noise.sample(cfg.l, rng)
            loss, viol, gamma, beta = _loss_terms(params, acts, dyn, batch, v, kappa, cfg.eps, cfg.H,
                                                   cfg.margins)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLoss(f"non-finite loss {value} at epoch {epoch}, iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += (value, float(viol.detach()), float(gamma.detach()), float(beta.detach()))
        sched.step()
        means = sums / cfg.iters_per_epoch
        row = EpochMetrics(epoch, *means, kappa, lr, time.perf_counter() - t0)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row, _to_network(net, params))
    return _to_network(net, params), history
