"""Interval and linear relaxations of ReLU networks over hyperrectangles.

Batched numpy implementations of interval bound propagation (IBP) and
backward linear bound propagation (CROWN, and CROWN-IBP where intermediate
pre-activation bounds come from IBP). Batches are arrays of box corners
``lo, hi`` with shape (N, n); single-box wrappers return the dataclasses below.

No directed rounding is performed. Callers that turn bounds into verdicts
apply an explicit slack (see ``nbf.certifier.SLACK``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from nbf.network import Activation, Network

if TYPE_CHECKING:
    from nbf.dynamics import DynamicsModel

CROWN = "crown"
CROWN_IBP = "crown-ibp"
MODES = (CROWN, CROWN_IBP)

# rows of the backward coefficient tensor processed at once (bounds memory use)
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class Hyperrectangle:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"bounds must be vectors of equal length, got {lo.shape} and {hi.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError(f"lower bound exceeds upper bound: {lo} > {hi}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def point(cls, x) -> "Hyperrectangle":
        return cls(x, x)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return (self.lower + self.upper) / 2.0

    @property
    def radius(self) -> np.ndarray:
        return (self.upper - self.lower) / 2.0

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def contains_box(self, other: "Hyperrectangle") -> bool:
        return bool(np.all(other.lower >= self.lower) and np.all(other.upper <= self.upper))

    def product(self, other: "Hyperrectangle") -> "Hyperrectangle":
        return Hyperrectangle(np.concatenate([self.lower, other.lower]),
                              np.concatenate([self.upper, other.upper]))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def corners(self) -> np.ndarray:
        grids = np.meshgrid(*[[a, b] for a, b in zip(self.lower, self.upper)], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def __repr__(self) -> str:
        return f"Hyperrectangle({self.lower.tolist()}, {self.upper.tolist()})"


@dataclass(frozen=True)
class IntervalRelaxation:
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, y, tol: float = 0.0) -> bool:
        y = np.asarray(y)
        return bool(np.all(y >= self.lo - tol) and np.all(y <= self.hi + tol))


@dataclass(frozen=True)
class LinearRelaxation:
    """A_lower x + b_lower <= f(x) <= A_upper x + b_upper on ``domain``."""

    A_lower: np.ndarray
    b_lower: np.ndarray
    A_upper: np.ndarray
    b_upper: np.ndarray
    domain: Hyperrectangle

    def lower_at(self, x) -> np.ndarray:
        return np.asarray(x) @ self.A_lower.T + self.b_lower

    def upper_at(self, x) -> np.ndarray:
        return np.asarray(x) @ self.A_upper.T + self.b_upper


# ---------------------------------------------------------------------------
# batched primitives


def _check_batch(net: Network, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    lo = np.atleast_2d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_2d(np.asarray(hi, dtype=np.float64))
    if lo.shape != hi.shape:
        raise ValueError("lo and hi batches differ in shape")
    if lo.shape[1] != net.input_dim:
        raise ValueError(f"box dimension {lo.shape[1]} does not match network input {net.input_dim}")
    return lo, hi


def ibp_batch(net: Network, lo, hi, return_preactivations: bool = False):
    """Interval bounds of the network output over each box in the batch.

    With ``return_preactivations`` also returns [(l_i, u_i)] for every layer's
    pre-activation, which CROWN-IBP uses as its intermediate bounds.
    """
    lo, hi = _check_batch(net, lo, hi)
    mid, rad = (lo + hi) / 2.0, (hi - lo) / 2.0
    pre = []
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        zm = mid @ w.T + b
        zr = rad @ np.abs(w).T
        zl, zu = zm - zr, zm + zr
        pre.append((zl, zu))
        if spec.activation is Activation.RELU:
            zl, zu = np.maximum(zl, 0.0), np.maximum(zu, 0.0)
        mid, rad = (zl + zu) / 2.0, (zu - zl) / 2.0
    out = (mid - rad, mid + rad)
    if return_preactivations:
        return out, pre
    return out


def relu_relaxation(l: np.ndarray, u: np.ndarray):
    """Slopes/intercepts of the linear ReLU sandwich on [l, u].

    Returns (upper_slope, upper_intercept, lower_slope). The lower line passes
    through the origin with slope 1 if u >= |l| else 0. Degenerate intervals
    (l == u) are stable by the sign of l.
    """
    inactive = u <= 0.0
    active = l >= 0.0
    unstable = ~(inactive | active)
    denom = np.where(unstable, u - l, 1.0)
    up_s = np.where(active, 1.0, np.where(unstable, u / denom, 0.0))
    up_c = np.where(unstable, -u * l / denom, 0.0)
    lo_s = np.where(active, 1.0, np.where(unstable & (u >= -l), 1.0, 0.0))
    return up_s, up_c, lo_s


def _backward(net: Network, end: int, lam0: np.ndarray, relax: list):
    """Back-substitute ``lam0 @ z_end`` down to the network input.

    ``lam0`` has shape (N, m, width_end); ``relax[i]`` holds the ReLU
    relaxation of layer i (None for identity layers). Returns lower and upper
    coefficient/bias pairs with shapes (N, m, n) and (N, m).
    """
    n_batch, m = lam0.shape[:2]
    w, b = net.weights[end], net.biases[end]
    bias_l = lam0 @ b
    bias_u = bias_l.copy()
    lam_l = (lam0.reshape(-1, lam0.shape[-1]) @ w).reshape(n_batch, m, -1)
    lam_u = lam_l.copy()
    for i in range(end - 1, -1, -1):
        if relax[i] is not None:
            up_s, up_c, lo_s = (r[:, None, :] for r in relax[i])
            pos_u, neg_u = np.maximum(lam_u, 0.0), np.minimum(lam_u, 0.0)
            bias_u = bias_u + np.sum(pos_u * up_c, axis=-1)
            lam_u = pos_u * up_s + neg_u * lo_s
            pos_l, neg_l = np.maximum(lam_l, 0.0), np.minimum(lam_l, 0.0)
            bias_l = bias_l + np.sum(neg_l * up_c, axis=-1)
            lam_l = pos_l * lo_s + neg_l * up_s
        w, b = net.weights[i], net.biases[i]
        bias_l = bias_l + lam_l @ b
        bias_u = bias_u + lam_u @ b
        k = lam_l.shape[-1]
        lam_l = (lam_l.reshape(-1, k) @ w).reshape(n_batch, m, -1)
        lam_u = (lam_u.reshape(-1, k) @ w).reshape(n_batch, m, -1)
    return lam_l, bias_l, lam_u, bias_u


def _concretize(lam_l, bias_l, lam_u, bias_u, lo, hi):
    mid, rad = (lo + hi) / 2.0, (hi - lo) / 2.0
    lower = np.einsum("bmn,bn->bm", lam_l, mid) - np.einsum("bmn,bn->bm", np.abs(lam_l), rad) + bias_l
    upper = np.einsum("bmn,bn->bm", lam_u, mid) + np.einsum("bmn,bn->bm", np.abs(lam_u), rad) + bias_u
    return lower, upper


def _crown_chunk(net: Network, lo: np.ndarray, hi: np.ndarray, mode: str):
    n_batch = lo.shape[0]
    _, pre_ibp = ibp_batch(net, lo, hi, return_preactivations=True)
    relax: list = [None] * len(net.layers)
    for i, spec in enumerate(net.layers[:-1]):
        if spec.activation is not Activation.RELU:
            continue
        zl, zu = pre_ibp[i]
        # layer 0 pre-activations are affine in x, so IBP is already exact there
        if mode == CROWN and i > 0:
            eye = np.broadcast_to(np.eye(spec.output_width), (n_batch, spec.output_width, spec.output_width))
            cl, cu = _concretize(*_backward(net, i, eye, relax), lo, hi)
            zl, zu = np.maximum(zl, cl), np.minimum(zu, cu)
            zu = np.maximum(zu, zl)
        relax[i] = relu_relaxation(zl, zu)
    out = len(net.layers) - 1
    if net.layers[-1].activation is Activation.RELU:
        raise ValueError("linear relaxation expects an identity output layer")
    eye = np.broadcast_to(np.eye(net.output_dim), (n_batch, net.output_dim, net.output_dim))
    return _backward(net, out, eye, relax)


def crown_batch(net: Network, lo, hi, mode: str = CROWN):
    """Linear lower/upper bounds of the network over each box.

    Returns (A_lower, b_lower, A_upper, b_upper) with shapes (N, m, n) and (N, m).
    """
    if mode not in MODES:
        raise ValueError(f"unknown relaxation mode {mode!r}; expected one of {MODES}")
    lo, hi = _check_batch(net, lo, hi)
    widest = max(s.output_width for s in net.layers)
    per_box = widest * widest if mode == CROWN else widest * net.output_dim
    chunk = max(1, _CHUNK_ELEMS // max(per_box, 1))
    parts = [_crown_chunk(net, lo[s:s + chunk], hi[s:s + chunk], mode)
             for s in range(0, lo.shape[0], chunk)]
    if len(parts) == 1:
        return parts[0]
    return tuple(np.concatenate([p[k] for p in parts]) for k in range(4))


def linear_to_interval_batch(A_lower, b_lower, A_upper, b_upper, lo, hi):
    """Exact min of the lower line and max of the upper line over each box."""
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    mid, rad = (lo + hi) / 2.0, (hi - lo) / 2.0
    lower = np.einsum("bmn,bn->bm", A_lower, mid) - np.einsum("bmn,bn->bm", np.abs(A_lower), rad) + b_lower
    upper = np.einsum("bmn,bn->bm", A_upper, mid) + np.einsum("bmn,bn->bm", np.abs(A_upper), rad) + b_upper
    return lower, upper


def max_line_batch(A, b, lo, hi):
    """Max over each box of the line A x + b (A: (N, n), b: (N,))."""
    mid, rad = (lo + hi) / 2.0, (hi - lo) / 2.0
    return np.einsum("bn,bn->b", A, mid) + np.einsum("bn,bn->b", np.abs(A), rad) + b


def min_line_batch(A, b, lo, hi):
    """Min over each box of the line A x + b (A: (N, n), b: (N,))."""
    mid, rad = (lo + hi) / 2.0, (hi - lo) / 2.0
    return np.einsum("bn,bn->b", A, mid) - np.einsum("bn,bn->b", np.abs(A), rad) + b


def compose_with_dynamics(net_rel, f_rel):
    """Sign-split composition of network lines over y = F(x) + v with F's lines.

    ``net_rel`` is (Cl, dl, Cu, du) with C shaped (N, m, n) in y; ``f_rel`` is
    (Fl, fl, Fu, fu) with F shaped (N, n, n) in x. Returns joint (x, v) lines
    (Al, bl, Au, bu) with A shaped (N, m, 2n).
    """
    cl, dl, cu, du = net_rel
    fal, fbl, fau, fbu = f_rel
    cu_p, cu_n = np.maximum(cu, 0.0), np.minimum(cu, 0.0)
    cl_p, cl_n = np.maximum(cl, 0.0), np.minimum(cl, 0.0)
    ax_u = cu_p @ fau + cu_n @ fal
    bu = du + np.einsum("bmn,bn->bm", cu_p, fbu) + np.einsum("bmn,bn->bm", cu_n, fbl)
    ax_l = cl_p @ fal + cl_n @ fau
    bl = dl + np.einsum("bmn,bn->bm", cl_p, fbl) + np.einsum("bmn,bn->bm", cl_n, fbu)
    return (np.concatenate([ax_l, cl], axis=-1), bl,
            np.concatenate([ax_u, cu], axis=-1), bu)


def composed_batch(dyn: "DynamicsModel", net: Network, x_lo, x_hi, v_lo, v_hi, mode: str = CROWN):
    """Joint (x, v) linear sandwich of net(F(x) + v) over qx x qv, batched.

    Also returns the image boxes (y_lo, y_hi) that bound the network input.
    """
    x_lo, x_hi = np.atleast_2d(x_lo), np.atleast_2d(x_hi)
    v_lo, v_hi = np.atleast_2d(v_lo), np.atleast_2d(v_hi)
    f_rel = dyn.relax_batch(x_lo, x_hi)
    f_lo = min_line_rows(f_rel[0], f_rel[1], x_lo, x_hi)
    f_hi = max_line_rows(f_rel[2], f_rel[3], x_lo, x_hi)
    y_lo, y_hi = f_lo + v_lo, f_hi + v_hi
    net_rel = crown_batch(net, y_lo, y_hi, mode)
    return compose_with_dynamics(net_rel, f_rel), (y_lo, y_hi)


def min_line_rows(A, b, lo, hi):
    """Row-wise min of (N, k, n) lines over boxes; shape (N, k)."""
    mid, rad = (lo + hi) / 2.0, (hi - lo) / 2.0
    return np.einsum("bkn,bn->bk", A, mid) - np.einsum("bkn,bn->bk", np.abs(A), rad) + b


def max_line_rows(A, b, lo, hi):
    mid, rad = (lo + hi) / 2.0, (hi - lo) / 2.0
    return np.einsum("bkn,bn->bk", A, mid) + np.einsum("bkn,bn->bk", np.abs(A), rad) + b


# ---------------------------------------------------------------------------
# single-box API


def ibp_bounds(net: Network, box: Hyperrectangle) -> IntervalRelaxation:
    lo, hi = ibp_batch(net, box.lower[None], box.upper[None])
    return IntervalRelaxation(lo[0], hi[0])


def crown_bounds(net: Network, box: Hyperrectangle, mode: str = CROWN) -> LinearRelaxation:
    al, bl, au, bu = crown_batch(net, box.lower[None], box.upper[None], mode)
    return LinearRelaxation(al[0], bl[0], au[0], bu[0], box)


def linear_to_interval(rel: LinearRelaxation) -> IntervalRelaxation:
    d = rel.domain
    mid, half = d.center, d.radius
    lo = rel.A_lower @ mid - np.abs(rel.A_lower) @ half + rel.b_lower
    hi = rel.A_upper @ mid + np.abs(rel.A_upper) @ half + rel.b_upper
    return IntervalRelaxation(lo, hi)


def composed_bounds(dyn: "DynamicsModel", net: Network, qx: Hyperrectangle, qv: Hyperrectangle,
                    mode: str = CROWN) -> LinearRelaxation:
    """Linear sandwich of net(F(x) + v) over the joint box qx x qv.

    Coefficients are ordered (x_1..x_n, v_1..v_n).
    """
    if qx.dim != dyn.state_dim or qv.dim != dyn.state_dim:
        raise ValueError("qx and qv must match the system's state dimension")
    (al, bl, au, bu), _ = composed_batch(dyn, net, qx.lower, qx.upper, qv.lower, qv.upper, mode)
    return LinearRelaxation(al[0], bl[0], au[0], bu[0], qx.product(qv))
