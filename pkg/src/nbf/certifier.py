"""Verification of the four stochastic barrier conditions and the safety bound.

Checks, for a candidate B on a system x' = F(x) + v:

* B >= 0 on X                      (non-negativity)
* B >= 1 on X_u                    (unsafe set)
* gamma >= max of B over X_0
* beta >= E[B(F(x) + v)] - B(x) on X_s

and reports P_safe >= 1 - (gamma + beta * H). B is taken to be 0 outside X
(the stopped process), which is what makes the noise truncation exact: noise
values that push F(x) + v out of X contribute nothing to the expectation.

Floating-point rounding is not tracked; instead a slack of ``SLACK`` is
allowed on non-negativity and added to gamma and beta. Shifting B up by the
slack turns a certificate with those tolerances into an exact one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from nbf.dynamics import DynamicsModel
from nbf.network import Network
from nbf.noise import noise_grid, truncated_support
from nbf.partition import BnBConfig, BnBResult, Status, bnb_maximize, bnb_minimize, grid_cells
from nbf.relaxation import (CROWN, Hyperrectangle, composed_batch, crown_batch, max_line_batch,
                            max_line_rows, min_line_batch, min_line_rows)
from nbf.sets import BoxSet, SetExpr

SLACK = 1e-9

CERTIFIED = "certified"
VIOLATED = "violated"
INCONCLUSIVE = "inconclusive"
NOT_CERTIFIED = "not certified"


@dataclass
class CertifyConfig:
    bnb: BnBConfig = field(default_factory=BnBConfig)
    mode: str = CROWN
    noise_cells: int | list[int] = 32
    # joint (state box, noise cell) pairs relaxed per call
    pair_batch: int = 16384
    slack: float = SLACK


@dataclass
class CheckResult:
    verdict: str
    bound: float           # certified bound (lower for 4a/4b, upper for gamma/beta)
    witness_bound: float   # attained-side bound from points inside the target set
    status: str
    regions_explored: int
    iterations: int
    seconds: float

    def as_dict(self) -> dict:
        return {"verdict": self.verdict, "bound": self.bound, "witness_bound": self.witness_bound,
                "status": self.status, "regions_explored": self.regions_explored,
                "iterations": self.iterations, "seconds": self.seconds}


@dataclass
class CertificationReport:
    cond_nonneg: CheckResult
    cond_unsafe: CheckResult
    gamma_check: CheckResult
    beta_check: CheckResult
    gamma: float
    beta: float
    H: int
    epsilon: float
    p_safe_lower: Optional[float]

    @property
    def certified(self) -> bool:
        return self.p_safe_lower is not None

    @property
    def checks(self) -> dict[str, CheckResult]:
        return {"cond_nonneg": self.cond_nonneg, "cond_unsafe": self.cond_unsafe,
                "gamma": self.gamma_check, "beta": self.beta_check}

    @property
    def overall(self) -> str:
        """Verdict over the pass/fail conditions (B >= 0 on X, B >= 1 on X_u).

        gamma and beta are sound over-bounds whatever their search status, so
        an unclosed gap there marks the bound as loose, not the run as failed.
        """
        verdicts = [self.cond_nonneg.verdict, self.cond_unsafe.verdict]
        if VIOLATED in verdicts:
            return VIOLATED
        if INCONCLUSIVE in verdicts:
            return INCONCLUSIVE
        return CERTIFIED

    def as_dict(self) -> dict:
        return {
            "cond_nonneg": self.cond_nonneg.as_dict(),
            "cond_unsafe": self.cond_unsafe.as_dict(),
            "gamma": self.gamma,
            "beta": self.beta,
            "H": self.H,
            "epsilon": self.epsilon,
            "p_safe_lower": self.p_safe_lower if self.p_safe_lower is not None else NOT_CERTIFIED,
            "status": self.overall,
            "regions": {k: c.regions_explored for k, c in self.checks.items()},
            "timings": {k: c.seconds for k, c in self.checks.items()},
            "details": {"gamma": self.gamma_check.as_dict(), "beta": self.beta_check.as_dict()},
        }


def safety_bound(gamma: float, beta: float, H: int) -> tuple[float, float]:
    """(epsilon, p_safe_lower) with the clamp to [0, 1]."""
    eps = gamma + beta * H
    return eps, max(0.0, min(1.0, 1.0 - eps))


def _net_objective(net: Network, mode: str):
    def objective(lo, hi):
        al, bl, au, bu = crown_batch(net, lo, hi, mode)
        return al[:, 0], bl[:, 0], au[:, 0], bu[:, 0]
    return objective


def _within_state_space(dyn: DynamicsModel, box: Hyperrectangle) -> Hyperrectangle:
    X = dyn.state_space
    lo, hi = np.maximum(box.lower, X.lower), np.minimum(box.upper, X.upper)
    if np.any(lo > hi):
        raise ValueError("target set lies outside the state space")
    return Hyperrectangle(lo, hi)


def _lower_check(objective, target: SetExpr, domain, threshold: float, tol: float,
                 cfg: BnBConfig, trace: bool = False) -> tuple[CheckResult, BnBResult]:
    """Prove min over target >= threshold - tol, or find a point below it."""
    t0 = time.perf_counter()
    limit = threshold - tol
    res = bnb_minimize(objective, target, cfg, domain,
                       stop_when=lambda c, b: c >= limit or b < limit, trace=trace)
    if res.status is Status.VACUOUS or res.certified >= limit:
        verdict = CERTIFIED
    elif res.best < limit:
        verdict = VIOLATED
    else:
        verdict = INCONCLUSIVE
    out = CheckResult(verdict, res.certified, res.best, res.status.value, res.regions_explored,
                      res.iterations, time.perf_counter() - t0)
    return out, res


def check_nonnegativity(net: Network, dyn: DynamicsModel, cfg: CertifyConfig) -> CheckResult:
    X = dyn.state_space
    return _lower_check(_net_objective(net, cfg.mode), BoxSet(X), X, 0.0, cfg.slack, cfg.bnb)[0]


def check_unsafe(net: Network, dyn: DynamicsModel, cfg: CertifyConfig) -> CheckResult:
    target = dyn.unsafe_set
    if target.is_empty():
        return CheckResult(CERTIFIED, float("inf"), float("inf"), Status.VACUOUS.value, 0, 0, 0.0)
    domain = _within_state_space(dyn, target.bounding_box())
    return _lower_check(_net_objective(net, cfg.mode), target, domain, 1.0, 0.0, cfg.bnb)[0]


def _upper_result(res: BnBResult, slack: float, t0: float) -> tuple[float, CheckResult]:
    if res.status is Status.VACUOUS:
        value = 0.0
    else:
        value = max(0.0, res.certified) + slack
    verdict = INCONCLUSIVE if res.status is Status.INCONCLUSIVE else CERTIFIED
    return value, CheckResult(verdict, value, res.best, res.status.value, res.regions_explored,
                              res.iterations, time.perf_counter() - t0)


def compute_gamma(net: Network, dyn: DynamicsModel, cfg: CertifyConfig) -> tuple[float, CheckResult]:
    """Certified over-bound of max B over X_0, clamped at 0 and padded by the slack."""
    target = dyn.initial_set
    if target.is_empty():
        raise ValueError("initial set is empty")
    t0 = time.perf_counter()
    domain = _within_state_space(dyn, target.bounding_box())
    res = bnb_maximize(_net_objective(net, cfg.mode), target, cfg.bnb, domain)
    return _upper_result(res, cfg.slack, t0)


# ---------------------------------------------------------------------------
# expected one-step increase


@dataclass(frozen=True)
class NoiseCells:
    """Noise partition with per-cell mass and partial expectation."""

    lo: np.ndarray
    hi: np.ndarray
    mass: np.ndarray
    moment: np.ndarray   # ∫_cell v p(v) dv, shape (C, n)

    @property
    def count(self) -> int:
        return self.lo.shape[0]


def noise_support(dyn: DynamicsModel, cover: Hyperrectangle | None = None) -> Hyperrectangle:
    """Noise box outside of which F(x) + v leaves X for every x in ``cover``.

    This is [-span, span] with span the width of X whenever F maps ``cover``
    into X. When F can leave X the box is widened to [X_lo - max F, X_hi - min F].
    """
    X = dyn.state_space
    base = truncated_support(X)
    cover = X if cover is None else cover
    al, bl, au, bu = dyn.relax_batch(cover.lower[None], cover.upper[None])
    f_lo = min_line_rows(al, bl, cover.lower[None], cover.upper[None])[0]
    f_hi = max_line_rows(au, bu, cover.lower[None], cover.upper[None])[0]
    return Hyperrectangle(np.minimum(base.lower, X.lower - f_hi), np.maximum(base.upper, X.upper - f_lo))


def noise_cells(dyn: DynamicsModel, cells: int | list[int], cover: Hyperrectangle | None = None) -> NoiseCells:
    lo, hi = noise_grid(dyn.noise, noise_support(dyn, cover), cells)
    mass = dyn.noise.box_probability_batch(lo, hi)
    moment = dyn.noise.partial_expectation_batch(lo, hi)
    # cells with no probability contribute nothing
    keep = (mass > 0.0) | np.any(moment != 0.0, axis=1)
    return NoiseCells(lo[keep], hi[keep], mass[keep], moment[keep])


def _stopped_lines(al, bl, au, bu, jlo, jhi, y_lo, y_hi, X: Hyperrectangle):
    """Lines sandwiching B(y) with B set to 0 outside X.

    Inputs are the joint (x, v) lines of the network at y = F(x) + v. Where
    the image box lies in X they are used as is; where it misses X both lines
    are 0; where it straddles the boundary the upper line bounds max(B, 0)
    and the lower line bounds min(B, 0), via the ReLU chord on [zl, zu].
    """
    inside = np.all((y_lo >= X.lower) & (y_hi <= X.upper), axis=1)
    outside = np.any((y_hi < X.lower) | (y_lo > X.upper), axis=1)
    straddle = ~inside & ~outside
    zl = min_line_batch(al, bl, jlo, jhi)
    zu = max_line_batch(au, bu, jlo, jhi)
    unstable = (zl < 0.0) & (zu > 0.0)
    s = np.where(unstable, zu / np.where(unstable, zu - zl, 1.0), 0.0)

    # upper of max(z, 0)
    up_scale = np.where(zl >= 0.0, 1.0, np.where(zu <= 0.0, 0.0, s))
    up_shift = np.where(unstable, -s * zl, 0.0)
    # lower of min(z, 0) = z - relu(z) >= (1 - s) z + s zl
    lo_scale = np.where(zu <= 0.0, 1.0, np.where(zl >= 0.0, 0.0, 1.0 - s))
    lo_shift = np.where(unstable, s * zl, 0.0)

    u_scale = np.where(inside, 1.0, np.where(straddle, up_scale, 0.0))
    u_shift = np.where(straddle, up_shift, 0.0)
    l_scale = np.where(inside, 1.0, np.where(straddle, lo_scale, 0.0))
    l_shift = np.where(straddle, lo_shift, 0.0)
    return (al * l_scale[:, None], bl * l_scale + l_shift,
            au * u_scale[:, None], bu * u_scale + u_shift)


def expectation_lines(net: Network, dyn: DynamicsModel, x_lo, x_hi, cells: NoiseCells,
                      mode: str = CROWN, pair_batch: int = 16384):
    """Linear bounds in x of E[B(F(x) + v)] over each state box.

    For a joint upper line a_x x + a_v v + b over q x q_v, integrating against
    the density over q_v gives P(q_v) (a_x x + b) + a_v . ∫_{q_v} v p(v) dv;
    the sum over cells bounds the expectation. Noise outside the partition
    sends F(x) + v out of X, where B is 0, so it adds nothing.
    Returns (A_lower (N, n), b_lower, A_upper, b_upper).
    """
    x_lo, x_hi = np.atleast_2d(x_lo), np.atleast_2d(x_hi)
    n_box, n = x_lo.shape
    C = cells.count
    out_al, out_au = np.zeros((n_box, n)), np.zeros((n_box, n))
    out_bl, out_bu = np.zeros(n_box), np.zeros(n_box)
    if C == 0:
        return out_al, out_bl, out_au, out_bu
    step = max(1, pair_batch // C)
    for s in range(0, n_box, step):
        e = min(n_box, s + step)
        k = e - s
        xl, xh = np.repeat(x_lo[s:e], C, axis=0), np.repeat(x_hi[s:e], C, axis=0)
        vl, vh = np.tile(cells.lo, (k, 1)), np.tile(cells.hi, (k, 1))
        (al, bl, au, bu), (y_lo, y_hi) = composed_batch(dyn, net, xl, xh, vl, vh, mode)
        jlo, jhi = np.concatenate([xl, vl], axis=1), np.concatenate([xh, vh], axis=1)
        al, bl, au, bu = _stopped_lines(al[:, 0], bl[:, 0], au[:, 0], bu[:, 0], jlo, jhi,
                                        y_lo, y_hi, dyn.state_space)
        mass = np.tile(cells.mass, k)
        moment = np.tile(cells.moment, (k, 1))
        for (A, b, acc_a, acc_b) in ((al, bl, out_al, out_bl), (au, bu, out_au, out_bu)):
            ax = A[:, :n] * mass[:, None]
            bx = b * mass + np.einsum("bn,bn->b", A[:, n:], moment)
            acc_a[s:e] = ax.reshape(k, C, n).sum(axis=1)
            acc_b[s:e] = bx.reshape(k, C).sum(axis=1)
    return out_al, out_bl, out_au, out_bu


def increase_objective(net: Network, dyn: DynamicsModel, cells: NoiseCells, mode: str = CROWN,
                       pair_batch: int = 16384):
    """Batched lines of E[B(F(x) + v)] - B(x) over state boxes."""
    def objective(lo, hi):
        el, ebl, eu, ebu = expectation_lines(net, dyn, lo, hi, cells, mode, pair_batch)
        al, bl, au, bu = crown_batch(net, lo, hi, mode)
        return el - au[:, 0], ebl - bu[:, 0], eu - al[:, 0], ebu - bl[:, 0]
    return objective


def compute_beta(net: Network, dyn: DynamicsModel, cfg: CertifyConfig,
                 refine: bool = True) -> tuple[float, CheckResult]:
    """Certified over-bound of E[B(F(x) + v)] - B(x) over a cover of X_s.

    With ``refine`` the state partition is refined by branch-and-bound;
    without it the bound is taken over the initial grid alone.
    """
    t0 = time.perf_counter()
    target = dyn.safe_set
    if target.is_empty():
        return 0.0, CheckResult(CERTIFIED, 0.0, 0.0, Status.VACUOUS.value, 0, 0, 0.0)
    domain = _within_state_space(dyn, target.bounding_box())
    cells = noise_cells(dyn, cfg.noise_cells, domain)
    objective = increase_objective(net, dyn, cells, cfg.mode, cfg.pair_batch)
    if refine:
        res = bnb_maximize(objective, target, cfg.bnb, domain)
        return _upper_result(res, cfg.slack, t0)
    lo, hi = grid_cells(domain, cfg.bnb.grid_for(domain.dim))
    keep = target.may_intersect(lo, hi)
    lo, hi = lo[keep], hi[keep]
    al, bl, au, bu = objective(lo, hi)
    upper = float(np.max(max_line_batch(au, bu, lo, hi)))
    value = max(0.0, upper) + cfg.slack
    return value, CheckResult(CERTIFIED, value, float("nan"), "fixed_grid", lo.shape[0], 0,
                              time.perf_counter() - t0)


def certify(net: Network, dyn: DynamicsModel, H: int, cfg: CertifyConfig | None = None) -> CertificationReport:
    if H < 1:
        raise ValueError("horizon H must be at least 1")
    if net.input_dim != dyn.state_dim or net.output_dim != 1:
        raise ValueError(f"network maps {net.input_dim} -> {net.output_dim}; "
                         f"expected {dyn.state_dim} -> 1 for this system")
    cfg = cfg or CertifyConfig()
    nonneg = check_nonnegativity(net, dyn, cfg)
    unsafe = check_unsafe(net, dyn, cfg)
    gamma, g_check = compute_gamma(net, dyn, cfg)
    beta, b_check = compute_beta(net, dyn, cfg)
    eps, p = safety_bound(gamma, beta, H)
    valid = nonneg.verdict == CERTIFIED and unsafe.verdict == CERTIFIED
    return CertificationReport(nonneg, unsafe, g_check, b_check, gamma, beta, H, eps,
                               p if valid else None)
