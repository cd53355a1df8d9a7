"""Branch-and-bound refinement of hyperrectangle partitions.

The objective is any scalar function for which a batched linear relaxation
over boxes is available. Minimization keeps a certified lower bound (min of
the lower lines over live regions) and a best upper bound on the true minimum
over the target set. Regions are split at the midpoint of the axis with the
largest width-weighted linear coefficients and pruned when they can no longer
hold the minimum or no longer meet the target set.

Two details keep the bounds honest:

* the upper bound of a region is taken at a point known to lie in the target
  set (or over the whole box when the box is inside the target), so pruning
  against it never discards the true minimizer;
* a child's lower bound is never allowed below its parent's, which makes the
  certified bound monotone across iterations.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from nbf import jsonio
from nbf.relaxation import Hyperrectangle, min_line_batch
from nbf.sets import SetExpr

# lines over a batch of boxes: (A_lower (N, n), b_lower (N,), A_upper (N, n), b_upper (N,))
Objective = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]


class Status(str, enum.Enum):
    CONVERGED = "converged"          # gap below t_gap
    EARLY_STOP = "early_stop"        # caller predicate satisfied
    INCONCLUSIVE = "inconclusive"    # budget exhausted
    VACUOUS = "vacuous"              # target set misses every initial cell


@dataclass
class BnBConfig:
    t_gap: float = 1e-3
    max_regions: int = 200_000
    max_iterations: int = 40
    initial_grid: int | Sequence[int] = 4
    split_mode: str = "all"
    split_batch: int = 512
    prune: bool = True

    def __post_init__(self):
        if self.t_gap <= 0 or self.max_regions < 1 or self.max_iterations < 1:
            raise ValueError("t_gap, max_regions and max_iterations must be positive")
        grid = [self.initial_grid] if isinstance(self.initial_grid, int) else list(self.initial_grid)
        if any(int(g) < 1 for g in grid):
            raise ValueError("initial_grid cell counts must be positive")
        if self.split_mode not in ("all", "worst"):
            raise ValueError("split_mode must be 'all' or 'worst'")

    def grid_for(self, dim: int) -> list[int]:
        if isinstance(self.initial_grid, int):
            return [self.initial_grid] * dim
        grid = [int(g) for g in self.initial_grid]
        if len(grid) != dim:
            raise ValueError(f"initial_grid has {len(grid)} entries for a {dim}-dimensional set")
        return grid


@dataclass
class Region:
    box: Hyperrectangle
    A_lower: np.ndarray
    b_lower: float
    A_upper: np.ndarray
    b_upper: float
    lo: float
    hi: float


@dataclass
class BnBResult:
    sense: str
    certified: float      # lower bound of the min (or upper bound of the max)
    best: float           # upper bound of the min (or lower bound of the max)
    status: Status
    iterations: int
    regions_explored: int
    live_regions: int
    gap_history: list[float] = field(default_factory=list)
    trace: list[tuple] = field(default_factory=list)

    @property
    def gap(self) -> float:
        return abs(self.best - self.certified) if np.isfinite(self.best) else float("inf")

    @property
    def certified_lower(self) -> float:
        return self.certified if self.sense == "min" else self.best

    @property
    def best_upper(self) -> float:
        return self.best if self.sense == "min" else self.certified

    def as_dict(self) -> dict:
        return {"sense": self.sense, "certified": self.certified, "best": self.best,
                "status": self.status.value, "iterations": self.iterations,
                "regions_explored": self.regions_explored, "live_regions": self.live_regions}


def split_axis(region: Region) -> int:
    widths = region.box.widths
    if not np.any(widths > 0.0):
        raise ValueError("cannot split a fully degenerate box")
    score = (np.abs(region.A_lower) + np.abs(region.A_upper)) * widths
    return int(np.argmax(np.where(widths > 0.0, score, -np.inf)))


def split_mid(region: Region, d: int) -> tuple[Hyperrectangle, Hyperrectangle]:
    box = region.box if isinstance(region, Region) else region
    lo, hi = box.lower, box.upper
    if not hi[d] > lo[d]:
        raise ValueError(f"axis {d} is degenerate")
    mid = (lo[d] + hi[d]) / 2.0
    left_hi, right_lo = hi.copy(), lo.copy()
    left_hi[d] = mid
    right_lo[d] = mid
    return Hyperrectangle(lo, left_hi), Hyperrectangle(right_lo, hi)


def grid_cells(box: Hyperrectangle, counts: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Uniform grid over ``box``; degenerate axes always get one cell."""
    axes = []
    for i, c in enumerate(counts):
        c = 1 if box.upper[i] == box.lower[i] else int(c)
        edges = np.linspace(box.lower[i], box.upper[i], c + 1)
        edges[0], edges[-1] = box.lower[i], box.upper[i]
        axes.append(np.stack([edges[:-1], edges[1:]], axis=1))
    mesh = np.meshgrid(*[np.arange(len(a)) for a in axes], indexing="ij")
    idx = np.stack([m.ravel() for m in mesh], axis=1)
    lo = np.stack([axes[i][idx[:, i], 0] for i in range(len(axes))], axis=1)
    hi = np.stack([axes[i][idx[:, i], 1] for i in range(len(axes))], axis=1)
    return lo, hi


def _split_batch(lo, hi, al, au):
    widths = hi - lo
    score = (np.abs(al) + np.abs(au)) * widths
    score = np.where(widths > 0.0, score, -np.inf)
    axis = np.argmax(score, axis=1)
    rows = np.arange(lo.shape[0])
    mid = (lo[rows, axis] + hi[rows, axis]) / 2.0
    left_hi, right_lo = hi.copy(), lo.copy()
    left_hi[rows, axis] = mid
    right_lo[rows, axis] = mid
    # children interleaved so creation order follows parent order
    new_lo = np.stack([lo, right_lo], axis=1).reshape(-1, lo.shape[1])
    new_hi = np.stack([left_hi, hi], axis=1).reshape(-1, hi.shape[1])
    return new_lo, new_hi


def bnb_minimize(objective: Objective, target: SetExpr, cfg: BnBConfig,
                 domain: Hyperrectangle | None = None,
                 stop_when: Callable[[float, float], bool] | None = None,
                 trace: bool = False) -> BnBResult:
    """Bracket min over ``target`` of the function relaxed by ``objective``.

    ``domain`` (default: the target's bounding box) is gridded by
    ``cfg.initial_grid``. ``stop_when(certified_lower, best_upper)`` ends the
    search early, e.g. once a barrier condition is proven.
    """
    if target.is_empty():
        return BnBResult("min", float("inf"), float("inf"), Status.VACUOUS, 0, 0, 0)
    if domain is None:
        domain = target.bounding_box()
    lo, hi = grid_cells(domain, cfg.grid_for(domain.dim))
    keep = target.may_intersect(lo, hi)
    lo, hi = lo[keep], hi[keep]
    if lo.shape[0] == 0:
        return BnBResult("min", float("inf"), float("inf"), Status.VACUOUS, 0, 0, 0)

    def relax(lo, hi, parent_lo):
        al, bl, au, bu = objective(lo, hi)
        r_lo = np.maximum(min_line_batch(al, bl, lo, hi), parent_lo)
        inside = target.inside_box(lo, hi)
        w, found = target.witnesses(lo, hi)
        at_w = np.einsum("bn,bn->b", au, w) + bu
        r_hi = np.where(inside, min_line_batch(au, bu, lo, hi), np.where(found, at_w, np.inf))
        return al, au, r_lo, r_hi

    al, au, r_lo, r_hi = relax(lo, hi, np.full(lo.shape[0], -np.inf))
    explored = lo.shape[0]
    best = float(np.min(r_hi))
    certified = min(float(np.min(r_lo)), best)
    history = [best - certified]
    rows: list[tuple] = []
    if trace:
        rows.extend((0, *l, *h, a, b) for l, h, a, b in zip(lo, hi, r_lo, r_hi))

    iteration = 0
    status = Status.INCONCLUSIVE
    # an initial grid above the region budget is bounded but never refined
    over_budget = lo.shape[0] > cfg.max_regions
    while True:
        if stop_when is not None and stop_when(certified, best):
            status = Status.EARLY_STOP
            break
        if best - certified < cfg.t_gap:
            status = Status.CONVERGED
            break
        if iteration >= cfg.max_iterations or over_budget:
            status = Status.INCONCLUSIVE
            break

        if cfg.prune:
            keep = r_lo <= best
            lo, hi, al, au, r_lo, r_hi = lo[keep], hi[keep], al[keep], au[keep], r_lo[keep], r_hi[keep]

        splittable = np.any(hi > lo, axis=1)
        capacity = cfg.max_regions - lo.shape[0]
        order = np.argsort(r_lo, kind="stable")
        order = order[splittable[order]]
        if cfg.split_mode == "worst":
            order = order[:cfg.split_batch]
        order = order[:max(capacity, 0)]
        if order.size == 0:
            status = Status.INCONCLUSIVE
            break
        chosen = np.zeros(lo.shape[0], dtype=bool)
        chosen[order] = True
        idx = np.flatnonzero(chosen)  # creation order among the chosen

        c_lo, c_hi = _split_batch(lo[idx], hi[idx], al[idx], au[idx])
        parent_lo = np.repeat(r_lo[idx], 2)
        meets = target.may_intersect(c_lo, c_hi)
        c_lo, c_hi, parent_lo = c_lo[meets], c_hi[meets], parent_lo[meets]
        c_al, c_au, c_rlo, c_rhi = relax(c_lo, c_hi, parent_lo)
        explored += c_lo.shape[0]
        iteration += 1

        rest = ~chosen
        lo = np.concatenate([lo[rest], c_lo])
        hi = np.concatenate([hi[rest], c_hi])
        al = np.concatenate([al[rest], c_al])
        au = np.concatenate([au[rest], c_au])
        r_lo = np.concatenate([r_lo[rest], c_rlo])
        r_hi = np.concatenate([r_hi[rest], c_rhi])
        if trace:
            rows.extend((iteration, *l, *h, a, b) for l, h, a, b in zip(c_lo, c_hi, c_rlo, c_rhi))
        if lo.shape[0] == 0:
            # every child missed the target: nothing left to bound
            certified = best
            history.append(0.0)
            status = Status.CONVERGED
            break
        best = min(best, float(np.min(r_hi)))
        # pruned regions satisfy lo > best, so they only matter through best;
        # the cap also absorbs ties where rounding puts a pruned lo an ulp above best
        certified = min(max(certified, float(np.min(r_lo))), best)
        history.append(best - certified)

    return BnBResult("min", certified, best, status, iteration, explored, int(lo.shape[0]),
                     history, rows)


def bnb_maximize(objective: Objective, target: SetExpr, cfg: BnBConfig,
                 domain: Hyperrectangle | None = None,
                 stop_when: Callable[[float, float], bool] | None = None,
                 trace: bool = False) -> BnBResult:
    """Mirror of :func:`bnb_minimize`: ``certified`` over-bounds the max."""

    def negated(lo, hi):
        al, bl, au, bu = objective(lo, hi)
        return -au, -bu, -al, -bl

    inner_stop = None
    if stop_when is not None:
        def inner_stop(c, b):
            return stop_when(-c, -b)

    res = bnb_minimize(negated, target, cfg, domain, inner_stop, trace)
    rows = [(r[0], *r[1:-2], -r[-1], -r[-2]) for r in res.trace]
    return BnBResult("max", -res.certified, -res.best, res.status, res.iterations,
                     res.regions_explored, res.live_regions, res.gap_history, rows)


def write_trace_csv(result: BnBResult, dim: int, path: str | Path) -> None:
    """Rows (iteration, box lower..., box upper..., lo, hi) for gap maps."""
    header = (["iteration"] + [f"lower_{i}" for i in range(dim)]
              + [f"upper_{i}" for i in range(dim)] + ["lo", "hi"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in result.trace:
            w.writerow([row[0], *[jsonio.fmt_float(v) for v in row[1:]]])
