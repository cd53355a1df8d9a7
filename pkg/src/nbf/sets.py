"""Set expressions for initial, safe and unsafe regions.

Point membership is exact. Box queries are conservative in the direction
that keeps verification sound: ``may_intersect`` never returns False for a box
that meets the set, and ``inside_box`` never returns True for a box that is
not fully contained in it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from nbf.relaxation import Hyperrectangle


class SetExpr:
    dim: int

    def contains(self, xs) -> np.ndarray:
        raise NotImplementedError

    def may_intersect(self, lo, hi) -> np.ndarray:
        raise NotImplementedError

    def inside_box(self, lo, hi) -> np.ndarray:
        """True where the whole box lies in the set (conservative)."""
        raise NotImplementedError

    def bounding_box(self) -> Hyperrectangle:
        raise NotImplementedError

    def witnesses(self, lo, hi) -> tuple[np.ndarray, np.ndarray]:
        """A point of box ∩ set per box, plus a found-mask.

        Default: probe the box center and corners against exact membership.
        """
        lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
        n, d = lo.shape
        pts = np.empty_like(lo)
        found = np.zeros(n, dtype=bool)
        probes = [(lo + hi) / 2.0]
        if d <= 6:
            for bits in range(1 << d):
                mask = np.array([(bits >> k) & 1 for k in range(d)], dtype=bool)
                probes.append(np.where(mask, hi, lo))
        for p in probes:
            hit = ~found & self.contains(p)
            pts[hit] = p[hit]
            found |= hit
        return pts, found

    def is_empty(self) -> bool:
        return False

    def __or__(self, other: "SetExpr") -> "SetExpr":
        return Union((self, other))

    def __sub__(self, other: "SetExpr") -> "SetExpr":
        return Difference(self, other)


def _pts(xs) -> np.ndarray:
    return np.atleast_2d(np.asarray(xs, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class BoxSet(SetExpr):
    box: Hyperrectangle

    @property
    def dim(self) -> int:
        return self.box.dim

    def contains(self, xs):
        xs = _pts(xs)
        return np.all((xs >= self.box.lower) & (xs <= self.box.upper), axis=1)

    def may_intersect(self, lo, hi):
        lo, hi = _pts(lo), _pts(hi)
        return np.all((hi >= self.box.lower) & (lo <= self.box.upper), axis=1)

    def inside_box(self, lo, hi):
        lo, hi = _pts(lo), _pts(hi)
        return np.all((lo >= self.box.lower) & (hi <= self.box.upper), axis=1)

    def bounding_box(self):
        return self.box

    def witnesses(self, lo, hi):
        lo, hi = _pts(lo), _pts(hi)
        ilo, ihi = np.maximum(lo, self.box.lower), np.minimum(hi, self.box.upper)
        return (ilo + ihi) / 2.0, np.all(ilo <= ihi, axis=1)


def rect(a: float, b: float, c: float, d: float) -> BoxSet:
    """Rectangle with lower corner (a, b), width c and height d."""
    return BoxSet(Hyperrectangle([a, b], [a + c, b + d]))


@dataclass(frozen=True, eq=False)
class Ball(SetExpr):
    """Closed Euclidean ball; ``circ(a, b, r)`` in two dimensions."""

    center: tuple[float, ...]
    radius: float

    @property
    def dim(self) -> int:
        return len(self.center)

    def contains(self, xs):
        xs = _pts(xs)
        return np.sum((xs - np.asarray(self.center)) ** 2, axis=1) <= self.radius ** 2

    def _nearest(self, lo, hi):
        return np.clip(np.asarray(self.center), lo, hi)

    def may_intersect(self, lo, hi):
        lo, hi = _pts(lo), _pts(hi)
        return self.contains(self._nearest(lo, hi))

    def inside_box(self, lo, hi):
        lo, hi = _pts(lo), _pts(hi)
        c = np.asarray(self.center)
        far = np.where(np.abs(lo - c) > np.abs(hi - c), lo, hi)
        return self.contains(far)

    def bounding_box(self):
        c = np.asarray(self.center)
        return Hyperrectangle(c - self.radius, c + self.radius)

    def witnesses(self, lo, hi):
        lo, hi = _pts(lo), _pts(hi)
        p = self._nearest(lo, hi)
        return p, self.contains(p)


def circ(a: float, b: float, r: float) -> Ball:
    return Ball((float(a), float(b)), float(r))


@dataclass(frozen=True, eq=False)
class Singleton(SetExpr):
    point: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.point)

    def contains(self, xs):
        return np.all(_pts(xs) == np.asarray(self.point), axis=1)

    def may_intersect(self, lo, hi):
        p = np.asarray(self.point)
        lo, hi = _pts(lo), _pts(hi)
        return np.all((lo <= p) & (p <= hi), axis=1)

    def inside_box(self, lo, hi):
        lo, hi = _pts(lo), _pts(hi)
        return np.all((lo == np.asarray(self.point)) & (hi == np.asarray(self.point)), axis=1)

    def bounding_box(self):
        return Hyperrectangle.point(self.point)

    def witnesses(self, lo, hi):
        lo = _pts(lo)
        return np.broadcast_to(np.asarray(self.point), lo.shape).copy(), self.may_intersect(lo, hi)


@dataclass(frozen=True, eq=False)
class Union(SetExpr):
    parts: tuple[SetExpr, ...]

    def __post_init__(self):
        flat: list[SetExpr] = []
        for p in self.parts:
            flat.extend(p.parts if isinstance(p, Union) else (p,))
        if not flat:
            raise ValueError("union needs at least one member")
        if len({p.dim for p in flat}) != 1:
            raise ValueError("union members differ in dimension")
        object.__setattr__(self, "parts", tuple(flat))

    @property
    def dim(self) -> int:
        return self.parts[0].dim

    def contains(self, xs):
        return np.any([p.contains(xs) for p in self.parts], axis=0)

    def may_intersect(self, lo, hi):
        return np.any([p.may_intersect(lo, hi) for p in self.parts], axis=0)

    def inside_box(self, lo, hi):
        return np.any([p.inside_box(lo, hi) for p in self.parts], axis=0)

    def bounding_box(self):
        boxes = [p.bounding_box() for p in self.parts]
        return Hyperrectangle(np.min([b.lower for b in boxes], axis=0),
                              np.max([b.upper for b in boxes], axis=0))

    def witnesses(self, lo, hi):
        lo, hi = _pts(lo), _pts(hi)
        pts = np.empty_like(lo)
        found = np.zeros(lo.shape[0], dtype=bool)
        for p in self.parts:
            w, ok = p.witnesses(lo, hi)
            hit = ok & ~found
            pts[hit] = w[hit]
            found |= hit
        return pts, found


@dataclass(frozen=True, eq=False)
class Difference(SetExpr):
    """``base`` with ``removed`` taken out, e.g. X \\ X_s."""

    base: SetExpr
    removed: SetExpr

    @property
    def dim(self) -> int:
        return self.base.dim

    def contains(self, xs):
        return self.base.contains(xs) & ~self.removed.contains(xs)

    def may_intersect(self, lo, hi):
        return self.base.may_intersect(lo, hi) & ~self.removed.inside_box(lo, hi)

    def inside_box(self, lo, hi):
        return self.base.inside_box(lo, hi) & ~self.removed.may_intersect(lo, hi)

    def bounding_box(self):
        return self.base.bounding_box()

    def witnesses(self, lo, hi):
        pts, found = SetExpr.witnesses(self, lo, hi)
        # points of the base that fall outside every removed piece
        bw, bok = self.base.witnesses(lo, hi)
        extra = ~found & bok & self.contains(bw)
        pts[extra] = bw[extra]
        return pts, found | extra


@dataclass(frozen=True, eq=False)
class EmptySet(SetExpr):
    dim: int

    def contains(self, xs):
        return np.zeros(_pts(xs).shape[0], dtype=bool)

    def may_intersect(self, lo, hi):
        return np.zeros(_pts(lo).shape[0], dtype=bool)

    def inside_box(self, lo, hi):
        return np.zeros(_pts(lo).shape[0], dtype=bool)

    def bounding_box(self):
        raise ValueError("empty set has no bounding box")

    def witnesses(self, lo, hi):
        lo = _pts(lo)
        return np.zeros_like(lo), np.zeros(lo.shape[0], dtype=bool)

    def is_empty(self) -> bool:
        return True


def intersect_box(s: SetExpr, box: Hyperrectangle) -> SetExpr:
    """``s`` restricted to ``box``, represented as X \\ (X \\ s)."""
    outer = BoxSet(box)
    return Difference(outer, Difference(outer, s))


def from_config(spec, dim: int) -> SetExpr:
    """Build a set from its config representation.

    Accepted forms (tables): {type="box", lower=[..], upper=[..]},
    {type="ball", center=[..], radius=r}, {type="rect", a, b, c, d},
    {type="point", point=[..]}, {type="union", parts=[...]},
    {type="difference", base=..., removed=...}. A list means a union.
    """
    if isinstance(spec, list):
        return Union(tuple(from_config(s, dim) for s in spec))
    kind = spec.get("type")
    if kind == "box":
        out: SetExpr = BoxSet(Hyperrectangle(spec["lower"], spec["upper"]))
    elif kind in ("ball", "circ"):
        out = Ball(tuple(float(c) for c in spec["center"]), float(spec["radius"]))
    elif kind == "rect":
        out = rect(spec["a"], spec["b"], spec["c"], spec["d"])
    elif kind == "point":
        out = Singleton(tuple(float(c) for c in spec["point"]))
    elif kind == "union":
        out = Union(tuple(from_config(s, dim) for s in spec["parts"]))
    elif kind == "difference":
        out = Difference(from_config(spec["base"], dim), from_config(spec["removed"], dim))
    else:
        raise ValueError(f"unknown set type {kind!r}")
    if out.dim != dim:
        raise ValueError(f"set of dimension {out.dim} given for a {dim}-dimensional system")
    return out


def as_union(parts: Sequence[SetExpr]) -> SetExpr:
    return parts[0] if len(parts) == 1 else Union(tuple(parts))
