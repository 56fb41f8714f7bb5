"""Dyadic parabolic cube hierarchies.

A cube here is a space-time box (l - 4s, l + 4s) x B_z(w) in the max
norm, kept parabolic through z^2 = s.  Each cube carries six named
subregions: upper and lower halves, upper and lower eighths, and upper
and lower quarters of its time span, all over the same ball.

Two recursive collections are built from a root cube.  The core
collection subdivides the top and bottom eighths of every cube into
zeta^(n+2) congruent pieces (time split zeta^2-fold, each space axis
zeta-fold) and reads each piece as the corresponding eighth of a new,
eight-times-taller cube.  The extended collection applies the same move
to the quarters instead, seeded from every cube of the core collection.
Levels group cubes by spatial radius z_j = z_root / zeta^j, so the
extended level count obeys

    x_j = 2 zeta^(n+2) x_{j-1} + (2 zeta^(n+2))^j,  x_0 = 1.

Counts grow fast; builds are guarded by an explicit cube budget.
Levels are stored as flat arrays (one scale per level), not objects.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import InvalidArgumentError, ResourceLimitError
from .geometry import Ball, SpaceTimeRect

LINEAGES = ("root", "plus", "minus")
DEFAULT_BUDGET = 20_000_000
DEFAULT_DEPTH = {1: 3, 2: 2}


@dataclass(frozen=True)
class Cube:
    """Parabolic cube (l-4s, l+4s) x B_z(w) with z^2 = s."""

    l: float
    s: float
    z: float
    w: tuple
    level: int = 0
    lineage: str = "root"

    def __post_init__(self):
        object.__setattr__(self, "w", tuple(float(c) for c in np.atleast_1d(self.w)))
        if not (self.s > 0.0 and self.z > 0.0):
            raise InvalidArgumentError(f"cube scales must be positive, got s={self.s}, z={self.z}")
        if abs(self.z * self.z - self.s) > 1e-9 * self.s:
            raise InvalidArgumentError(
                f"cube is not parabolic: z^2={self.z * self.z} but s={self.s}")
        if self.lineage not in LINEAGES:
            raise InvalidArgumentError(f"unknown lineage {self.lineage!r}")
        if self.level < 0:
            raise InvalidArgumentError(f"level must be nonnegative, got {self.level}")

    @property
    def n(self) -> int:
        return len(self.w)

    @property
    def time_lo(self) -> float:
        return self.l - 4.0 * self.s

    @property
    def time_hi(self) -> float:
        return self.l + 4.0 * self.s

    def ball(self) -> Ball:
        return Ball(self.w, self.z)

    def rect(self) -> SpaceTimeRect:
        return SpaceTimeRect(self.time_lo, self.time_hi, self.ball())


def unit_cube(n: int) -> Cube:
    """The reference cube (0, 2) x B_{1/2}(0)."""
    if n not in (1, 2):
        raise InvalidArgumentError(f"spatial dimension must be 1 or 2, got {n}")
    return Cube(l=1.0, s=0.25, z=0.5, w=(0.0,) * n)


@dataclass(frozen=True)
class SubcubeSet:
    """The six canonical time subregions of a cube, over its ball."""

    c_plus: SpaceTimeRect
    c_minus: SpaceTimeRect
    d_plus: SpaceTimeRect
    d_minus: SpaceTimeRect
    i_plus: SpaceTimeRect
    i_minus: SpaceTimeRect


def subcubes(c: Cube) -> SubcubeSet:
    """Upper/lower halves (c), eighths (d), and quarters (i) of a cube."""
    b = c.ball()
    l, s = c.l, c.s
    return SubcubeSet(
        c_plus=SpaceTimeRect(l, l + 4 * s, b),
        c_minus=SpaceTimeRect(l - 4 * s, l, b),
        d_plus=SpaceTimeRect(l + 3 * s, l + 4 * s, b),
        d_minus=SpaceTimeRect(l - 4 * s, l - 3 * s, b),
        i_plus=SpaceTimeRect(l + 2 * s, l + 4 * s, b),
        i_minus=SpaceTimeRect(l - 4 * s, l - 2 * s, b),
    )


@dataclass
class CubeLevel:
    """All cubes of one level, as flat arrays sharing a scale.

    Order is deterministic: parent-major, then plus children before
    minus children, then time slot, then space combination.
    """

    level: int
    s: float
    z: float
    l: np.ndarray
    w: np.ndarray
    lineage: np.ndarray

    @property
    def count(self) -> int:
        return int(self.l.size)

    @property
    def n(self) -> int:
        return int(self.w.shape[1])

    def cube(self, k: int) -> Cube:
        if not (0 <= k < self.count):
            raise InvalidArgumentError(f"cube index {k} out of range [0, {self.count})")
        return Cube(float(self.l[k]), self.s, self.z, tuple(self.w[k]),
                    level=self.level, lineage=LINEAGES[int(self.lineage[k])])

    def iter_cubes(self, limit: int | None = None) -> Iterator[Cube]:
        stop = self.count if limit is None else min(limit, self.count)
        for k in range(stop):
            yield self.cube(k)


def _root_level(root: Cube) -> CubeLevel:
    return CubeLevel(level=root.level, s=root.s, z=root.z,
                     l=np.array([root.l]),
                     w=np.array([root.w], dtype=float),
                     lineage=np.zeros(1, dtype=np.uint8))


def _child_level(parent: CubeLevel, target: str, zeta: int) -> CubeLevel:
    """Subdivide the eighths or quarters of every cube of a level.

    Each congruent piece is the same-named subregion of exactly one
    child cube, which fixes the child center: for the top pieces the
    child's time top coincides with the piece top, for the bottom
    pieces the bottoms coincide.
    """
    s, z = parent.s, parent.z
    s2 = s / zeta**2
    z2 = z / zeta
    k = np.arange(zeta**2)
    if target == "eighth":
        # pieces of (l+3s, l+4s) and (l-4s, l-3s), each of height s2
        plus_off = 3.0 * s + (k + 1) * s2 - 4.0 * s2
        minus_off = -4.0 * s + k * s2 + 4.0 * s2
    elif target == "quarter":
        # pieces of (l+2s, l+4s) and (l-4s, l-2s), each of height 2*s2
        plus_off = 2.0 * s + 2.0 * (k + 1) * s2 - 4.0 * s2
        minus_off = -4.0 * s + 2.0 * k * s2 + 4.0 * s2
    else:
        raise InvalidArgumentError(f"unknown subdivision target {target!r}")

    n = parent.n
    axis = -z + (2.0 * np.arange(zeta) + 1.0) * z2
    grids = np.meshgrid(*([axis] * n), indexing="ij")
    space = np.stack([g.ravel() for g in grids], axis=1)

    P, T, Q = parent.count, zeta**2, zeta**n
    offs = np.stack([plus_off, minus_off])
    l_out = np.broadcast_to(
        (parent.l[:, None, None] + offs[None, :, :])[..., None],
        (P, 2, T, Q)).reshape(-1)
    w_out = np.broadcast_to(
        parent.w[:, None, None, None, :] + space[None, None, None, :, :],
        (P, 2, T, Q, n)).reshape(-1, n)
    lin = np.tile(np.repeat(np.array([1, 2], dtype=np.uint8), T * Q), P)
    return CubeLevel(level=parent.level + 1, s=s2, z=z2,
                     l=np.ascontiguousarray(l_out),
                     w=np.ascontiguousarray(w_out), lineage=lin)


def _concat_levels(a: CubeLevel, b: CubeLevel) -> CubeLevel:
    if a.level != b.level or abs(a.s - b.s) > 1e-12 * a.s:
        raise InvalidArgumentError("cannot merge levels with different scales")
    return CubeLevel(level=a.level, s=a.s, z=a.z,
                     l=np.concatenate([a.l, b.l]),
                     w=np.concatenate([a.w, b.w]),
                     lineage=np.concatenate([a.lineage, b.lineage]))


@dataclass
class CubeHierarchy:
    """Finite prefix of a recursive cube collection."""

    root: Cube
    depth: int
    kind: str
    division_factor: int
    levels: list = field(default_factory=list)

    def count_level(self, j: int) -> int:
        if not (0 <= j <= self.depth):
            raise InvalidArgumentError(f"level {j} outside built range [0, {self.depth}]")
        return self.levels[j].count

    @property
    def total(self) -> int:
        return sum(lv.count for lv in self.levels)


def _validated(root: Cube, depth: int, zeta: int, budget: int):
    if depth < 0 or int(depth) != depth:
        raise InvalidArgumentError(f"depth must be a nonnegative integer, got {depth}")
    if zeta < 2 or int(zeta) != zeta:
        raise InvalidArgumentError(f"division factor must be an integer >= 2, got {zeta}")
    if budget < 1:
        raise InvalidArgumentError(f"budget must be >= 1, got {budget}")
    return int(depth), int(zeta), int(budget)


def core_count(n: int, j: int, zeta: int = 4) -> int:
    """Cubes at level j of the core collection: (2 zeta^(n+2))^j."""
    return (2 * zeta ** (n + 2)) ** j


def extended_count(n: int, j: int, zeta: int = 4) -> int:
    """Reference recurrence x_j = 2 zeta^(n+2) x_{j-1} + (2 zeta^(n+2))^j."""
    x = 1
    for i in range(1, j + 1):
        x = 2 * zeta ** (n + 2) * x + core_count(n, i, zeta)
    return x


def count_bound(n: int, j: int) -> int:
    """Closed-form cap 4^((n+3)j) on the extended level count (zeta = 4)."""
    return 4 ** ((n + 3) * j)


def build_core(root: Cube, depth: int, division_factor: int = 4,
               budget: int = DEFAULT_BUDGET) -> CubeHierarchy:
    """Levels 0..depth of the core (eighth-subdividing) collection."""
    depth, zeta, budget = _validated(root, depth, division_factor, budget)
    levels = [_root_level(root)]
    total = 1
    for j in range(1, depth + 1):
        total += levels[-1].count * 2 * zeta ** (root.n + 2)
        if total > budget:
            raise ResourceLimitError(
                f"core hierarchy needs {total} cubes at depth {j}, over budget {budget}")
        levels.append(_child_level(levels[-1], "eighth", zeta))
    return CubeHierarchy(root, depth, "core", zeta, levels)


def build_extended(root: Cube, depth: int, division_factor: int = 4,
                   budget: int = DEFAULT_BUDGET) -> CubeHierarchy:
    """Levels 0..depth of the extended collection.

    Level j holds the quarter-subdivision children of level j-1 plus
    the core-collection cubes of level j, reproducing the recurrence
    x_j = 2 zeta^(n+2) x_{j-1} + (2 zeta^(n+2))^j.  The budget covers
    the extended levels and the core scaffolding together.
    """
    depth, zeta, budget = _validated(root, depth, division_factor, budget)
    n = root.n
    total = sum(core_count(n, j, zeta) for j in range(depth + 1)) \
        + sum(extended_count(n, j, zeta) for j in range(depth + 1))
    if total > budget:
        raise ResourceLimitError(
            f"extended hierarchy needs {total} cubes at depth {depth}, over budget {budget}")
    core = build_core(root, depth, zeta, budget)
    levels = [core.levels[0]]
    for j in range(1, depth + 1):
        children = _child_level(levels[-1], "quarter", zeta)
        levels.append(_concat_levels(children, core.levels[j]))
    return CubeHierarchy(root, depth, "extended", zeta, levels)


def containment_ok(h: CubeHierarchy, tol: float = 1e-9) -> bool:
    """Exhaustive check that every cube lies inside the root cube."""
    root = h.root
    for lv in h.levels:
        if lv.count == 0:
            continue
        if float(lv.l.min()) - 4.0 * lv.s < root.time_lo - tol:
            return False
        if float(lv.l.max()) + 4.0 * lv.s > root.time_hi + tol:
            return False
        for d in range(lv.n):
            off = np.abs(lv.w[:, d] - root.w[d])
            if float(off.max()) + lv.z > root.z + tol:
                return False
    return True


def level_summary(h: CubeHierarchy) -> list:
    """Per-level rows for reporting: counts, scales, bounding box."""
    rows = []
    for lv in h.levels:
        row = {"level": lv.level, "count": lv.count, "s": lv.s, "z": lv.z,
               "t_min": float(lv.l.min()) - 4.0 * lv.s,
               "t_max": float(lv.l.max()) + 4.0 * lv.s}
        for d in range(lv.n):
            row[f"x{d + 1}_min"] = float(lv.w[:, d].min()) - lv.z
            row[f"x{d + 1}_max"] = float(lv.w[:, d].max()) + lv.z
        rows.append(row)
    return rows
