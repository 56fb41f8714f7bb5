"""Space-time regions under the max norm.

Every region handled here is a time interval crossed with an open ball in
the max norm |x| = max_i |x_i|.  Time intervals are half-open (t_lo, t_hi]:
a region owns its final time but not its initial one.  A parabolic cylinder
of radius r anchored at (t0, x0) is the rect (t0 - r^2, t0] x B_r(x0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatchError, InvalidArgumentError


def as_point(x, dim: int | None = None) -> tuple:
    """Normalize a scalar or coordinate sequence to a tuple of floats."""
    if np.isscalar(x):
        pt = (float(x),)
    else:
        pt = tuple(float(c) for c in x)
    if dim is not None and len(pt) != dim:
        raise DimensionMismatchError(
            f"expected a point with {dim} coordinates, got {len(pt)}"
        )
    return pt


def max_norm(x: Sequence[float]) -> float:
    return max(abs(float(c)) for c in x)


@dataclass(frozen=True)
class Ball:
    """Open max-norm ball B_radius(center)."""

    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        object.__setattr__(self, "radius", float(self.radius))
        if not (self.radius > 0.0) or not math.isfinite(self.radius):
            raise InvalidArgumentError(f"ball radius must be positive, got {self.radius}")

    @property
    def dim(self) -> int:
        return len(self.center)

    def contains(self, x) -> bool:
        pt = as_point(x, self.dim)
        return max(abs(a - b) for a, b in zip(pt, self.center)) < self.radius

    def mask(self, coords: tuple) -> np.ndarray:
        """Boolean membership of flat node coordinate arrays."""
        if len(coords) != self.dim:
            raise DimensionMismatchError(
                f"ball has dimension {self.dim}, coordinates have {len(coords)}"
            )
        m = np.abs(coords[0] - self.center[0]) < self.radius
        for d in range(1, self.dim):
            m &= np.abs(coords[d] - self.center[d]) < self.radius
        return m


@dataclass(frozen=True)
class SpaceTimeRect:
    """Half-open time interval (t_lo, t_hi] crossed with an open ball."""

    t_lo: float
    t_hi: float
    ball: Ball

    def __post_init__(self):
        object.__setattr__(self, "t_lo", float(self.t_lo))
        object.__setattr__(self, "t_hi", float(self.t_hi))
        if not self.t_lo < self.t_hi:
            raise InvalidArgumentError(
                f"time interval is empty: ({self.t_lo}, {self.t_hi}]"
            )

    @property
    def dim(self) -> int:
        return self.ball.dim

    def key(self) -> tuple:
        """Canonical hashable identity, used to index per-region statistics."""
        return (self.t_lo, self.t_hi, self.ball.center, self.ball.radius)


@dataclass(frozen=True)
class ParabolicCylinder:
    """Cylinder Q_r(t0, x0): time depth r^2 below the anchor time t0."""

    t0: float
    x0: tuple
    r: float

    def __post_init__(self):
        object.__setattr__(self, "x0", as_point(self.x0))
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "r", float(self.r))
        if not (self.r > 0.0):
            raise InvalidArgumentError(f"cylinder radius must be positive, got {self.r}")

    def to_rect(self) -> SpaceTimeRect:
        return SpaceTimeRect(self.t0 - self.r**2, self.t0, Ball(self.x0, self.r))


def make_cylinder(t0: float, x0, r: float) -> SpaceTimeRect:
    """Rect form of the parabolic cylinder Q_r(t0, x0)."""
    return ParabolicCylinder(float(t0), as_point(x0), float(r)).to_rect()


def contains(rect: SpaceTimeRect, t: float, x) -> bool:
    """Exact membership test: t in (t_lo, t_hi] and |x - center| < radius."""
    pt = as_point(x, rect.dim)
    if not (rect.t_lo < t <= rect.t_hi):
        return False
    return rect.ball.contains(pt)


def volume(rect: SpaceTimeRect) -> float:
    """Space-time volume; the max-norm ball of radius r has volume (2r)^n."""
    return (rect.t_hi - rect.t_lo) * (2.0 * rect.ball.radius) ** rect.dim


# Uniform lattice constants: the covering below needs at most
# ceil(L * (1 - theta)^-(n + 2)) cylinders.  The center counts are
# ceil(4 theta^2 / (1-theta)^2) in time and ceil(4 theta / (1-theta)) per
# space axis, so the product is bounded by (4 + (1-theta)^2)(4 + (1-theta))^n
# * (1-theta)^-(n+2) <= 4.25 * 4.5^n * (1-theta)^-(n+2) for theta > 1/2.
COVERING_CONSTANT = {1: 4.25 * 4.5, 2: 4.25 * 4.5**2}


def covering_bound(theta: float, n: int) -> int:
    """Cylinder budget ceil(L_n (1 - theta)^-(n+2)) for the lattice covering."""
    if n not in COVERING_CONSTANT:
        raise InvalidArgumentError(f"no covering constant for dimension {n}")
    return int(math.ceil(COVERING_CONSTANT[n] * (1.0 - theta) ** -(n + 2)))


def _axis_centers(count: int, half_width: float) -> np.ndarray:
    # Midpoints of `count` equal subintervals of (-half_width, half_width).
    w = 2.0 * half_width / count
    return -half_width + w * (np.arange(count) + 0.5)


def cover_cylinder(theta: float, R: float, n: int) -> list:
    """Axis-aligned lattice of cylinder anchors covering Q_{theta R}(1, 0).

    Returns anchors (t_i, x_i), each inside Q_{theta R}, such that the
    cylinders Q_rho(t_i, x_i) with rho = (1 - theta) R / 2 cover Q_{theta R}.
    Anchor times are spaced at most rho^2 apart and anchor coordinates at
    most rho apart, which keeps every point of the target strictly inside
    some covering ball and within depth rho^2 below some anchor time.

    For theta <= 1/2 the single cylinder Q_{R/2}(1, 0) already contains
    Q_{theta R}, so no anchors are needed and the empty list is returned.
    """
    if not (0.0 < theta < 1.0):
        raise InvalidArgumentError(f"theta must lie in (0, 1), got {theta}")
    if not (R > 0.0):
        raise InvalidArgumentError(f"R must be positive, got {R}")
    if n not in (1, 2):
        raise InvalidArgumentError(f"spatial dimension must be 1 or 2, got {n}")
    if theta <= 0.5:
        return []

    rho = (1.0 - theta) * R / 2.0
    depth = (theta * R) ** 2
    # ceil with a tiny upward nudge: an undercount by one float ulp would
    # open a coverage gap, an overcount of one is absorbed by the bound.
    k_t = int(math.ceil(depth / rho**2 * (1.0 + 1e-12)))
    k_x = int(math.ceil(2.0 * theta * R / rho * (1.0 + 1e-12)))

    t_step = depth / k_t
    times = 1.0 - t_step * np.arange(k_t)
    axes = [_axis_centers(k_x, theta * R) for _ in range(n)]

    anchors = []
    for t in times:
        for idx in np.ndindex(*(k_x,) * n):
            anchors.append((float(t), tuple(float(axes[d][i]) for d, i in enumerate(idx))))
    return anchors
