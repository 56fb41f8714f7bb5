"""Grid-sampled space-time fields, mixed norms, and derived functionals.

Discretization conventions, used consistently by every quadrature here and
by the solver: values live on the nodes of a periodic grid on [-X, X)^n;
spatial integrals are node sums weighted by dx^n; time integrals are
left-point Riemann sums over steps, a step [t_j, t_{j+1}) belonging to a
region when its left endpoint t_j does.  A (node, step) pair is in a region
when the node is in the open ball and the step is in the half-open time
interval.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import (
    DimensionMismatchError,
    DomainError,
    EmptyRegionError,
    InvalidArgumentError,
    StateError,
)
from .geometry import Ball, SpaceTimeRect, as_point


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on the box [-extent, extent)^n."""

    n: int
    dx: float
    extent: float = 2.0

    def __post_init__(self):
        if self.n not in (1, 2):
            raise InvalidArgumentError(f"spatial dimension must be 1 or 2, got {self.n}")
        if not (self.dx > 0.0 and self.extent > 0.0):
            raise InvalidArgumentError("dx and extent must be positive")
        ratio = 2.0 * self.extent / self.dx
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 4:
            raise InvalidArgumentError(
                f"2*extent/dx must be an integer >= 4, got {ratio}"
            )

    @classmethod
    def regular(cls, n: int, npts: int, extent: float = 2.0) -> "Grid":
        return cls(n, 2.0 * float(extent) / int(npts), float(extent))

    @property
    def npts(self) -> int:
        return int(round(2.0 * self.extent / self.dx))

    @property
    def shape(self) -> tuple:
        return (self.npts,) * self.n

    @property
    def size(self) -> int:
        return self.npts**self.n

    def coords1d(self) -> np.ndarray:
        return -self.extent + self.dx * np.arange(self.npts)

    def coords_flat(self) -> tuple:
        """Per-dimension coordinate arrays of flattened (C-order) nodes."""
        c = self.coords1d()
        if self.n == 1:
            return (c,)
        g0, g1 = np.meshgrid(c, c, indexing="ij")
        return (g0.ravel(), g1.ravel())

    def node_mask(self, ball: Ball) -> np.ndarray:
        if ball.dim != self.n:
            raise DimensionMismatchError(
                f"grid dimension {self.n} != ball dimension {ball.dim}"
            )
        return ball.mask(self.coords_flat())

    def cell_volume(self) -> float:
        return self.dx**self.n


def _finite_or_raise(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(values)))
        raise InvalidArgumentError(f"{what} contains non-finite entries, first at {bad[0]}")


@dataclass(frozen=True)
class FieldSnapshot:
    """One time slice of a field; values indexed like grid.shape."""

    grid: Grid
    t: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise DimensionMismatchError(
                f"snapshot shape {v.shape} != grid shape {self.grid.shape}"
            )
        _finite_or_raise(v, "snapshot")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "t", float(self.t))

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


class FieldPath:
    """A field sampled at uniformly spaced times, with its noise record.

    values has shape (M + 1, grid.size) in C-order; noise, when recorded,
    has shape (M, m) holding the Brownian increments consumed by each step.
    """

    def __init__(self, grid: Grid, times, values, noise=None, seed_key=None,
                 scheme: str = "semi-implicit"):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise InvalidArgumentError("a path needs at least two times")
        dt = np.diff(times)
        if np.any(dt <= 0) or np.ptp(dt) > 1e-9 * dt[0]:
            raise InvalidArgumentError("path times must be uniformly increasing")
        if values.shape != (times.size, grid.size):
            raise DimensionMismatchError(
                f"path values shape {values.shape} != {(times.size, grid.size)}"
            )
        if noise is not None:
            noise = np.asarray(noise, dtype=float)
            if noise.ndim != 2 or noise.shape[0] != times.size - 1:
                raise DimensionMismatchError(
                    f"noise shape {noise.shape} incompatible with {times.size - 1} steps"
                )
        self.grid = grid
        self.times = times
        self.values = values
        self.noise = noise
        self.seed_key = seed_key
        self.scheme = scheme

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def m(self) -> int:
        return 0 if self.noise is None else self.noise.shape[1]

    def snapshot(self, j: int) -> FieldSnapshot:
        return FieldSnapshot(self.grid, float(self.times[j]),
                             self.values[j].reshape(self.grid.shape))

    def step_indices(self, t_lo: float, t_hi: float) -> np.ndarray:
        """Steps whose left endpoint lies in (t_lo, t_hi]."""
        eps = 1e-9 * self.dt
        t = self.times[:-1]
        return np.nonzero((t > t_lo + eps) & (t <= t_hi + eps))[0]

    def time_index(self, t: float) -> int:
        """Nearest snapshot index to an absolute time."""
        j = int(round((float(t) - self.times[0]) / self.dt))
        return min(max(j, 0), self.steps)


def synthetic_path(grid: Grid, times, fn) -> FieldPath:
    """Sample fn(t, coords) -> flat values onto a path; test/oracle helper."""
    times = np.asarray(times, dtype=float)
    xs = grid.coords_flat()
    vals = np.stack([np.broadcast_to(np.asarray(fn(float(t), xs), dtype=float),
                                     (grid.size,)) for t in times])
    return FieldPath(grid, times, vals)


@dataclass(frozen=True)
class MixedNormSpec:
    """Exponent pair (p in time, q in space); math.inf selects the sup."""

    p: float
    q: float

    def __post_init__(self):
        for e in (self.p, self.q):
            if not (e > 0.0):
                raise InvalidArgumentError(f"norm exponents must be positive, got {e}")


def _region_indices(path: FieldPath, rect: SpaceTimeRect):
    mask = path.grid.node_mask(rect.ball)
    if not mask.any():
        raise EmptyRegionError(f"no grid node inside ball of radius {rect.ball.radius}")
    steps = path.step_indices(rect.t_lo, rect.t_hi)
    if steps.size == 0:
        raise EmptyRegionError(
            f"no time step with left endpoint in ({rect.t_lo}, {rect.t_hi}]"
        )
    return steps, mask


def lpq_norm(path: FieldPath, spec: MixedNormSpec, rect: SpaceTimeRect) -> float:
    """Mixed norm (integral_I ||u(t)||_{q,B}^p dt)^(1/p) over rect = I x B."""
    steps, mask = _region_indices(path, rect)
    vals = np.abs(path.values[np.ix_(steps, np.nonzero(mask)[0])])
    vol = path.grid.cell_volume()
    if math.isinf(spec.q):
        inner = vals.max(axis=1)
    else:
        inner = (vol * np.sum(vals**spec.q, axis=1)) ** (1.0 / spec.q)
    if math.isinf(spec.p):
        return float(inner.max())
    return float((path.dt * np.sum(inner**spec.p)) ** (1.0 / spec.p))


def sup_on(path: FieldPath, rect: SpaceTimeRect) -> float:
    """Max nodal value over in-region (node, step) pairs."""
    steps, mask = _region_indices(path, rect)
    return float(path.values[np.ix_(steps, np.nonzero(mask)[0])].max())


def inf_on(path: FieldPath, rect: SpaceTimeRect) -> float:
    """Min nodal value over in-region (node, step) pairs."""
    steps, mask = _region_indices(path, rect)
    return float(path.values[np.ix_(steps, np.nonzero(mask)[0])].min())


def moment_product(path: FieldPath, alpha: float, mu: float,
                   d1: SpaceTimeRect, d2: SpaceTimeRect) -> float:
    """Product (integral_{d1} (u+mu)^-alpha) * (integral_{d2} (u+mu)^alpha).

    The shift mu >= 0 regularizes the negative power; with mu = 0 the field
    must be strictly positive on d1 and d2.
    """
    if not (alpha > 0.0):
        raise InvalidArgumentError(f"alpha must be positive, got {alpha}")
    if mu < 0.0:
        raise InvalidArgumentError(f"mu must be nonnegative, got {mu}")
    w = path.dt * path.grid.cell_volume()
    out = []
    for rect, sign in ((d1, -1.0), (d2, 1.0)):
        steps, mask = _region_indices(path, rect)
        v = path.values[np.ix_(steps, np.nonzero(mask)[0])] + mu
        if np.any(v <= 0.0):
            j, i = np.argwhere(v <= 0.0)[0]
            raise DomainError(
                f"nonpositive shifted value {v[j, i]} inside region",
                witness=(float(path.times[steps[j]]), float(v[j, i])),
            )
        out.append(w * float(np.sum(v ** (sign * alpha))))
    return out[0] * out[1]


def neg_part_energy(snap: FieldSnapshot) -> float:
    """Squared L2 norm of the negative part u^- on the whole grid."""
    neg = np.minimum(snap.values, 0.0)
    return float(snap.grid.cell_volume() * np.sum(neg * neg))


def rescale(path: FieldPath, r: float) -> FieldPath:
    """Parabolic rescaling u_r(t, x) = u(r^2 t, r x) by nearest-node lookup.

    The rescaled path reuses the source grid and times, which keeps the
    lookup targets inside the source extents for any r in (0, 1].  The
    noise record does not survive rescaling.
    """
    if not (0.0 < r <= 1.0):
        raise InvalidArgumentError(f"rescale factor must lie in (0, 1], got {r}")
    g = path.grid
    t_idx = np.rint((r * r * path.times - path.times[0]) / path.dt).astype(int)
    t_idx = np.clip(t_idx, 0, path.steps)
    c = g.coords1d()
    n_idx1 = np.rint((r * c + g.extent) / g.dx).astype(int) % g.npts
    if g.n == 1:
        flat_idx = n_idx1
    else:
        i0, i1 = np.meshgrid(n_idx1, n_idx1, indexing="ij")
        flat_idx = (i0 * g.npts + i1).ravel()
    vals = path.values[np.ix_(t_idx, flat_idx)]
    return FieldPath(g, path.times.copy(), vals, noise=None, seed_key=None,
                     scheme=path.scheme)


def smoothstep(lo: float, hi: float, rho) -> np.ndarray:
    """C^1 ramp: 1 for rho <= lo, 0 for rho >= hi, cubic in between."""
    s = np.clip((hi - np.asarray(rho, dtype=float)) / (hi - lo), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


@dataclass(frozen=True)
class InterpolationReport:
    lhs: float
    rhs: float
    slack: float
    eps: float
    young_constant: float
    gamma: float
    sup_term: float
    low_norm_term: float


def interpolation_check(path: FieldPath, alpha: float, beta: float, q: float,
                        rect: SpaceTimeRect, eps: float,
                        mode: str = "time") -> InterpolationReport:
    """Verify the interpolation bound between norm exponents alpha and beta.

    mode "time" checks  ||u||_{alpha,q} <= eps * Vh^(1/q) ||u||_sup
                        + (beta/alpha) eps^-gamma ||u||_{beta,q},
    mode "space" checks ||u||_{q,alpha} <= eps * Th^(1/q) ||u||_sup
                        + (beta/alpha) eps^-gamma ||u||_{q,beta},
    with gamma = alpha/beta - 1.  Vh and Th are the discrete ball measure
    and interval measure of the region, so the chain of inequalities is
    exact for grid fields and the slack can only be nonnegative up to
    rounding.  The Young split contributes the constant beta/alpha.
    """
    if not (0.0 < beta < alpha) or not (beta > alpha / 2.0):
        raise InvalidArgumentError(
            f"need alpha/2 < beta < alpha, got alpha={alpha}, beta={beta}"
        )
    if not (eps > 0.0):
        raise InvalidArgumentError(f"eps must be positive, got {eps}")
    if mode not in ("time", "space"):
        raise InvalidArgumentError(f"mode must be 'time' or 'space', got {mode}")

    steps, mask = _region_indices(path, rect)
    gamma = alpha / beta - 1.0
    young = beta / alpha
    sup = float(np.abs(path.values[np.ix_(steps, np.nonzero(mask)[0])]).max())
    if mode == "time":
        lhs = lpq_norm(path, MixedNormSpec(alpha, q), rect)
        low = lpq_norm(path, MixedNormSpec(beta, q), rect)
        measure = path.grid.cell_volume() * int(np.count_nonzero(mask))
        sup_term = eps * measure ** (1.0 / q) * sup
    else:
        lhs = lpq_norm(path, MixedNormSpec(q, alpha), rect)
        low = lpq_norm(path, MixedNormSpec(q, beta), rect)
        measure = path.dt * steps.size
        sup_term = eps * measure ** (1.0 / q) * sup
    low_term = young * eps**-gamma * low
    rhs = sup_term + low_term
    return InterpolationReport(lhs=lhs, rhs=rhs, slack=rhs - lhs, eps=eps,
                               young_constant=young, gamma=gamma,
                               sup_term=sup_term, low_norm_term=low_term)


def snapshot_to_csv(snap: FieldSnapshot, path: str):
    """Write node coordinates and values as CSV."""
    xs = snap.grid.coords_flat()
    flat = snap.flat()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{d + 1}" for d in range(snap.grid.n)] + ["value"])
        for i in range(snap.grid.size):
            w.writerow([repr(float(xs[d][i])) for d in range(snap.grid.n)]
                       + [repr(float(flat[i]))])


def export_path(path: FieldPath, directory: str, stride: int = 1):
    """Write every stride-th snapshot plus a small manifest to a directory."""
    if stride < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {stride}")
    os.makedirs(directory, exist_ok=True)
    indices = list(range(0, path.steps + 1, stride))
    if indices[-1] != path.steps:
        indices.append(path.steps)
    files = []
    for j in indices:
        name = f"snapshot_{j:06d}.csv"
        snapshot_to_csv(path.snapshot(j), os.path.join(directory, name))
        files.append({"index": j, "t": float(path.times[j]), "file": name})
    manifest = {
        "n": path.grid.n,
        "dx": path.grid.dx,
        "extent": path.grid.extent,
        "dt": path.dt,
        "steps": path.steps,
        "scheme": path.scheme,
        "snapshots": files,
    }
    tmp = os.path.join(directory, "path_manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(directory, "path_manifest.json"))
