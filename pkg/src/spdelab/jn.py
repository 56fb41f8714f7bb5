"""Oscillation diagnostics for the log transform of a positive solution.

Everything here works on h = -log(max(u, 0) + mu).  Per parabolic cube
the module computes the cutoff-weighted spatial average H of h, the
compensating noise martingale M driven by g/(u + mu), and the two
one-sided oscillation averages of sqrt((h - M - a)^+) over the upper
and lower half of the cube, with a fixed to the weighted average at the
cube's time center.  The lower half is handled by reversing the
snapshot order and negating the recorded noise increments.

On the top and bottom eighths of the root cube the module measures
level-set fractions of the excess of h over a and fits an exponential
decay profile, and it evaluates the two-sided moment product
(integral of v^-nu over the top eighth) * (integral of v^nu over the
bottom eighth), v = u + mu, whose ensemble quantiles quantify the
reverse Cauchy-Schwarz tail.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cubes import Cube, CubeHierarchy, subcubes
from .errors import (
    DimensionMismatchError,
    DomainError,
    EmptyRegionError,
    InsufficientDataError,
    InvalidArgumentError,
    StateError,
)
from .fields import FieldPath, Grid, moment_product, smoothstep
from .geometry import SpaceTimeRect
from .solver import CoefficientModel

# master spatial weight: 1 on the half-radius ball, 0 outside 3/4, in
# the rescaled coordinate xi = (y - center) / (2 radius)
_PLATEAU, _SUPPORT = 0.5, 0.75


def master_cutoff(xi: np.ndarray) -> np.ndarray:
    return smoothstep(_PLATEAU, _SUPPORT, xi)


@dataclass(frozen=True)
class LogField:
    """h = -log(max(u, 0) + mu) over a whole path."""

    path: FieldPath
    mu: float
    values: np.ndarray
    clamp_fraction: float

    @property
    def grid(self) -> Grid:
        return self.path.grid


def log_field(path: FieldPath, mu: float) -> LogField:
    """Log transform with clamping of small discrete negativity.

    Values below -mu/2 indicate the field is not a positive solution at
    this mu and raise DomainError with a witness; values in [-mu/2, 0)
    are clamped to 0 and counted in clamp_fraction.
    """
    if not (mu > 0.0):
        raise InvalidArgumentError(f"mu must be positive, got {mu}")
    vmin = float(np.min(path.values))
    if vmin < -0.5 * mu:
        j, node = np.unravel_index(int(np.argmin(path.values)), path.values.shape)
        raise DomainError(
            f"field value {vmin:.6g} at step {j}, node {node} is below -mu/2 = {-0.5 * mu:.6g}",
            witness=(int(j), int(node), vmin))
    clamp_fraction = float(np.mean(path.values < 0.0))
    h = -np.log(np.clip(path.values, 0.0, None) + mu)
    return LogField(path=path, mu=mu, values=h, clamp_fraction=clamp_fraction)


def _cube_weights(grid: Grid, cube: Cube):
    """Squared master cutoff on the grid, scaled to the cube's ball.

    Returns (w2, vnorm) with vnorm = dx^n * sum(w2), the weighted
    reference volume.  The weight is supported in the 3/2-enlarged
    ball, which must fit inside the periodic box.
    """
    if cube.n != grid.n:
        raise DimensionMismatchError(f"cube dimension {cube.n} != grid dimension {grid.n}")
    for d in range(grid.n):
        if abs(cube.w[d]) + 1.5 * cube.z > grid.extent + 1e-12:
            raise InvalidArgumentError(
                f"enlarged ball of radius {1.5 * cube.z} at {cube.w} exits the box "
                f"[-{grid.extent}, {grid.extent})")
    xs = grid.coords_flat()
    xi = np.abs(xs[0] - cube.w[0])
    for d in range(1, grid.n):
        xi = np.maximum(xi, np.abs(xs[d] - cube.w[d]))
    w2 = master_cutoff(xi / (2.0 * cube.z)) ** 2
    vnorm = grid.cell_volume() * float(np.sum(w2))
    if vnorm <= 0.0:
        raise EmptyRegionError(f"grid does not resolve the cube ball of radius {cube.z}")
    return w2, vnorm


def cube_average(lf: LogField, cube: Cube, t: float) -> float:
    """Weighted spatial average H of h at the snapshot nearest t."""
    tol = 1e-9 * max(1.0, abs(cube.s))
    if not (cube.time_lo - tol <= t <= cube.time_hi + tol):
        raise InvalidArgumentError(
            f"time {t} outside the cube extent ({cube.time_lo}, {cube.time_hi})")
    w2, _ = _cube_weights(lf.grid, cube)
    j = lf.path.time_index(t)
    return float(np.dot(lf.values[j], w2) / np.sum(w2))


@dataclass(frozen=True)
class MartingaleSeries:
    """Discrete compensator series on offsets from the cube center."""

    offsets: np.ndarray
    values: np.ndarray
    qv: np.ndarray
    ratio: float


def _compensator_coefs(lf: LogField, cm: CoefficientModel, w2: np.ndarray,
                       j: int) -> np.ndarray:
    """Per-channel weighted averages of g_i(u) / (max(u,0) + mu) at step j."""
    grid = lf.grid
    xs = grid.coords_flat()
    u = lf.path.values[j]
    gv = np.asarray(cm.g(float(lf.path.times[j]), xs, u), dtype=float)
    gt = gv / (np.clip(u, 0.0, None) + lf.mu)[None, :]
    return np.sum(gt * w2[None, :], axis=1) / np.sum(w2)


def _increment_series(lf: LogField, cm: CoefficientModel, cube: Cube,
                      sign: int) -> tuple:
    """Step indices and compensator increments on one side of the center.

    sign=+1 walks from the center up to the cube top with the recorded
    increments; sign=-1 walks from the center down to the cube bottom in
    reversed time with negated increments.  Returned arrays: snapshot
    indices visited after each increment (length K) and the increments
    (length K), so the compensator before visiting index[k] is the
    prefix sum of the first k increments.
    """
    path = lf.path
    if cm.m > 0 and path.noise is None:
        raise StateError("path has no recorded noise increments")
    w2, _ = _cube_weights(lf.grid, cube)
    jc = path.time_index(cube.l)
    if sign > 0:
        jend = path.time_index(cube.time_hi)
        visited = np.arange(jc + 1, jend + 1)
        sources = visited - 1          # g evaluated at the increment's start
        noise_rows = visited - 1
        flip = 1.0
    else:
        jend = path.time_index(cube.time_lo)
        visited = np.arange(jc - 1, jend - 1, -1)
        sources = visited + 1          # reversed: start of the reversed step
        noise_rows = visited
        flip = -1.0
    incr = np.zeros(visited.size)
    if cm.m > 0:
        for k in range(visited.size):
            coefs = _compensator_coefs(lf, cm, w2, int(sources[k]))
            incr[k] = flip * float(np.dot(coefs, path.noise[int(noise_rows[k])]))
    return visited, incr


def noise_martingale(lf: LogField, cm: CoefficientModel, cube: Cube) -> MartingaleSeries:
    """Forward compensator M on the upper half of the cube.

    M(0) = 0 at the cube's time center; values are reported at step
    offsets together with the cumulative realized quadratic variation
    and the worst QV(t)/t ratio over the covered offsets.
    """
    path = lf.path
    visited, incr = _increment_series(lf, cm, cube, +1)
    jc = path.time_index(cube.l)
    offsets = np.concatenate([[0.0], path.times[visited] - path.times[jc]])
    values = np.concatenate([[0.0], np.cumsum(incr)])
    qv = np.concatenate([[0.0], np.cumsum(incr * incr)])
    pos = offsets > 0.0
    ratio = float(np.max(qv[pos] / offsets[pos])) if np.any(pos) else 0.0
    return MartingaleSeries(offsets=offsets, values=values, qv=qv, ratio=ratio)


def _side_average(lf: LogField, cm: CoefficientModel, cube: Cube, sign: int,
                  a_c: float) -> float:
    """Mean over one cube half of sqrt((h - M - a)^+), compensated in time."""
    grid = lf.grid
    nodes = grid.node_mask(cube.ball())
    if not np.any(nodes):
        raise EmptyRegionError(f"grid does not resolve the cube ball of radius {cube.z}")
    visited, incr = _increment_series(lf, cm, cube, sign)
    if visited.size == 0:
        raise EmptyRegionError("cube half spans no time steps at this resolution")
    comp = np.concatenate([[0.0], np.cumsum(incr)])[1:]
    sub = lf.values[np.ix_(visited, np.nonzero(nodes)[0])]
    excess = np.clip(sub - comp[:, None] - a_c, 0.0, None)
    return float(np.mean(np.sqrt(excess)))


def local_bmo_check(lf: LogField, cm: CoefficientModel, cube: Cube) -> tuple:
    """One-sided oscillation averages (upper, lower) for a cube."""
    a_c = cube_average(lf, cube, cube.l)
    return (_side_average(lf, cm, cube, +1, a_c),
            _side_average(lf, cm, cube, -1, a_c))


@dataclass(frozen=True)
class CubeStats:
    cube: Cube
    a_c: float
    h_offsets: np.ndarray
    h_values: np.ndarray
    m_series: MartingaleSeries
    plus_avg: float
    minus_avg: float
    qv_ratio: float


def cube_stats(lf: LogField, cm: CoefficientModel, cube: Cube) -> CubeStats:
    """All per-cube diagnostics in one pass."""
    path = lf.path
    w2, _ = _cube_weights(lf.grid, cube)
    a_c = cube_average(lf, cube, cube.l)
    jlo = path.time_index(cube.time_lo)
    jhi = path.time_index(cube.time_hi)
    window = np.arange(jlo, jhi + 1)
    h_vals = lf.values[window] @ w2 / np.sum(w2)
    m_series = noise_martingale(lf, cm, cube)
    plus_avg = _side_average(lf, cm, cube, +1, a_c)
    minus_avg = _side_average(lf, cm, cube, -1, a_c)
    return CubeStats(cube=cube, a_c=a_c,
                     h_offsets=path.times[window] - cube.l, h_values=h_vals,
                     m_series=m_series, plus_avg=plus_avg, minus_avg=minus_avg,
                     qv_ratio=m_series.ratio)


def hierarchy_stats(lf: LogField, cm: CoefficientModel, hierarchy: CubeHierarchy,
                    per_level_limit: int | None = None):
    """Yield (level, index, CubeStats) over the hierarchy, bounded per level."""
    for lv in hierarchy.levels:
        for k, cube in enumerate(lv.iter_cubes(per_level_limit)):
            yield lv.level, k, cube_stats(lf, cm, cube)


# ---------------------------------------------------------------------------
# level-set decay and the moment-product tail

def levelset_fractions(lf: LogField, cube: Cube, alphas) -> tuple:
    """Excess level-set fractions on the top/bottom eighths of a cube.

    Returns (a_c, upper fractions, lower fractions): the measure
    fraction of {h - a_c > alpha} on the top eighth and of
    {a_c - h > alpha} on the bottom eighth, per alpha.
    """
    alphas = np.asarray(alphas, dtype=float)
    if alphas.ndim != 1 or alphas.size == 0 or np.any(alphas <= 0.0):
        raise InvalidArgumentError("alphas must be a nonempty 1d array of positive levels")
    grid = lf.grid
    parts = subcubes(cube)
    a_c = cube_average(lf, cube, cube.l)
    nodes = np.nonzero(grid.node_mask(cube.ball()))[0]
    if nodes.size == 0:
        raise EmptyRegionError(f"grid does not resolve the cube ball of radius {cube.z}")
    out = []
    for rect, orient in ((parts.d_plus, +1.0), (parts.d_minus, -1.0)):
        steps = lf.path.step_indices(rect.t_lo, rect.t_hi)
        if steps.size == 0:
            raise EmptyRegionError("cube eighth spans no time steps at this resolution")
        excess = orient * (lf.values[np.ix_(steps, nodes)] - a_c)
        out.append(np.array([float(np.mean(excess > al)) for al in alphas]))
    return a_c, out[0], out[1]


@dataclass(frozen=True)
class LevelSetFit:
    alphas: np.ndarray
    fractions: np.ndarray
    decay_rate: float
    amplitude: float
    r_squared: float


def fit_decay(alphas, fractions, band: tuple = (0.0, 1.0)) -> LevelSetFit:
    """Least-squares exponential fit fractions ~ amplitude * exp(-rate * alpha).

    Only strictly positive fractions inside band enter the log-linear
    fit; fewer than 3 of them is an error.  The band exists because the
    decay claim is an upper bound: it says nothing where the fraction
    saturates near 1, and below a few grid cells the fraction is
    quantized, so both ends pollute the fit.
    """
    alphas = np.asarray(alphas, dtype=float)
    fractions = np.asarray(fractions, dtype=float)
    lo, hi = band
    if not (0.0 <= lo < hi <= 1.0):
        raise InvalidArgumentError(f"band must satisfy 0 <= lo < hi <= 1, got {band}")
    mask = (fractions > 0.0) & (fractions >= lo) & (fractions <= hi)
    if int(mask.sum()) < 3:
        raise InsufficientDataError(
            f"need at least 3 positive level-set fractions to fit, got {int(mask.sum())}")
    x = alphas[mask]
    y = np.log(fractions[mask])
    design = np.stack([np.ones_like(x), -x], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    sstot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if sstot == 0.0 else 1.0 - float(np.sum(resid**2)) / sstot
    return LevelSetFit(alphas=alphas, fractions=fractions,
                       decay_rate=float(coef[1]), amplitude=float(math.exp(coef[0])),
                       r_squared=r2)


def levelset_decay(lf: LogField, hierarchy: CubeHierarchy, alphas,
                   band: tuple = (0.0, 1.0)) -> tuple:
    """Fit the excess decay on the root cube's eighths; returns (upper, lower)."""
    _, frac_plus, frac_minus = levelset_fractions(lf, hierarchy.root, alphas)
    return fit_decay(alphas, frac_plus, band), fit_decay(alphas, frac_minus, band)


def moment_tail_value(path: FieldPath, mu: float, nu: float,
                      d_plus: SpaceTimeRect, d_minus: SpaceTimeRect) -> float:
    """Per-path statistic: the two-region moment product to the power 1/nu."""
    if not (nu > 0.0):
        raise InvalidArgumentError(f"nu must be positive, got {nu}")
    return float(moment_product(path, nu, mu, d_plus, d_minus) ** (1.0 / nu))


def tail_quantiles(values, eps_levels=(0.1, 0.05, 0.01)) -> dict:
    """Upper empirical quantiles K_eps = quantile(values, 1 - eps)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise InsufficientDataError("no tail values to take quantiles of")
    return {float(e): float(np.quantile(values, 1.0 - e, method="higher"))
            for e in eps_levels}


@dataclass(frozen=True)
class TailTable:
    nu: float
    mu: float
    values: np.ndarray
    quantiles: dict


def reverse_cs_tail(paths, mu: float, nu: float, d_plus: SpaceTimeRect,
                    d_minus: SpaceTimeRect,
                    eps_levels=(0.1, 0.05, 0.01)) -> TailTable:
    """Empirical tail of the moment product over an in-memory path set."""
    values = np.array([moment_tail_value(p, mu, nu, d_plus, d_minus) for p in paths])
    return TailTable(nu=nu, mu=mu, values=values,
                     quantiles=tail_quantiles(values, eps_levels))


def stability_spread(k_by_mu: dict) -> float:
    """Relative spread (max - min) / min of quantiles across mu values."""
    vals = np.array(sorted(k_by_mu.values()))
    if vals.size < 2:
        raise InsufficientDataError("need quantiles at >= 2 mu values")
    if vals[0] <= 0.0:
        raise InvalidArgumentError("quantiles must be positive to compare spreads")
    return float((vals[-1] - vals[0]) / vals[0])
