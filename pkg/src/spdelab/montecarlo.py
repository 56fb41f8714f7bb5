"""Ensemble execution and the headline experiments.

Paths are integrated in batches with per-path counter-derived seeds, so
an ensemble's results do not depend on chunk size or thread count: path
i always consumes the stream seeded by (master_seed, spawn_key=(i,)),
all reductions are row-local, and every recorded statistic lands in a
preallocated slot indexed by i.  Region extrema and the negative-part
energy are recorded streamingly; full path histories are materialized
only when per-path consumers ask for them.

On top of the ensemble sit the experiment drivers: the joint-tail
estimator with Wilson intervals, the sup/inf inequality curve over a
grid of ratio thresholds, the positivity scan, the deterministic
comparison-constant study, and the elementary event-inclusion check
used by the tail argument.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    GeometryError,
    InsufficientDataError,
    InvalidArgumentError,
    ModelInvalidError,
)
from .fields import FieldPath, Grid, inf_on, sup_on
from .geometry import SpaceTimeRect
from .solver import (
    ModelParams,
    SolverConfig,
    build_model,
    draw_increments,
    integrate_batch,
    make_initial_condition,
    path_seed,
    time_axis,
    validate_model,
)

FAILURE_RATE_LIMIT = 0.01


@dataclass
class ExperimentSpec:
    """Full description of one reproducible ensemble run."""

    grid: Grid
    model: ModelParams = field(default_factory=ModelParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    ic_kind: str = "bump"
    ic_amplitude: float = 1.0
    ic_width: float = 1.0
    ic_seed: int = 0
    horizon: float = 1.0
    n_paths: int = 200
    master_seed: int = 2024
    regions: dict = field(default_factory=dict)
    chunk: int = 64
    gammas: tuple = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0)
    floor: float = 0.0
    # level thresholds for log-field set decay; geometric spacing reaches
    # both the small-threshold plateau and the large-threshold tail
    alphas: tuple = tuple(float(a) for a in np.geomspace(0.04, 2.0, 24))
    mu: float = 1e-4
    nu: float = 1.0
    depth: int = 1

    def __post_init__(self):
        if self.n_paths < 1:
            raise InvalidArgumentError(f"n_paths must be >= 1, got {self.n_paths}")
        if not (self.horizon > 0.0):
            raise InvalidArgumentError(f"horizon must be positive, got {self.horizon}")
        if self.chunk < 1:
            raise InvalidArgumentError(f"chunk must be >= 1, got {self.chunk}")
        if any(g < 0.0 for g in self.gammas):
            raise InvalidArgumentError("ratio thresholds must be nonnegative")
        if self.floor < 0.0:
            raise InvalidArgumentError(f"floor must be nonnegative, got {self.floor}")
        for name, rect in self.regions.items():
            if rect.t_lo < -1e-12 or rect.t_hi > self.horizon + 1e-12:
                raise InvalidArgumentError(
                    f"region {name!r} spans ({rect.t_lo}, {rect.t_hi}], outside "
                    f"the simulated interval (0, {self.horizon}]")
            for d in range(rect.ball.dim):
                if abs(rect.ball.center[d]) + rect.ball.radius > self.grid.extent + 1e-12:
                    raise InvalidArgumentError(
                        f"region {name!r} ball exits the box [-{self.grid.extent}, "
                        f"{self.grid.extent})")

    def build(self):
        cm = build_model(self.model, self.grid.n, self.grid.extent)
        u0 = make_initial_condition(self.ic_kind, self.grid, self.ic_amplitude,
                                    self.ic_width, self.ic_seed)
        return cm, u0


class _RegionRecorder:
    """Streaming per-path sup and inf over one space-time region."""

    def __init__(self, node_idx: np.ndarray, step_mask: np.ndarray, batch: int):
        self.nodes = node_idx
        self.step_mask = step_mask
        self.sup = np.full(batch, -np.inf)
        self.inf = np.full(batch, np.inf)

    def observe(self, j, t, u, failed):
        if not self.step_mask[j]:
            return
        sub = u[:, self.nodes]
        self.sup = np.maximum(self.sup, sub.max(axis=1))
        self.inf = np.minimum(self.inf, sub.min(axis=1))


class _NegEnergyRecorder:
    """Running max over time of dx^n * sum(min(u,0)^2) per path."""

    def __init__(self, vol: float, batch: int):
        self.vol = vol
        self.worst = np.zeros(batch)

    def observe(self, j, t, u, failed):
        neg = np.minimum(u, 0.0)
        self.worst = np.maximum(self.worst, self.vol * np.sum(neg * neg, axis=1))


@dataclass
class Ensemble:
    """Per-path summaries of one ensemble run, indexed by path number."""

    spec: ExperimentSpec
    sup: dict
    inf: dict
    neg_energy: np.ndarray
    failed: np.ndarray
    fail_steps: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.spec.n_paths

    @property
    def ok(self) -> np.ndarray:
        return ~self.failed

    @property
    def n_ok(self) -> int:
        return int(np.sum(self.ok))

    @property
    def invalid(self) -> bool:
        return int(np.sum(self.failed)) > FAILURE_RATE_LIMIT * self.n_paths

    def _region_name(self, rect: SpaceTimeRect) -> str:
        for name, r in self.spec.regions.items():
            if r.key() == rect.key():
                return name
        raise InvalidArgumentError(
            "region was not recorded during the run; add it to spec.regions")

    def sup_over(self, rect: SpaceTimeRect) -> np.ndarray:
        return self.sup[self._region_name(rect)]

    def inf_over(self, rect: SpaceTimeRect) -> np.ndarray:
        return self.inf[self._region_name(rect)]


def run_ensemble(spec: ExperimentSpec, consumers: Sequence[Callable] = (),
                 threads: int = 1) -> Ensemble:
    """Integrate all paths of the spec and collect streaming summaries.

    consumers are callables (index, FieldPath) invoked for every
    successful path; they must write only to per-index slots because
    invocation order is unspecified when threads > 1.  Blown-up paths
    are recorded in the failure roster and excluded from summaries.
    """
    grid = spec.grid
    cm, u0 = spec.build()
    validate_model(cm, extent=grid.extent, t_max=spec.horizon)
    dt = spec.solver.step_size(grid)
    times = time_axis(0.0, spec.horizon, dt)
    M = times.size - 1
    N = spec.n_paths

    eps = 1e-9 * dt
    region_meta = []
    for name, rect in spec.regions.items():
        nodes = np.nonzero(grid.node_mask(rect.ball))[0]
        step_mask = np.zeros(M + 1, dtype=bool)
        js = np.arange(M)
        step_mask[js[(times[js] > rect.t_lo + eps) & (times[js] <= rect.t_hi + eps)]] = True
        region_meta.append((name, nodes, step_mask))

    sup = {name: np.full(N, np.nan) for name, _, _ in region_meta}
    inf = {name: np.full(N, np.nan) for name, _, _ in region_meta}
    neg_energy = np.full(N, np.nan)
    failed = np.zeros(N, dtype=bool)
    fail_steps = np.full(N, -1, dtype=int)
    u0_flat = u0.flat()
    keep_history = bool(consumers)

    def run_chunk(lo: int, hi: int):
        B = hi - lo
        dW = None
        if cm.m > 0:
            dW = np.empty((B, M, cm.m))
            for b, i in enumerate(range(lo, hi)):
                dW[b] = draw_increments(path_seed(spec.master_seed, i), M, cm.m, dt)
        recs = [_RegionRecorder(nodes, mask, B) for _, nodes, mask in region_meta]
        energy_rec = _NegEnergyRecorder(grid.cell_volume(), B)
        res = integrate_batch(grid, cm, spec.solver, np.tile(u0_flat, (B, 1)),
                              times, dW, keep_history=keep_history,
                              observers=[*recs, energy_rec])
        ok_rows = ~res.failed
        for (name, _, _), rec in zip(region_meta, recs):
            sup[name][lo:hi] = np.where(ok_rows, rec.sup, np.nan)
            inf[name][lo:hi] = np.where(ok_rows, rec.inf, np.nan)
        neg_energy[lo:hi] = np.where(ok_rows, energy_rec.worst, np.nan)
        failed[lo:hi] = res.failed
        fail_steps[lo:hi] = res.fail_step
        if consumers:
            for b, i in enumerate(range(lo, hi)):
                if res.failed[b]:
                    continue
                fp = FieldPath(grid, times, res.history[b],
                               noise=dW[b] if dW is not None else None,
                               seed_key=(spec.master_seed, i),
                               scheme=spec.solver.scheme)
                for consume in consumers:
                    consume(i, fp)

    bounds = [(lo, min(lo + spec.chunk, N)) for lo in range(0, N, spec.chunk)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda ab: run_chunk(*ab), bounds))
    else:
        for lo, hi in bounds:
            run_chunk(lo, hi)
    return Ensemble(spec=spec, sup=sup, inf=inf, neg_energy=neg_energy,
                    failed=failed, fail_steps=fail_steps)


# ---------------------------------------------------------------------------
# tail estimation

@dataclass(frozen=True)
class TailEstimate:
    hits: int
    trials: int
    p_hat: float
    ci_lo: float
    ci_hi: float


def wilson_interval(hits: int, trials: int, z: float = 1.96) -> tuple:
    """Wilson 95% score interval; accurate for proportions near 0 and 1."""
    if trials < 1:
        raise InvalidArgumentError(f"trials must be >= 1, got {trials}")
    if not (0 <= hits <= trials):
        raise InvalidArgumentError(f"hits {hits} outside [0, {trials}]")
    p = hits / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2.0 * trials)) / denom
    half = z * math.sqrt(p * (1.0 - p) / trials + z * z / (4.0 * trials * trials)) / denom
    return max(center - half, 0.0), min(center + half, 1.0)


def _as_mask(ens: Ensemble, e) -> np.ndarray:
    if callable(e):
        return np.array([bool(e(i)) for i in range(ens.n_paths)])
    arr = np.asarray(e, dtype=bool)
    if arr.shape != (ens.n_paths,):
        raise InvalidArgumentError(
            f"predicate array has shape {arr.shape}, expected ({ens.n_paths},)")
    return arr


def joint_tail(ens: Ensemble, e1, e2) -> TailEstimate:
    """Estimate P(e1 and e2) over the successful paths of an ensemble."""
    ok = ens.ok
    trials = int(np.sum(ok))
    if trials == 0:
        raise InsufficientDataError("every path failed; nothing to estimate on")
    hits = int(np.sum(_as_mask(ens, e1) & _as_mask(ens, e2) & ok))
    lo, hi = wilson_interval(hits, trials)
    return TailEstimate(hits=hits, trials=trials, p_hat=hits / trials,
                        ci_lo=lo, ci_hi=hi)


# ---------------------------------------------------------------------------
# sup/inf inequality experiment

def validate_windows(P: SpaceTimeRect, Q: SpaceTimeRect) -> None:
    """Geometry preconditions for the sup/inf comparison.

    Q is where the supremum is read, P where the infimum is read; P must
    come after Q, and Q must start after the initial time.
    """
    if not (Q.t_lo > 0.0):
        raise GeometryError(
            f"violated rule: the sup window must start strictly after time 0 "
            f"(Q.t_lo > 0); got Q.t_lo = {Q.t_lo}")
    if not (P.t_lo >= Q.t_hi):
        raise GeometryError(
            f"violated rule: the inf window must start after the sup window ends "
            f"(P.t_lo >= Q.t_hi); got P.t_lo = {P.t_lo}, Q.t_hi = {Q.t_hi}")


def median_sup(ens: Ensemble, Q: SpaceTimeRect) -> float:
    """Ensemble median of the supremum over Q (successful paths only)."""
    vals = ens.sup_over(Q)[ens.ok]
    if vals.size == 0:
        raise InsufficientDataError("every path failed; no suprema to take a median of")
    return float(np.median(vals))


def harnack_indicators(ens: Ensemble, P: SpaceTimeRect, Q: SpaceTimeRect,
                       a: float, gammas) -> tuple:
    """Joint event indicators {sup_Q u > a and gamma * inf_P u <= a}.

    Returns (ok_indices, sup_Q values, inf_P values, indicator matrix of
    shape (n_ok, len(gammas))).
    """
    validate_windows(P, Q)
    gammas = np.asarray(gammas, dtype=float)
    ok = np.nonzero(ens.ok)[0]
    supq = ens.sup_over(Q)[ok]
    infp = ens.inf_over(P)[ok]
    ind = (supq > a)[:, None] & (infp[:, None] * gammas[None, :] <= a)
    return ok, supq, infp, ind


def harnack_curve(ens: Ensemble, P: SpaceTimeRect, Q: SpaceTimeRect,
                  a: float, gammas) -> list:
    """Tail estimate of the joint event per ratio threshold gamma."""
    _, _, _, ind = harnack_indicators(ens, P, Q, a, gammas)
    trials = ind.shape[0]
    if trials == 0:
        raise InsufficientDataError("every path failed; nothing to estimate on")
    out = []
    for col, g in enumerate(np.asarray(gammas, dtype=float)):
        hits = int(np.sum(ind[:, col]))
        lo, hi = wilson_interval(hits, trials)
        out.append((float(g), TailEstimate(hits=hits, trials=trials,
                                           p_hat=hits / trials, ci_lo=lo, ci_hi=hi)))
    return out


def indicator_monotonicity(ens: Ensemble, P: SpaceTimeRect, Q: SpaceTimeRect,
                           a: float, gammas) -> int:
    """Count per-path violations of the event nesting in gamma.

    For a nonnegative path, raising gamma only shrinks the event
    {gamma * inf <= a}, so along sorted gammas each path's indicator may
    only switch from 1 to 0.  Returns the number of (path, step)
    adjacent pairs that violate this; 0 is the expected value.
    """
    gammas = np.sort(np.asarray(gammas, dtype=float))
    _, _, _, ind = harnack_indicators(ens, P, Q, a, gammas)
    return int(np.sum(ind[:, 1:] & ~ind[:, :-1]))


# ---------------------------------------------------------------------------
# positivity

@dataclass(frozen=True)
class PositivityReport:
    floor: float
    mins: np.ndarray
    n_at_or_below: int
    worst_neg_energy: float
    initial_energy: float
    n_failed: int

    @property
    def all_above(self) -> bool:
        return self.n_at_or_below == 0


def positivity_scan(ens: Ensemble, region: SpaceTimeRect,
                    floor: float = 0.0) -> PositivityReport:
    """Count paths whose region infimum does not stay above the floor."""
    if floor < 0.0:
        raise InvalidArgumentError(f"floor must be nonnegative, got {floor}")
    _, u0 = ens.spec.build()
    vals0 = u0.flat()
    if np.any(vals0 < 0.0) or not np.any(vals0 > 0.0):
        raise ModelInvalidError(
            "positivity scan needs a nonnegative, not identically zero initial condition",
            witness=(float(vals0.min()), float(vals0.max())))
    mins = ens.inf_over(region)[ens.ok]
    if mins.size == 0:
        raise InsufficientDataError("every path failed; no minima to scan")
    vol = ens.spec.grid.cell_volume()
    return PositivityReport(
        floor=floor, mins=mins,
        n_at_or_below=int(np.sum(mins <= floor)),
        worst_neg_energy=float(np.max(ens.neg_energy[ens.ok])),
        initial_energy=float(vol * np.sum(vals0 * vals0)),
        n_failed=int(np.sum(ens.failed)))


# ---------------------------------------------------------------------------
# deterministic comparison constant

def moser_ratio(path: FieldPath, P: SpaceTimeRect, Q: SpaceTimeRect) -> float:
    """sup over Q divided by inf over P for one nonnegative path.

    A vanishing infimum yields math.inf; the caller decides whether
    that is acceptable.
    """
    validate_windows(P, Q)
    if float(np.min(path.values)) < -1e-12:
        raise InvalidArgumentError("comparison ratio needs a nonnegative field")
    sup_q = sup_on(path, Q)
    inf_p = inf_on(path, P)
    if inf_p <= 0.0:
        return math.inf
    return float(sup_q / inf_p)


@dataclass(frozen=True)
class ComparisonReport:
    ratios: np.ndarray
    ratios_refined: np.ndarray
    max_ratio: float
    max_ratio_refined: float

    @property
    def relative_change(self) -> float:
        return abs(self.max_ratio_refined - self.max_ratio) / self.max_ratio


def comparison_experiment(grid: Grid, P: SpaceTimeRect, Q: SpaceTimeRect,
                          n_data: int = 50, seed: int = 7, iota: float = 0.5,
                          horizon: float = 1.0, refine: bool = True) -> ComparisonReport:
    """sup/inf ratios for random positive data under a rough coefficient.

    All initial data evolve as one batch per grid (no noise, so a single
    factorization per step is shared); the refined pass doubles the
    resolution with the time step following the parabolic default.
    """
    validate_windows(P, Q)
    params = ModelParams(a_kind="random_elliptic", f_kind="zero", g_kind="zero",
                         iota=iota, m=0, a_seed=seed)

    def ratios_on(g: Grid) -> np.ndarray:
        cm = build_model(params, g.n, g.extent)
        cfg = SolverConfig()
        dt = cfg.step_size(g)
        times = time_axis(0.0, horizon, dt)
        u0b = np.stack([
            make_initial_condition("random_positive", g, seed=seed + 1 + d).flat()
            for d in range(n_data)])
        eps = 1e-9 * dt
        M = times.size - 1
        recs = []
        for rect in (Q, P):
            nodes = np.nonzero(g.node_mask(rect.ball))[0]
            mask = np.zeros(M + 1, dtype=bool)
            js = np.arange(M)
            mask[js[(times[js] > rect.t_lo + eps) & (times[js] <= rect.t_hi + eps)]] = True
            recs.append(_RegionRecorder(nodes, mask, n_data))
        res = integrate_batch(g, cm, cfg, u0b, times, None, observers=recs)
        if np.any(res.failed):
            raise InsufficientDataError("deterministic comparison path failed to integrate")
        sup_q, inf_p = recs[0].sup, recs[1].inf
        return np.where(inf_p > 0.0, sup_q / inf_p, np.inf)

    base = ratios_on(grid)
    if refine:
        fine = Grid.regular(grid.n, 2 * grid.npts, grid.extent)
        refined = ratios_on(fine)
    else:
        refined = base
    return ComparisonReport(ratios=base, ratios_refined=refined,
                            max_ratio=float(np.max(base)),
                            max_ratio_refined=float(np.max(refined)))


# ---------------------------------------------------------------------------
# elementary event inclusion

def filter_lemma_check(samples, K: float, N: float, b: float) -> int:
    """Count violations of the inclusion
    {X + Z > b, N Y + Z <= b}  within  {X > K N b / (K N + 1), N Y <= b}
    over triples satisfying Y >= K Z >= 0.  The inclusion holds exactly,
    so the expected count is zero; a positive count signals a broken
    precondition or arithmetic.
    """
    if not (K > 0.0 and N > 0.0 and b > 0.0):
        raise InvalidArgumentError(f"K, N, b must be positive, got {(K, N, b)}")
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgumentError(f"samples must have shape (n, 3), got {arr.shape}")
    X, Y, Z = arr[:, 0], arr[:, 1], arr[:, 2]
    bad = (Z < 0.0) | (Y < K * Z)
    if np.any(bad):
        idx = np.nonzero(bad)[0]
        raise InvalidArgumentError(
            f"samples at indices {idx[:5].tolist()} violate Y >= K*Z >= 0")
    left = (X + Z > b) & (N * Y + Z <= b)
    right = (X > K * N * b / (K * N + 1.0)) & (N * Y <= b)
    return int(np.sum(left & ~right))
