"""Acceptance suite: one test per shipped claim, at stated tolerances.

Each test recomputes its quantity from scratch, appends a PASS/FAIL line
with the measured values to the terminal summary, and then asserts.  The
sizes are desk scale on purpose: every criterion finishes in seconds to a
few minutes on one core.
"""
import csv
import itertools
import json
import math
import time

import numpy as np

from conftest import ACCEPTANCE_LINES
from spdelab.cli import DEFAULT_REGIONS, main
from spdelab.cubes import (Cube, build_extended, count_bound, extended_count,
                           subcubes, unit_cube)
from spdelab.degiorgi import (CutoffFamily, IterationParams, iteration_trace,
                              time_window, truncation_energy)
from spdelab.fields import FieldPath, FieldSnapshot, Grid, interpolation_check, sup_on
from spdelab.geometry import Ball, SpaceTimeRect, cover_cylinder, covering_bound
from spdelab.jn import (fit_decay, levelset_fractions, log_field,
                        moment_tail_value, stability_spread, tail_quantiles)
from spdelab.montecarlo import (ExperimentSpec, comparison_experiment,
                                filter_lemma_check, harnack_curve,
                                indicator_monotonicity, median_sup,
                                positivity_scan, run_ensemble)
from spdelab.solver import (ModelParams, SolverConfig, TestFunction,
                            build_model, draw_increments,
                            make_initial_condition, path_seed,
                            periodic_heat_kernel, qv_check, solve_path,
                            weak_residual)

P_WIN, Q_WIN = DEFAULT_REGIONS["P"], DEFAULT_REGIONS["Q"]


def record(num: int, budget: float, elapsed: float, ok: bool, detail: str):
    line = (f"criterion {num:>2} {'PASS' if ok else 'FAIL'} "
            f"({elapsed:5.1f}s / {budget:g}s budget): {detail}")
    ACCEPTANCE_LINES.append(line)
    assert ok and elapsed < budget, line


def test_01_heat_benchmark_convergence():
    t0 = time.perf_counter()
    t_init, t_final = 0.0625, 0.25
    errors = []
    for npts in (64, 128, 256):
        g = Grid.regular(1, npts)
        cm = build_model(ModelParams(a_kind="identity", f_kind="zero",
                                     g_kind="zero", m=0), 1)
        x = g.coords_flat()[0]
        u0 = FieldSnapshot(g, 0.0, periodic_heat_kernel(x, t_init))
        path = solve_path(u0, cm, SolverConfig(), t_final, seed=0)
        exact = periodic_heat_kernel(x, t_init + float(path.times[-1]))
        errors.append(float(math.sqrt(g.dx * np.sum((path.values[-1] - exact) ** 2))))
    ratios = [errors[i] / errors[i + 1] for i in range(2)]
    elapsed = time.perf_counter() - t0
    ok = all(3.5 <= r <= 4.5 for r in ratios)
    record(1, 10.0, elapsed, ok,
           f"L2 error ratios per dx halving: {ratios[0]:.3f}, {ratios[1]:.3f} "
           f"(want [3.5, 4.5])")


def test_02_weak_residual_halves_with_dt():
    t0 = time.perf_counter()
    g = Grid.regular(1, 64)
    phi = TestFunction.bump(g, 0.0, 1.0, 1.0)
    u0 = make_initial_condition("bump", g)
    horizon = 0.125
    dt = SolverConfig().step_size(g)

    cm_det = build_model(ModelParams(f_kind="linear", lambda_f=0.3,
                                     g_kind="zero", m=0), 1)
    coarse = solve_path(u0, cm_det, SolverConfig(), horizon, seed=0)
    fine = solve_path(u0, cm_det, SolverConfig(dt=dt / 2), horizon, seed=0)
    det_ratio = (abs(weak_residual(coarse, cm_det, phi, 0.0, horizon))
                 / abs(weak_residual(fine, cm_det, phi, 0.0, horizon)))

    # stochastic mean over 100 paths, the two resolutions coupled by
    # giving the coarse run the pair sums of the fine increments
    cm = build_model(ModelParams(), 1)
    M = round(horizon / dt)
    res_c, res_f = [], []
    for i in range(100):
        dw_fine = draw_increments(path_seed(515, i), 2 * M, cm.m, dt / 2)
        dw_coarse = dw_fine.reshape(M, 2, cm.m).sum(axis=1)
        pc = solve_path(u0, cm, SolverConfig(), horizon, seed=0,
                        increments=dw_coarse)
        pf = solve_path(u0, cm, SolverConfig(dt=dt / 2), horizon, seed=0,
                        increments=dw_fine)
        res_c.append(abs(weak_residual(pc, cm, phi, 0.0, horizon)))
        res_f.append(abs(weak_residual(pf, cm, phi, 0.0, horizon)))
    stoch_ratio = float(np.mean(res_c) / np.mean(res_f))
    elapsed = time.perf_counter() - t0
    ok = 1.8 <= det_ratio <= 2.2 and 1.8 <= stoch_ratio <= 2.2
    record(2, 60.0, elapsed, ok,
           f"residual ratio under dt halving: deterministic {det_ratio:.4f}, "
           f"100-path mean {stoch_ratio:.4f} (want [1.8, 2.2])")


def test_03_quadratic_variation_identity():
    t0 = time.perf_counter()
    g = Grid.regular(1, 64)
    cm = build_model(ModelParams(), 1)
    phi = TestFunction.bump(g, 0.0, 1.0, 1.0)
    u0 = make_initial_condition("bump", g)
    emp = pair = 0.0
    for i in range(200):
        path = solve_path(u0, cm, SolverConfig(), 0.5, seed=path_seed(2024, i))
        rep = qv_check(path, cm, phi)
        emp += rep.empirical_qv
        pair += rep.pairing_qv
    ratio = emp / pair
    elapsed = time.perf_counter() - t0
    record(3, 60.0, elapsed, 0.8 <= ratio <= 1.2,
           f"ensemble empirical/pairing QV = {ratio:.4f} over 200 paths "
           f"(want [0.8, 1.2])")


def test_04_harnack_tail_probability():
    t0 = time.perf_counter()
    spec = ExperimentSpec(grid=Grid.regular(1, 128), horizon=1.0, n_paths=2000,
                          master_seed=2024, regions=dict(DEFAULT_REGIONS))
    ens = run_ensemble(spec)
    a = median_sup(ens, Q_WIN)
    curve = harnack_curve(ens, P_WIN, Q_WIN, a, spec.gammas)
    viol = indicator_monotonicity(ens, P_WIN, Q_WIN, a, spec.gammas)
    gamma_max, est = curve[-1]
    elapsed = time.perf_counter() - t0
    ok = (gamma_max == 256.0 and est.p_hat <= 0.01 and est.ci_hi <= 0.02
          and viol == 0 and not ens.invalid)
    record(4, 300.0, elapsed, ok,
           f"a = {a:.4f}; p_hat({gamma_max:g}) = {est.p_hat:.4f} "
           f"(want <= 0.01), ci_hi = {est.ci_hi:.4f} (want <= 0.02), "
           f"monotonicity violations = {viol} on {est.trials} paths")


def test_05_strict_positivity():
    t0 = time.perf_counter()
    spec = ExperimentSpec(grid=Grid.regular(1, 128), horizon=1.0, n_paths=500,
                          master_seed=2024, regions=dict(DEFAULT_REGIONS))
    ens = run_ensemble(spec)
    rep = positivity_scan(ens, P_WIN, floor=0.0)
    elapsed = time.perf_counter() - t0
    bound = 1e-10 * rep.initial_energy
    ok = rep.n_at_or_below == 0 and rep.worst_neg_energy <= bound
    record(5, 120.0, elapsed, ok,
           f"paths with inf_P <= 0: {rep.n_at_or_below}/{rep.mins.size}; "
           f"worst neg-part energy {rep.worst_neg_energy:.3e} "
           f"(want <= {bound:.3e})")


def test_06_deterministic_comparison_stability():
    t0 = time.perf_counter()
    rep = comparison_experiment(Grid.regular(1, 64), P_WIN, Q_WIN,
                                n_data=50, seed=7, horizon=1.0)
    elapsed = time.perf_counter() - t0
    finite = bool(np.all(np.isfinite(rep.ratios))
                  and np.all(np.isfinite(rep.ratios_refined)))
    ok = finite and rep.relative_change < 0.20
    record(6, 120.0, elapsed, ok,
           f"50 random data: max sup/inf ratio {rep.max_ratio:.4f}, refined "
           f"{rep.max_ratio_refined:.4f}, change {100 * rep.relative_change:.2f}% "
           f"(want < 20%, all finite: {finite})")


def test_07_truncation_vanishing():
    t0 = time.perf_counter()
    g = Grid.regular(1, 32)
    fam = CutoffFamily(1)
    times = np.linspace(0.0, 1.0, 9)
    rng = np.random.default_rng(42)
    worst = 0.0
    all_zero = True
    for _ in range(100):
        vals = rng.gamma(2.0, 1.0, size=(9, g.size))
        path = FieldPath(g, times, vals)
        a = 2.0 * float(np.max(vals))
        for k in range(1, 5):
            u_k = truncation_energy(path, fam, k, a)
            worst = max(worst, u_k)
            all_zero &= (u_k == 0.0)
    elapsed = time.perf_counter() - t0
    record(7, 10.0, elapsed, all_zero,
           f"U_k for k in 1..4 at a = 2 sup u over 100 random fields: "
           f"max = {worst!r} (want exactly 0.0)")


def test_08_iteration_constant_finite():
    t0 = time.perf_counter()
    spec = ExperimentSpec(grid=Grid.regular(1, 64), horizon=1.0, n_paths=200,
                          master_seed=11)
    cm = spec.build()[0]
    fam = CutoffFamily(1)
    base = SpaceTimeRect(*time_window(0), Ball((0.0,), 1.0))
    c_hats = np.full(spec.n_paths, np.nan)

    def consume(i, path):
        a = 0.5 * sup_on(path, base)
        trace = iteration_trace(path, cm, fam, IterationParams(a=a, delta=0.25))
        c_hats[i] = trace.c_hat_max

    ens = run_ensemble(spec, consumers=(consume,))
    vals = c_hats[ens.ok]
    n_finite = int(np.sum(np.isfinite(vals)))
    elapsed = time.perf_counter() - t0
    ok = n_finite == vals.size == 200
    record(8, 120.0, elapsed, ok,
           f"per-path C finite on {n_finite}/{vals.size} paths at delta = 1/4; "
           f"quartiles {np.percentile(vals, 25):.3f} / {np.median(vals):.3f} / "
           f"{np.percentile(vals, 75):.3f}, max {np.max(vals):.3f}")


def test_09_cube_count_recurrence():
    t0 = time.perf_counter()
    hier = build_extended(unit_cube(1), 3)
    ok = True
    counts = []
    for j in range(4):
        x = 1 if j == 0 else 2 * 4 ** 3 * counts[-1] + 2 ** j * 4 ** (3 * j)
        counts.append(x)
        ok &= (hier.count_level(j) == x == extended_count(1, j))
        ok &= (x <= 4 ** (4 * j) == count_bound(1, j))
    elapsed = time.perf_counter() - t0
    record(9, 10.0, elapsed, ok,
           f"extended-level counts {counts} match the recurrence and stay "
           f"under 4^(4j) for j <= 3")


def test_10_covering_soundness():
    t0 = time.perf_counter()
    checked = 0
    ok = True
    details = []
    for theta, n in itertools.product((0.6, 0.75, 0.9), (1, 2)):
        bound = covering_bound(theta, n)
        counts = set()
        for R in (1.0, 0.5):
            anchors = cover_cylinder(theta, R, n)
            counts.add(len(anchors))
            ok &= len(anchors) <= bound
            rho = (1.0 - theta) * R / 2.0
            ta = np.array([a[0] for a in anchors])
            xa = np.array([a[1] for a in anchors])
            # anchors lie inside the target cylinder
            ok &= bool(np.all(np.abs(xa) < theta * R)
                       and np.all(ta <= 1.0)
                       and np.all(ta > 1.0 - (theta * R) ** 2))
            # exhaustive membership on a fine grid over the target
            tg = 1.0 - (theta * R) ** 2 * np.linspace(0.0, 1.0, 25)
            xg = np.linspace(-theta * R, theta * R, 33)
            X = np.array(list(itertools.product(*([xg] * n))))
            for t in tg:
                active = (t <= ta + 1e-12) & (ta - rho * rho - 1e-12 <= t)
                sp = np.all(np.abs(X[:, None, :] - xa[None, active, :])
                            < rho + 1e-12, axis=2)
                ok &= bool(np.all(np.any(sp, axis=1)))
                checked += X.shape[0]
        # the lattice is scale free: same count at both radii
        ok &= len(counts) == 1
        details.append(f"theta={theta} n={n}: {counts.pop()} <= {bound}")
    elapsed = time.perf_counter() - t0
    record(10, 30.0, elapsed, ok,
           f"{checked} grid points all covered; counts vs bounds: "
           + "; ".join(details))


def test_11_interpolation_inequalities():
    t0 = time.perf_counter()
    g = Grid.regular(1, 32)
    times = np.linspace(0.0, 1.0, 9)
    rect = SpaceTimeRect(0.2, 0.9, Ball((0.0,), 1.0))
    triples = ((4.0, 3.0, 2.0), (3.0, 2.0, 4.0), (6.0, 4.0, 2.0))
    rng = np.random.default_rng(7)
    violations = 0
    min_slack = math.inf
    for _ in range(100):
        path = FieldPath(g, times, rng.gamma(2.0, 1.0, size=(9, g.size)))
        for alpha, beta, q in triples:
            for mode, eps in (("time", 0.7), ("space", 0.3)):
                rep = interpolation_check(path, alpha, beta, q, rect, eps=eps,
                                          mode=mode)
                min_slack = min(min_slack, rep.slack)
                violations += rep.slack < -1e-9
    elapsed = time.perf_counter() - t0
    record(11, 30.0, elapsed, violations == 0,
           f"{violations} violations over 100 fields x 3 exponent triples "
           f"x 2 modes; min slack {min_slack:.4f} (tolerance -1e-9)")


def test_12_filter_lemma_inclusion():
    t0 = time.perf_counter()
    settings = [(0.5, 1.0, 1.0), (1.0, 1.0, 1.0), (2.0, 3.0, 1.5),
                (0.1, 10.0, 0.3), (5.0, 0.2, 2.0), (1.0, 0.5, 0.1),
                (3.0, 3.0, 3.0), (0.25, 8.0, 1.0), (10.0, 10.0, 0.5),
                (0.7, 2.5, 4.0)]
    total = 0
    for s, (K, N, b) in enumerate(settings):
        rng = np.random.default_rng(100 + s)
        Z = rng.exponential(b / 2.0, 1_000_000)
        Y = K * Z + rng.exponential(b / 2.0, 1_000_000)
        X = rng.exponential(b, 1_000_000)
        total += filter_lemma_check(np.column_stack([X, Y, Z]), K, N, b)
    elapsed = time.perf_counter() - t0
    record(12, 30.0, elapsed, total == 0,
           f"{total} inclusion violations over 10^6 triples x 10 (K, N, b) "
           f"settings (want 0)")


def test_13_levelset_decay_and_tail_stability():
    t0 = time.perf_counter()
    spec = ExperimentSpec(grid=Grid.regular(1, 64), horizon=1.0, n_paths=200,
                          master_seed=7)
    root = Cube(l=0.5, s=0.125, z=math.sqrt(0.125), w=(0.0,))
    parts = subcubes(root)
    alphas = np.asarray(spec.alphas)
    mus = (1e-2, 1e-4, 1e-6)
    frac_up = np.full((spec.n_paths, alphas.size), np.nan)
    frac_lo = np.full((spec.n_paths, alphas.size), np.nan)
    tails = {mu: np.full(spec.n_paths, np.nan) for mu in mus}

    def consume(i, path):
        lf = log_field(path, spec.mu)
        _, up, lo = levelset_fractions(lf, root, alphas)
        frac_up[i], frac_lo[i] = up, lo
        for mu in mus:
            tails[mu][i] = moment_tail_value(path, mu, spec.nu,
                                             parts.d_plus, parts.d_minus)

    ens = run_ensemble(spec, consumers=(consume,))
    ok_rows = ens.ok
    fit_up = fit_decay(alphas, np.median(frac_up[ok_rows], axis=0),
                       band=(0.05, 0.9))
    fit_lo = fit_decay(alphas, np.median(frac_lo[ok_rows], axis=0),
                       band=(0.05, 0.9))
    k_hat = {mu: tail_quantiles(tails[mu][ok_rows])[0.05] for mu in mus}
    spread = stability_spread(k_hat)
    elapsed = time.perf_counter() - t0
    ok = (fit_up.decay_rate > 0.0 and fit_lo.decay_rate > 0.0
          and fit_up.r_squared > 0.9 and fit_lo.r_squared > 0.9
          and spread < 0.25)
    record(13, 300.0, elapsed, ok,
           f"median-fraction fits: upper rate {fit_up.decay_rate:.2f} "
           f"(r2 {fit_up.r_squared:.3f}), lower rate {fit_lo.decay_rate:.2f} "
           f"(r2 {fit_lo.r_squared:.3f}); K_hat spread over mu = 1e-2..1e-6: "
           f"{100 * spread:.2f}% (want < 25%)")


def test_14_manifest_replay_reproducibility(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "accept.cfg"
    cfg.write_text(
        "[grid]\nnpts = 64\n\n"
        "[solver]\nhorizon = 1.0\n\n"
        "[montecarlo]\npaths = 24\nseed = 2024\nchunk = 8\n")
    first, replay, threaded = (tmp_path / d for d in ("a", "b", "c"))
    rc0 = main(["--config", str(cfg), "--out", str(first), "harnack"])
    rc1 = main(["--config", str(first / "manifest.json"),
                "--out", str(replay), "harnack"])
    rc2 = main(["--config", str(cfg), "--threads", "4",
                "--out", str(threaded), "harnack"])
    identical = all(
        (first / name).read_bytes() == (replay / name).read_bytes()
        == (threaded / name).read_bytes()
        for name in ("harnack_curve.csv", "harnack_summary.csv"))
    elapsed = time.perf_counter() - t0
    ok = rc0 == rc1 == rc2 == 0 and identical
    record(14, 120.0, elapsed, ok,
           f"manifest replay and --threads 4 rerun byte-identical: {identical} "
           f"(exit codes {rc0}/{rc1}/{rc2})")
