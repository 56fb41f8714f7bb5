"""Command line driver: config parsing, dispatch, and run artifacts.

A run reads one INI-style config (every key optional), executes one
subcommand, and leaves a directory containing CSV result tables plus a
manifest.json.  The manifest embeds the effective configuration in
canonical form, so `--config <run>/manifest.json` replays the run and,
because all randomness is counter-seeded and CSV floats are written
with repr, reproduces every result file byte for byte no matter how
many threads are used.

Exit codes: 0 success, 2 validation error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import difflib
import json
import math
import os
import sys
import time
from importlib import metadata

import numpy as np

from .cubes import (
    Cube,
    build_core,
    build_extended,
    core_count,
    count_bound,
    extended_count,
    subcubes,
    unit_cube,
)
from .degiorgi import CutoffFamily, IterationParams, iteration_trace, time_window
from .errors import ConfigError, InvalidArgumentError
from .fields import FieldSnapshot, Grid, MixedNormSpec, lpq_norm, sup_on
from .geometry import Ball, SpaceTimeRect, make_cylinder
from .jn import (fit_decay, hierarchy_stats, levelset_fractions, log_field,
                 moment_tail_value, tail_quantiles)
from .montecarlo import (
    ExperimentSpec,
    comparison_experiment,
    harnack_curve,
    indicator_monotonicity,
    median_sup,
    positivity_scan,
    run_ensemble,
    validate_windows,
)
from .solver import (
    ModelParams,
    SolverConfig,
    build_model,
    path_seed,
    periodic_heat_kernel,
    solve_path,
)

try:
    VERSION = metadata.version("spdelab")
except metadata.PackageNotFoundError:  # running from a source tree
    VERSION = "0.1.0"

COMMANDS = ("solve", "ensemble", "harnack", "positivity", "moser",
            "degiorgi", "jn", "cubes", "norms")

_SECTION_KEYS = {
    "grid": {"n", "npts", "extent"},
    "model": {"a", "f", "g", "lambda_f", "lambda_g", "iota", "m", "a_seed",
              "a_value", "a_expr", "f_expr", "g_expr", "growth_bound"},
    "solver": {"dt", "scheme", "tol", "f0", "amplitude", "width", "ic_seed",
               "horizon"},
    "regions": None,  # keys are user-chosen region names
    "montecarlo": {"paths", "seed", "chunk", "gammas", "floor", "alphas",
                   "mu", "nu", "depth"},
    "output": {"plot"},
}

DEFAULT_REGIONS = {
    "Q": SpaceTimeRect(0.0625, 0.25, Ball((0.0,), 0.5)),
    "P": SpaceTimeRect(0.5, 1.0, Ball((0.0,), 0.5)),
}


# ---------------------------------------------------------------------------
# config text <-> ExperimentSpec

def _tokenize(text: str):
    """INI text -> {section: {key: (raw value, line number)}}.

    Unknown sections and keys are rejected with a close-match hint.
    """
    sections: dict = {}
    current = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"unterminated section header {line!r}", line=ln)
            name = line[1:-1].strip()
            if name not in _SECTION_KEYS:
                hint = difflib.get_close_matches(name, _SECTION_KEYS, n=1, cutoff=0.5)
                msg = f"unknown section [{name}]"
                if hint:
                    msg += f"; did you mean [{hint[0]}]?"
                raise ConfigError(msg, line=ln)
            current = name
            sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=ln)
        if current is None:
            raise ConfigError("key outside any [section]", line=ln)
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        known = _SECTION_KEYS[current]
        if known is not None and key not in known:
            hint = difflib.get_close_matches(key, known, n=1, cutoff=0.5)
            msg = f"unknown key {key!r} in [{current}]"
            if hint:
                msg += f"; did you mean {hint[0]!r}?"
            raise ConfigError(msg, line=ln)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", line=ln)
        sections[current][key] = (val, ln)
    return sections


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _floats(raw: str) -> tuple:
    toks = raw.replace(",", " ").split()
    if not toks:
        raise ValueError("expected at least one number")
    return tuple(float(t) for t in toks)


def _dt(raw: str):
    return None if raw.lower() == "auto" else float(raw)


def _region(raw: str) -> SpaceTimeRect:
    obj = json.loads(raw)
    if not isinstance(obj, dict):
        raise ValueError("region must be a JSON object")
    keys = set(obj)
    if keys == {"t0", "x0", "r"}:
        return make_cylinder(obj["t0"], obj["x0"], obj["r"])
    if keys == {"t_lo", "t_hi", "center", "radius"}:
        return SpaceTimeRect(obj["t_lo"], obj["t_hi"],
                             Ball(obj["center"], obj["radius"]))
    raise ValueError(
        "region needs keys {t0, x0, r} (parabolic cylinder) or "
        f"{{t_lo, t_hi, center, radius}}, got {sorted(keys)}")


def _take(sections, section: str, key: str, conv, default):
    entry = sections.get(section, {}).get(key)
    if entry is None:
        return default
    raw, ln = entry
    try:
        return conv(raw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {exc}", line=ln) from None


def _line_of(sections, section: str, *keys):
    for key in keys:
        entry = sections.get(section, {}).get(key)
        if entry is not None:
            return entry[1]
    return None


def parse_config(text: str) -> ExperimentSpec:
    """Config text to a fully validated spec, all defaults filled.

    Unknown keys, malformed values, and geometry violations raise
    ConfigError carrying the offending line number when one exists.
    The coefficient model and initial condition are built and spot
    checked eagerly so a bad model fails here, not mid-run.
    """
    sections = _tokenize(text)

    try:
        grid = Grid.regular(_take(sections, "grid", "n", int, 1),
                            _take(sections, "grid", "npts", int, 128),
                            _take(sections, "grid", "extent", float, 2.0))
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), line=_line_of(sections, "grid", "npts", "n", "extent")) from None

    model = ModelParams(
        a_kind=_take(sections, "model", "a", str, "identity"),
        f_kind=_take(sections, "model", "f", str, "zero"),
        g_kind=_take(sections, "model", "g", str, "trig"),
        lambda_f=_take(sections, "model", "lambda_f", float, 0.0),
        lambda_g=_take(sections, "model", "lambda_g", float, 0.5),
        iota=_take(sections, "model", "iota", float, 1.0),
        m=_take(sections, "model", "m", int, 4),
        a_seed=_take(sections, "model", "a_seed", int, 0),
        a_value=_take(sections, "model", "a_value", float, 1.0),
        a_expr=_take(sections, "model", "a_expr", str, None),
        f_expr=_take(sections, "model", "f_expr", str, None),
        g_expr=_take(sections, "model", "g_expr", str, None),
        growth_bound=_take(sections, "model", "growth_bound", float, None),
    )
    try:
        solver = SolverConfig(dt=_take(sections, "solver", "dt", _dt, None),
                              scheme=_take(sections, "solver", "scheme", str, "semi-implicit"),
                              tol=_take(sections, "solver", "tol", float, 1e-10))
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), line=_line_of(sections, "solver", "scheme", "dt", "tol")) from None

    region_items = sections.get("regions", {})
    if region_items:
        regions = {}
        for name, (raw, ln) in region_items.items():
            try:
                regions[name] = _region(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad region {name!r}: {exc}", line=ln) from None
    else:
        regions = dict(DEFAULT_REGIONS) if grid.n == 1 else {
            name: SpaceTimeRect(r.t_lo, r.t_hi, Ball((0.0, 0.0), r.ball.radius))
            for name, r in DEFAULT_REGIONS.items()}

    try:
        spec = ExperimentSpec(
            grid=grid, model=model, solver=solver,
            ic_kind=_take(sections, "solver", "f0", str, "bump"),
            ic_amplitude=_take(sections, "solver", "amplitude", float, 1.0),
            ic_width=_take(sections, "solver", "width", float, 1.0),
            ic_seed=_take(sections, "solver", "ic_seed", int, 0),
            horizon=_take(sections, "solver", "horizon", float, 1.0),
            n_paths=_take(sections, "montecarlo", "paths", int, 200),
            master_seed=_take(sections, "montecarlo", "seed", int, 2024),
            regions=regions,
            chunk=_take(sections, "montecarlo", "chunk", int, 64),
            gammas=_take(sections, "montecarlo", "gammas", _floats,
                         ExperimentSpec.__dataclass_fields__["gammas"].default),
            floor=_take(sections, "montecarlo", "floor", float, 0.0),
            alphas=_take(sections, "montecarlo", "alphas", _floats,
                         ExperimentSpec.__dataclass_fields__["alphas"].default),
            mu=_take(sections, "montecarlo", "mu", float, 1e-4),
            nu=_take(sections, "montecarlo", "nu", float, 1.0),
            depth=_take(sections, "montecarlo", "depth", int, 1),
        )
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), line=_line_of(sections, "solver", "horizon", "f0")) from None

    if "P" in spec.regions and "Q" in spec.regions:
        try:
            validate_windows(spec.regions["P"], spec.regions["Q"])
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), line=_line_of(sections, "regions", "P", "Q")) from None
    try:
        spec.build()
    except InvalidArgumentError as exc:
        raise ConfigError(f"model rejected: {exc}") from None
    return spec


def print_config(spec: ExperimentSpec) -> str:
    """Canonical config text; parse_config(print_config(s)) == s."""
    p, s = spec.model, spec.solver
    lines = [
        "[grid]",
        f"n = {spec.grid.n}",
        f"npts = {spec.grid.npts}",
        f"extent = {spec.grid.extent!r}",
        "",
        "[model]",
        f"a = {p.a_kind}",
        f"f = {p.f_kind}",
        f"g = {p.g_kind}",
        f"lambda_f = {p.lambda_f!r}",
        f"lambda_g = {p.lambda_g!r}",
        f"iota = {p.iota!r}",
        f"m = {p.m}",
        f"a_seed = {p.a_seed}",
        f"a_value = {p.a_value!r}",
    ]
    for key, val in (("a_expr", p.a_expr), ("f_expr", p.f_expr), ("g_expr", p.g_expr)):
        if val is not None:
            lines.append(f"{key} = {val}")
    if p.growth_bound is not None:
        lines.append(f"growth_bound = {p.growth_bound!r}")
    lines += [
        "",
        "[solver]",
        "dt = auto" if s.dt is None else f"dt = {s.dt!r}",
        f"scheme = {s.scheme}",
        f"tol = {s.tol!r}",
        f"f0 = {spec.ic_kind}",
        f"amplitude = {spec.ic_amplitude!r}",
        f"width = {spec.ic_width!r}",
        f"ic_seed = {spec.ic_seed}",
        f"horizon = {spec.horizon!r}",
        "",
        "[regions]",
    ]
    for name, rect in spec.regions.items():
        lines.append(f"{name} = " + json.dumps(
            {"t_lo": rect.t_lo, "t_hi": rect.t_hi,
             "center": list(rect.ball.center), "radius": rect.ball.radius}))
    lines += [
        "",
        "[montecarlo]",
        f"paths = {spec.n_paths}",
        f"seed = {spec.master_seed}",
        f"chunk = {spec.chunk}",
        "gammas = " + ", ".join(repr(g) for g in spec.gammas),
        f"floor = {spec.floor!r}",
        "alphas = " + ", ".join(repr(a) for a in spec.alphas),
        f"mu = {spec.mu!r}",
        f"nu = {spec.nu!r}",
        f"depth = {spec.depth}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# report writing

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str, header, rows):
    # repr floats round-trip exactly, and no timestamps: reruns are
    # byte-identical, which the manifest contract relies on.
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def svg_line_chart(path: str, xs, series, labels, title: str,
                   xlabel: str, ylabel: str, logx: bool = False):
    """Minimal self-contained SVG line chart (no plotting dependency)."""
    xs = [float(v) for v in xs]
    tx = [math.log2(v) for v in xs] if logx else xs
    ys = [float(v) for s in series for v in s]
    x0, x1 = min(tx), max(tx)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.06 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    W, H, ML, MR, MT, MB = 640, 420, 72, 24, 46, 56

    def X(v):
        return ML + (W - ML - MR) * (v - x0) / (x1 - x0)

    def Y(v):
        return H - MB - (H - MT - MB) * (v - y0) / (y1 - y0)

    colors = ("#1f6fb4", "#c44e52", "#55a868", "#8172b2")
    dashes = ("", "7,4", "2,3", "10,3,2,3")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="15">{title}</text>',
           f'<line x1="{ML}" y1="{H - MB}" x2="{W - MR}" y2="{H - MB}" stroke="black"/>',
           f'<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{H - MB}" stroke="black"/>',
           f'<text x="{(ML + W - MR) / 2:.1f}" y="{H - 14}" text-anchor="middle">{xlabel}</text>',
           f'<text x="18" y="{(MT + H - MB) / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 18 {(MT + H - MB) / 2:.1f})">{ylabel}</text>']
    for i in range(5):
        vx = x0 + i * (x1 - x0) / 4.0
        lab = 2.0**vx if logx else vx
        out.append(f'<line x1="{X(vx):.2f}" y1="{H - MB}" x2="{X(vx):.2f}" '
                   f'y2="{H - MB + 5}" stroke="black"/>')
        out.append(f'<text x="{X(vx):.2f}" y="{H - MB + 18}" '
                   f'text-anchor="middle">{lab:.4g}</text>')
        vy = y0 + i * (y1 - y0) / 4.0
        out.append(f'<line x1="{ML - 5}" y1="{Y(vy):.2f}" x2="{ML}" '
                   f'y2="{Y(vy):.2f}" stroke="black"/>')
        out.append(f'<text x="{ML - 8}" y="{Y(vy) + 4:.2f}" '
                   f'text-anchor="end">{vy:.4g}</text>')
    for k, (ser, label) in enumerate(zip(series, labels)):
        color = colors[k % len(colors)]
        dash = dashes[k % len(dashes)]
        pts = " ".join(f"{X(tx[i]):.2f},{Y(float(v)):.2f}" for i, v in enumerate(ser))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8"'
                   f'{extra} points="{pts}"/>')
        out.append(f'<text x="{W - MR - 6}" y="{MT + 16 + 16 * k}" text-anchor="end" '
                   f'fill="{color}">{label}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def _failure_roster(ens) -> dict:
    idx = np.nonzero(ens.failed)[0]
    return {"count": int(idx.size),
            "paths": [int(i) for i in idx],
            "steps": [int(ens.fail_steps[i]) for i in idx],
            "invalid": bool(ens.invalid)}


_NO_FAILURES = {"count": 0, "paths": [], "steps": [], "invalid": False}


# ---------------------------------------------------------------------------
# subcommands; each returns (result file names, failure roster)

def cmd_solve(spec, outdir, args):
    """Deterministic heat benchmark: L2 error against the periodized kernel
    at three resolutions, time step locked to dx^2/2 so both error terms
    scale together."""
    t_init, t_final = 0.0625, 0.25
    rows = []
    prev_err = None
    for npts in (64, 128, 256):
        g = Grid.regular(1, npts, spec.grid.extent)
        cm = build_model(ModelParams(a_kind="identity", f_kind="zero",
                                     g_kind="zero", m=0), 1, g.extent)
        cfg = SolverConfig(scheme=spec.solver.scheme)
        x = g.coords_flat()[0]
        u0 = FieldSnapshot(g, 0.0, periodic_heat_kernel(x, t_init, g.extent))
        path = solve_path(u0, cm, cfg, t_final, seed=0)
        exact = periodic_heat_kernel(x, t_init + float(path.times[-1]), g.extent)
        err = float(math.sqrt(g.dx * np.sum((path.values[-1] - exact) ** 2)))
        rows.append((npts, g.dx, path.dt, err,
                     None if prev_err is None else prev_err / err))
        prev_err = err
    write_csv(os.path.join(outdir, "resolution_study.csv"),
              ["npts", "dx", "dt", "l2_error", "error_ratio"], rows)
    results = ["resolution_study.csv"]
    if args.plot:
        svg_line_chart(os.path.join(outdir, "resolution_study.svg"),
                       [r[0] for r in rows], [[r[3] for r in rows]], ["l2 error"],
                       "heat benchmark", "nodes", "l2 error", logx=True)
        results.append("resolution_study.svg")
    print(f"error ratios per refinement: "
          f"{', '.join(repr(r[4]) for r in rows[1:])}")
    return results, _NO_FAILURES


def cmd_ensemble(spec, outdir, args):
    ens = run_ensemble(spec, threads=args.threads)
    names = sorted(spec.regions)
    header = ["path", "failed", "fail_step"]
    for name in names:
        header += [f"sup_{name}", f"inf_{name}"]
    header.append("neg_energy")
    rows = []
    for i in range(spec.n_paths):
        row = [i, bool(ens.failed[i]), int(ens.fail_steps[i])]
        for name in names:
            row += [float(ens.sup[name][i]), float(ens.inf[name][i])]
        row.append(float(ens.neg_energy[i]))
        rows.append(row)
    write_csv(os.path.join(outdir, "paths.csv"), header, rows)
    print(f"{ens.n_ok}/{spec.n_paths} paths completed"
          + (" (run flagged invalid)" if ens.invalid else ""))
    return ["paths.csv"], _failure_roster(ens)


def _named_regions(spec, *names):
    out = []
    for name in names:
        if name not in spec.regions:
            raise InvalidArgumentError(
                f"this experiment needs a region named {name!r} in [regions]")
        out.append(spec.regions[name])
    return out


def cmd_harnack(spec, outdir, args):
    Q, P = _named_regions(spec, "Q", "P")
    validate_windows(P, Q)
    ens = run_ensemble(spec, threads=args.threads)
    a = median_sup(ens, Q)
    curve = harnack_curve(ens, P, Q, a, spec.gammas)
    violations = indicator_monotonicity(ens, P, Q, a, spec.gammas)
    write_csv(os.path.join(outdir, "harnack_curve.csv"),
              ["gamma", "hits", "trials", "p_hat", "ci_lo", "ci_hi"],
              [(g, e.hits, e.trials, e.p_hat, e.ci_lo, e.ci_hi) for g, e in curve])
    write_csv(os.path.join(outdir, "harnack_summary.csv"),
              ["threshold_a", "n_paths", "n_ok", "n_failed",
               "monotonicity_violations", "invalid"],
              [(a, spec.n_paths, ens.n_ok, int(np.sum(ens.failed)),
                violations, ens.invalid)])
    results = ["harnack_curve.csv", "harnack_summary.csv"]
    if args.plot:
        svg_line_chart(os.path.join(outdir, "harnack_curve.svg"),
                       [g for g, _ in curve],
                       [[e.p_hat for _, e in curve], [e.ci_hi for _, e in curve]],
                       ["p_hat", "ci_hi"], "joint tail vs ratio threshold",
                       "gamma", "probability", logx=True)
        results.append("harnack_curve.svg")
    last_g, last = curve[-1]
    print(f"a = {a!r}; p_hat({last_g:g}) = {last.p_hat!r} "
          f"[{last.ci_lo!r}, {last.ci_hi!r}]; monotonicity violations: {violations}")
    return results, _failure_roster(ens)


def cmd_positivity(spec, outdir, args):
    if "P" in spec.regions:
        region = spec.regions["P"]
    elif len(spec.regions) == 1:
        region = next(iter(spec.regions.values()))
    else:
        raise InvalidArgumentError(
            "positivity needs a region named 'P' (or a single region)")
    ens = run_ensemble(spec, threads=args.threads)
    rep = positivity_scan(ens, region, spec.floor)
    ok_ids = np.nonzero(ens.ok)[0]
    write_csv(os.path.join(outdir, "positivity_paths.csv"),
              ["path", "region_min", "neg_energy"],
              [(int(i), float(m), float(ens.neg_energy[i]))
               for i, m in zip(ok_ids, rep.mins)])
    write_csv(os.path.join(outdir, "positivity_summary.csv"),
              ["floor", "n_at_or_below", "worst_neg_energy",
               "initial_energy", "n_failed"],
              [(rep.floor, rep.n_at_or_below, rep.worst_neg_energy,
                rep.initial_energy, rep.n_failed)])
    print(f"{rep.n_at_or_below} of {rep.mins.size} paths reached the floor "
          f"{rep.floor!r}; worst negative-part energy {rep.worst_neg_energy!r}")
    return ["positivity_paths.csv", "positivity_summary.csv"], _failure_roster(ens)


def cmd_moser(spec, outdir, args):
    Q, P = _named_regions(spec, "Q", "P")
    rep = comparison_experiment(spec.grid, P, Q, n_data=50,
                                seed=spec.master_seed, horizon=spec.horizon)
    write_csv(os.path.join(outdir, "comparison_ratios.csv"),
              ["data_index", "ratio", "ratio_refined"],
              [(d, float(rep.ratios[d]), float(rep.ratios_refined[d]))
               for d in range(rep.ratios.size)])
    write_csv(os.path.join(outdir, "comparison_summary.csv"),
              ["max_ratio", "max_ratio_refined", "relative_change"],
              [(rep.max_ratio, rep.max_ratio_refined, rep.relative_change)])
    print(f"max sup/inf ratio {rep.max_ratio!r}, refined {rep.max_ratio_refined!r} "
          f"(relative change {rep.relative_change!r})")
    return ["comparison_ratios.csv", "comparison_summary.csv"], _NO_FAILURES


def cmd_degiorgi(spec, outdir, args):
    n = spec.grid.n
    if spec.horizon < 1.0:
        raise InvalidArgumentError(
            "the iteration windows live in (0, 1]; set horizon >= 1")
    if spec.grid.extent < 1.5:
        raise InvalidArgumentError(
            "the cutoff family needs the box to cover |x| <= 3/2")
    cm, u0 = spec.build()
    path = solve_path(u0, cm, spec.solver, spec.horizon,
                      seed=path_seed(spec.master_seed, 0))
    lo, hi = time_window(0)
    base = sup_on(path, SpaceTimeRect(lo, hi, Ball((0.0,) * n, 1.0)))
    if base <= 0.0:
        raise InvalidArgumentError(
            "field is nonpositive on the base window; no level to truncate at")
    params = IterationParams(a=0.5 * base)
    trace = iteration_trace(path, cm, CutoffFamily(n), params)
    write_csv(os.path.join(outdir, "iteration_trace.csv"),
              ["k", "energy", "mart_sup", "qv_bound", "c_hat"],
              [(r.k, r.energy, r.mart_sup, r.qv_bound, r.c_hat)
               for r in trace.rows])
    write_csv(os.path.join(outdir, "iteration_summary.csv"),
              ["a", "eps", "delta", "decayed", "c_hat_max"],
              [(trace.a, trace.eps, trace.delta, trace.decayed, trace.c_hat_max)])
    print(f"a = {trace.a!r}; U_K/U_0 = "
          f"{(trace.rows[-1].energy / trace.rows[0].energy if trace.rows[0].energy else 0.0)!r};"
          f" decayed: {trace.decayed}")
    return ["iteration_trace.csv", "iteration_summary.csv"], _NO_FAILURES


def cmd_jn(spec, outdir, args):
    n = spec.grid.n
    H = spec.horizon
    root = Cube(l=H / 2.0, s=H / 8.0, z=math.sqrt(H / 8.0), w=(0.0,) * n)
    cm, u0 = spec.build()
    path = solve_path(u0, cm, spec.solver, H, seed=path_seed(spec.master_seed, 0))
    lf = log_field(path, spec.mu)
    hier = build_core(root, spec.depth)

    cube_rows = []
    for level, k, st in hierarchy_stats(lf, cm, hier, per_level_limit=32):
        cube_rows.append((level, k, st.cube.l, st.cube.s, st.a_c,
                          st.plus_avg, st.minus_avg, st.qv_ratio))
    write_csv(os.path.join(outdir, "jn_cubes.csv"),
              ["level", "index", "time_center", "scale", "a_c",
               "upper_avg", "lower_avg", "qv_ratio"], cube_rows)

    # the decay fit uses ensemble-median fractions: one path's fractions
    # are too quantized at desk scale to survive the band filter
    parts = subcubes(root)
    alphas = np.asarray(spec.alphas, dtype=float)
    frac_up = np.full((spec.n_paths, alphas.size), np.nan)
    frac_lo = np.full((spec.n_paths, alphas.size), np.nan)
    values = np.full(spec.n_paths, np.nan)

    def consume(i, p):
        lf_i = log_field(p, spec.mu)
        _, up, lo = levelset_fractions(lf_i, root, alphas)
        frac_up[i], frac_lo[i] = up, lo
        values[i] = moment_tail_value(p, spec.mu, spec.nu,
                                      parts.d_plus, parts.d_minus)

    ens = run_ensemble(spec, consumers=(consume,), threads=args.threads)
    med_up = np.median(frac_up[ens.ok], axis=0)
    med_lo = np.median(frac_lo[ens.ok], axis=0)
    fit_plus = fit_decay(alphas, med_up, band=(0.05, 0.9))
    fit_minus = fit_decay(alphas, med_lo, band=(0.05, 0.9))
    write_csv(os.path.join(outdir, "jn_levelsets.csv"),
              ["alpha", "upper_fraction", "lower_fraction"],
              [(float(a), float(fp), float(fm)) for a, fp, fm in
               zip(alphas, med_up, med_lo)])
    write_csv(os.path.join(outdir, "jn_summary.csv"),
              ["side", "decay_rate", "amplitude", "r_squared", "clamp_fraction"],
              [("upper", fit_plus.decay_rate, fit_plus.amplitude,
                fit_plus.r_squared, lf.clamp_fraction),
               ("lower", fit_minus.decay_rate, fit_minus.amplitude,
                fit_minus.r_squared, lf.clamp_fraction)])
    quantiles = tail_quantiles(values[ens.ok])
    write_csv(os.path.join(outdir, "jn_tails.csv"),
              ["eps", "k_hat", "mu", "nu"],
              [(eps, q, spec.mu, spec.nu)
               for eps, q in sorted(quantiles.items(), reverse=True)])
    results = ["jn_cubes.csv", "jn_levelsets.csv", "jn_summary.csv", "jn_tails.csv"]
    if args.plot:
        svg_line_chart(os.path.join(outdir, "jn_levelsets.svg"),
                       list(alphas), [list(med_up), list(med_lo)],
                       ["upper", "lower"], "level-set fractions",
                       "alpha", "fraction")
        results.append("jn_levelsets.svg")
    print(f"decay rates: upper {fit_plus.decay_rate!r} "
          f"(r^2 {fit_plus.r_squared!r}), lower {fit_minus.decay_rate!r} "
          f"(r^2 {fit_minus.r_squared!r})")
    return results, _failure_roster(ens)


def cmd_cubes(spec, outdir, args):
    depth = args.depth if getattr(args, "depth", None) is not None else spec.depth
    n = spec.grid.n
    root = unit_cube(n)
    core = build_core(root, depth)
    ext = build_extended(root, depth)
    rows = []
    all_match = True
    for j in range(depth + 1):
        c, e = core.count_level(j), ext.count_level(j)
        ce, ee = core_count(n, j), extended_count(n, j)
        all_match &= (c == ce and e == ee)
        rows.append((j, core.levels[j].s, core.levels[j].z, c, ce, e, ee,
                     count_bound(n, j)))
    write_csv(os.path.join(outdir, "cube_counts.csv"),
              ["level", "s", "z", "core_count", "core_expected",
               "extended_count", "extended_expected", "bound"], rows)
    print(f"depth {depth}, n = {n}: counts "
          + ("match the recurrence" if all_match else "DIVERGE from the recurrence"))
    return ["cube_counts.csv"], _NO_FAILURES


def cmd_norms(spec, outdir, args):
    cm, u0 = spec.build()
    path = solve_path(u0, cm, spec.solver, spec.horizon,
                      seed=path_seed(spec.master_seed, 0))
    if "Q" in spec.regions:
        rect = spec.regions["Q"]
    else:
        rect = SpaceTimeRect(spec.horizon / 4.0, spec.horizon,
                             Ball((0.0,) * spec.grid.n, 1.0))
    pairs = [(1.0, 1.0), (2.0, 2.0), (4.0, 2.0), (2.0, 4.0),
             (math.inf, 2.0), (2.0, math.inf), (math.inf, math.inf)]
    rows = [(p, q, lpq_norm(path, MixedNormSpec(p, q), rect)) for p, q in pairs]
    write_csv(os.path.join(outdir, "norms.csv"), ["p", "q", "value"], rows)
    print(f"{len(rows)} mixed norms over ({rect.t_lo!r}, {rect.t_hi!r}] x "
          f"B_{rect.ball.radius:g}")
    return ["norms.csv"], _NO_FAILURES


_DISPATCH = {
    "solve": cmd_solve,
    "ensemble": cmd_ensemble,
    "harnack": cmd_harnack,
    "positivity": cmd_positivity,
    "moser": cmd_moser,
    "degiorgi": cmd_degiorgi,
    "jn": cmd_jn,
    "cubes": cmd_cubes,
    "norms": cmd_norms,
}


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="spdelab",
        description="Numerical experiments for a stochastic diffusion equation "
                    "with multiplicative noise.")
    ap.add_argument("--config", help="config file, or a manifest.json to replay")
    ap.add_argument("--seed", type=int, help="override the master seed")
    ap.add_argument("--threads", type=int, default=1,
                    help="worker threads (affects speed, never results)")
    ap.add_argument("--out", help="run directory (default: run-<stamp>-seed<seed>)")
    ap.add_argument("--plot", action="store_true", help="also write SVG charts")
    sub = ap.add_subparsers(dest="command", required=True, metavar="subcommand")
    helps = {
        "solve": "deterministic heat benchmark over three resolutions",
        "ensemble": "integrate an ensemble and tabulate per-path extrema",
        "harnack": "joint sup/inf tail probabilities over ratio thresholds",
        "positivity": "minima and negative-part energy over an ensemble",
        "moser": "deterministic sup/inf comparison for random positive data",
        "degiorgi": "truncation energy iteration trace on one path",
        "jn": "log-field oscillation, level sets, and moment-product tails",
        "cubes": "cube hierarchy counts against the recurrence",
        "norms": "mixed space-time norms of one solved path",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        if name == "cubes":
            p.add_argument("--depth", type=int, help="hierarchy depth override")
    return ap


def _load_config_text(path: str) -> str:
    with open(path) as fh:
        raw = fh.read()
    if raw.lstrip().startswith("{"):
        blob = json.loads(raw)
        if "config_text" not in blob:
            raise ConfigError(f"{path} looks like a manifest but has no config_text")
        return blob["config_text"]
    return raw


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = _load_config_text(args.config) if args.config else ""
        spec = parse_config(text)
        if args.seed is not None:
            spec = dataclasses.replace(spec, master_seed=args.seed)
        outdir = args.out or f"run-{time.strftime('%Y%m%d-%H%M%S')}-seed{spec.master_seed}"
        os.makedirs(outdir, exist_ok=True)
        started = time.strftime("%Y-%m-%dT%H:%M:%S")
        results, failures = _DISPATCH[args.command](spec, outdir, args)
        manifest = {
            "version": VERSION,
            "subcommand": args.command,
            "master_seed": spec.master_seed,
            "config_text": print_config(spec),
            "config_source": text,
            "started": started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "results": sorted(results),
            "failures": failures,
        }
        tmp = os.path.join(outdir, "manifest.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, os.path.join(outdir, "manifest.json"))
        print(f"results in {outdir}")
        if failures.get("invalid"):
            print(f"error: {failures['count']}/{spec.n_paths} paths diverged; "
                  "estimates from this run are unusable", file=sys.stderr)
            return 3
        return 0
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
