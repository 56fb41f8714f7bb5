"""Time stepping for the semilinear stochastic diffusion equation.

The equation integrated here is

    du = div(A(t, x, u) grad u) dt + f(t, x, u) dt + sum_i g_i(t, x, u) dW^i

on the periodic box [-X, X)^n, with A elliptic (iota <= A <= 1/iota as
quadratic forms) and |f| + |g|_{l2} <= Lambda |u|.  The default scheme is
semi-implicit Euler: diffusion implicit with A frozen at the previous
iterate, drift and noise explicit at the left endpoint,

    (I - dt L_A) u_{j+1} = u_j + dt f(t_j, x, u_j) + sum_i g_i(t_j, x, u_j) dW^i_j.

L_A is the conservative finite-difference divergence-form operator with
face-averaged coefficients, so the total mass sum(u) dx^n is conserved
exactly when f = g = 0.

Batches of paths are stepped together: all per-path arithmetic is
row-local and the sparse factorization is shared whenever A does not
depend on the state, so results are bit-identical however paths are
grouped into batches.
"""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import (
    BlowUpError,
    DimensionMismatchError,
    InvalidArgumentError,
    ModelInvalidError,
    StateError,
)
from .fields import FieldPath, FieldSnapshot, Grid, smoothstep

BLOWUP_LIMIT = 1e100


# ---------------------------------------------------------------------------
# coefficient models

@dataclass
class CoefficientModel:
    """Callable coefficients (A, f, g) plus their declared bounds.

    a, f, g take (t, xs, u) where xs is the tuple of flat coordinate
    arrays and u is a flat state array, possibly batched with a leading
    axis.  a is None for the identity matrix; f or g is None when that
    term vanishes.  g returns an array of shape (m,) + u.shape.  a_deps
    lists which of {"t", "u"} the diffusion coefficient actually reads;
    the integrator reuses its sparse factorization accordingly and may
    pass u=None when "u" is absent.
    """

    n: int
    a: Callable | None
    f: Callable | None
    g: Callable | None
    iota: float
    growth: float
    m: int
    a_form: str = "scalar"
    a_deps: frozenset = frozenset()
    label: str = ""

    def __post_init__(self):
        if self.n not in (1, 2):
            raise InvalidArgumentError(f"spatial dimension must be 1 or 2, got {self.n}")
        if not (0.0 < self.iota <= 1.0):
            raise InvalidArgumentError(f"iota must lie in (0, 1], got {self.iota}")
        if not (self.growth >= 0.0):
            raise InvalidArgumentError(f"growth bound must be >= 0, got {self.growth}")
        if self.m < 0 or (self.g is None and self.m != 0):
            raise InvalidArgumentError("channel count m inconsistent with g")
        if self.a_form not in ("scalar", "matrix"):
            raise InvalidArgumentError(f"a_form must be scalar or matrix, got {self.a_form}")


@dataclass
class SolverConfig:
    """Stepping controls; dt=None selects the parabolic default dx^2/2."""

    dt: float | None = None
    scheme: str = "semi-implicit"
    tol: float = 1e-10
    record_noise: bool = True

    def __post_init__(self):
        if self.scheme not in ("semi-implicit", "explicit"):
            raise InvalidArgumentError(f"unknown scheme {self.scheme!r}")
        if self.dt is not None and not (self.dt > 0.0):
            raise InvalidArgumentError(f"dt must be positive, got {self.dt}")
        if not (self.tol > 0.0):
            raise InvalidArgumentError(f"tol must be positive, got {self.tol}")

    def step_size(self, grid: Grid) -> float:
        return self.dt if self.dt is not None else grid.dx**2 / 2.0


# --- expression sublanguage -------------------------------------------------
# Coefficients can be given as expressions over (t, x, u) using + - * /,
# unary minus, numbers, pi, and the functions sin, cos, exp, abs, min, max.

_EXPR_FUNCS = {
    "sin": (np.sin, 1),
    "cos": (np.cos, 1),
    "exp": (np.exp, 1),
    "abs": (np.abs, 1),
    "min": (np.minimum, 2),
    "max": (np.maximum, 2),
}
_EXPR_OPS = {ast.Add: np.add, ast.Sub: np.subtract,
             ast.Mult: np.multiply, ast.Div: np.divide}


def compile_expression(text: str, n: int):
    """Compile an expression into fn(t, xs, u); returns (fn, used_names).

    Allowed names: t, u, x (alias for x1), x1, and x2 when n == 2, plus pi.
    """
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise InvalidArgumentError(f"bad expression {text!r}: {exc.msg}") from None

    names = {"t", "u", "x", "x1", "pi"} | ({"x2"} if n == 2 else set())
    used: set = set()

    def check(node):
        if isinstance(node, ast.Expression):
            check(node.body)
        elif isinstance(node, ast.BinOp) and type(node.op) in _EXPR_OPS:
            check(node.left)
            check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            check(node.operand)
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            pass
        elif isinstance(node, ast.Name):
            if node.id not in names:
                raise InvalidArgumentError(
                    f"unknown name {node.id!r} in expression {text!r}")
            used.add(node.id)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _EXPR_FUNCS:
                raise InvalidArgumentError(f"unknown function in expression {text!r}")
            arity = _EXPR_FUNCS[node.func.id][1]
            if len(node.args) != arity or node.keywords:
                raise InvalidArgumentError(
                    f"{node.func.id} takes {arity} argument(s) in expression {text!r}")
            for a in node.args:
                check(a)
        else:
            raise InvalidArgumentError(
                f"unsupported syntax {type(node).__name__} in expression {text!r}")

    check(tree)

    def evaluate(node, env):
        if isinstance(node, ast.Expression):
            return evaluate(node.body, env)
        if isinstance(node, ast.BinOp):
            return _EXPR_OPS[type(node.op)](evaluate(node.left, env),
                                            evaluate(node.right, env))
        if isinstance(node, ast.UnaryOp):
            v = evaluate(node.operand, env)
            return -v if isinstance(node.op, ast.USub) else +v
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id]
        fn = _EXPR_FUNCS[node.func.id][0]
        return fn(*(evaluate(a, env) for a in node.args))

    def fn(t, xs, u):
        env = {"t": t, "pi": math.pi, "x": xs[0], "x1": xs[0], "u": u}
        if len(xs) == 2:
            env["x2"] = xs[1]
        return evaluate(tree, env)

    return fn, frozenset(used)


# --- built-in families ------------------------------------------------------

@dataclass
class ModelParams:
    """Config-level description of a coefficient model."""

    a_kind: str = "identity"
    f_kind: str = "zero"
    g_kind: str = "trig"
    lambda_f: float = 0.0
    lambda_g: float = 0.5
    iota: float = 1.0
    m: int = 4
    a_seed: int = 0
    a_value: float = 1.0
    a_expr: str | None = None
    f_expr: str | None = None
    g_expr: str | None = None
    growth_bound: float | None = None


def _trig_profiles(m: int, n: int, extent: float, xs) -> np.ndarray:
    """m spatial profiles with sum of squares <= 1 everywhere."""
    groups = (m + 1) // 2
    amp = 1.0 / math.sqrt(groups)
    out = np.empty((m,) + np.shape(xs[0]))
    for i in range(m):
        group = i // 2
        dim = group % n
        freq = group // n + 1
        phase = freq * math.pi * xs[dim] / extent
        out[i] = amp * (np.cos(phase) if i % 2 == 0 else np.sin(phase))
    return out


def build_model(params: ModelParams, n: int, extent: float = 2.0) -> CoefficientModel:
    """Instantiate the coefficient callables described by params."""
    p = params
    if not (0.0 < p.iota <= 1.0):
        raise InvalidArgumentError(f"iota must lie in (0, 1], got {p.iota}")
    if p.lambda_f < 0.0 or p.lambda_g < 0.0:
        raise InvalidArgumentError("lambda_f and lambda_g must be nonnegative")

    # diffusion coefficient
    a_deps: frozenset = frozenset()
    if p.a_kind == "identity":
        a_fn = None
    elif p.a_kind == "constant":
        if not (p.iota <= p.a_value <= 1.0 / p.iota):
            raise InvalidArgumentError(
                f"constant coefficient {p.a_value} outside [{p.iota}, {1.0 / p.iota}]")
        c = float(p.a_value)

        def a_fn(t, xs, u, _c=c):
            return np.full_like(np.asarray(xs[0], dtype=float), _c)
    elif p.a_kind == "random_elliptic":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(p.a_seed)))
        lo, hi = p.iota, 1.0 / p.iota
        mid, amp = 0.5 * (lo + hi), 0.45 * (hi - lo)
        kx = int(rng.integers(1, 4))
        ky = int(rng.integers(1, 4))
        ph = rng.uniform(0.0, 2.0 * math.pi, size=3)
        omega = math.pi * (1.0 + 2.0 * rng.random())

        def a_fn(t, xs, u):
            s = np.sin(kx * math.pi * xs[0] / extent + ph[0])
            if len(xs) == 2:
                s = s * np.cos(ky * math.pi * xs[1] / extent + ph[1])
            return mid + amp * s * np.cos(omega * t + ph[2])

        a_deps = frozenset({"t"})
    elif p.a_kind == "expr":
        if not p.a_expr:
            raise InvalidArgumentError("a_kind 'expr' needs a_expr")
        fn, used = compile_expression(p.a_expr, n)
        a_fn = fn
        a_deps = frozenset(used & {"t", "u"})
    else:
        raise InvalidArgumentError(f"unknown a_kind {p.a_kind!r}")

    # drift
    if p.f_kind == "zero":
        f_fn = None
    elif p.f_kind == "linear":
        def f_fn(t, xs, u, _l=float(p.lambda_f)):
            return _l * u
    elif p.f_kind == "linear_sin":
        def f_fn(t, xs, u, _l=float(p.lambda_f)):
            return _l * u * np.sin(math.pi * xs[0] / extent)
    elif p.f_kind == "expr":
        if not p.f_expr:
            raise InvalidArgumentError("f_kind 'expr' needs f_expr")
        f_fn = compile_expression(p.f_expr, n)[0]
    else:
        raise InvalidArgumentError(f"unknown f_kind {p.f_kind!r}")

    # noise
    if p.g_kind == "zero" or p.m == 0 or (p.g_kind == "trig" and p.lambda_g == 0.0):
        g_fn, m_eff = None, 0
    elif p.g_kind == "trig":
        if p.m < 1:
            raise InvalidArgumentError(f"channel count m must be >= 1, got {p.m}")
        lam = float(p.lambda_g)

        def g_fn(t, xs, u, _lam=lam, _m=int(p.m)):
            sig = _trig_profiles(_m, n, extent, xs)
            if u.ndim == 1:
                return _lam * sig * u
            return _lam * sig[:, None, :] * u[None, :, :]

        m_eff = int(p.m)
    elif p.g_kind == "expr":
        if not p.g_expr:
            raise InvalidArgumentError("g_kind 'expr' needs g_expr")
        base = compile_expression(p.g_expr, n)[0]

        def g_fn(t, xs, u):
            return np.broadcast_to(np.asarray(base(t, xs, u), dtype=float),
                                   u.shape)[None]

        m_eff = 1
    else:
        raise InvalidArgumentError(f"unknown g_kind {p.g_kind!r}")

    growth = p.growth_bound if p.growth_bound is not None else p.lambda_f + p.lambda_g
    label = f"a={p.a_kind},f={p.f_kind},g={p.g_kind}"
    return CoefficientModel(n=n, a=a_fn, f=f_fn, g=g_fn, iota=float(p.iota),
                            growth=float(growth), m=m_eff, a_form="scalar",
                            a_deps=a_deps, label=label)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    samples: int
    worst_ellip_low: float
    worst_ellip_high: float
    worst_growth_excess: float


def validate_model(cm: CoefficientModel, sample_count: int = 256, seed: int = 0,
                   extent: float = 2.0, t_max: float = 2.0) -> ValidationReport:
    """Spot-check ellipticity and the linear growth bound on random samples.

    Raises ModelInvalidError with a witness triple on the first violated
    bound; otherwise returns the worst observed margins.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    batches = 8
    per = max(sample_count // batches, 4)
    lo_margin, hi_margin, growth_excess = math.inf, math.inf, -math.inf
    witness = None
    for _ in range(batches):
        t = float(rng.uniform(0.0, t_max))
        xs = tuple(rng.uniform(-extent, extent, size=per) for _ in range(cm.n))
        u = rng.choice([-1.0, 1.0], size=per) * 10.0 ** rng.uniform(-4.0, 1.0)
        u[0] = 0.0

        if cm.a is None:
            lo_ev = hi_ev = np.ones(per)
        elif cm.a_form == "scalar":
            av = np.broadcast_to(np.asarray(cm.a(t, xs, u), dtype=float), (per,))
            lo_ev = hi_ev = av
        else:
            arr = np.asarray(cm.a(t, xs, u), dtype=float)
            if arr.shape == (cm.n, cm.n):
                arr = np.broadcast_to(arr[..., None], (cm.n, cm.n, per))
            if cm.n == 1:
                lo_ev = hi_ev = arr[0, 0]
            else:
                if np.max(np.abs(arr[0, 1] - arr[1, 0])) > 1e-12:
                    raise ModelInvalidError("coefficient matrix is not symmetric",
                                            witness=(t,))
                half = 0.5 * (arr[0, 0] + arr[1, 1])
                rad = np.sqrt((0.5 * (arr[0, 0] - arr[1, 1])) ** 2 + arr[0, 1] ** 2)
                lo_ev, hi_ev = half - rad, half + rad
        lo_margin = min(lo_margin, float(np.min(lo_ev - cm.iota)))
        hi_margin = min(hi_margin, float(np.min(1.0 / cm.iota - hi_ev)))
        tol_e = 1e-9 / cm.iota
        if lo_margin < -tol_e or hi_margin < -tol_e:
            k = int(np.argmin(np.minimum(lo_ev - cm.iota, 1.0 / cm.iota - hi_ev)))
            witness = (t, tuple(float(c[k]) for c in xs), float(u[k]))
            raise ModelInvalidError(
                f"ellipticity violated at {witness}: eigenvalues in "
                f"[{float(lo_ev[k]):.6g}, {float(hi_ev[k]):.6g}]", witness=witness)

        size = np.zeros(per)
        if cm.f is not None:
            size = size + np.abs(np.broadcast_to(np.asarray(cm.f(t, xs, u), float), (per,)))
        if cm.g is not None:
            gv = np.asarray(cm.g(t, xs, u), dtype=float)
            size = size + np.sqrt(np.sum(gv * gv, axis=0))
        excess = size - cm.growth * np.abs(u)
        scaled = excess - 1e-12 * np.maximum(1.0, cm.growth * np.abs(u))
        growth_excess = max(growth_excess, float(np.max(excess)))
        if np.any(scaled > 0.0):
            k = int(np.argmax(scaled))
            witness = (t, tuple(float(c[k]) for c in xs), float(u[k]))
            raise ModelInvalidError(
                f"growth bound violated at {witness}: |f|+|g| = {float(size[k]):.6g} "
                f"> {cm.growth} * {abs(float(u[k])):.6g}", witness=witness)
    return ValidationReport(ok=True, samples=batches * per,
                            worst_ellip_low=lo_margin, worst_ellip_high=hi_margin,
                            worst_growth_excess=growth_excess)


# ---------------------------------------------------------------------------
# discrete operator

def _coef_fields(cm: CoefficientModel, grid: Grid, xs, t: float, u):
    """Normalize the diffusion coefficient to per-entry flat arrays."""
    S = grid.size
    tail = (S,) if u is None or np.ndim(u) <= 1 else (np.shape(u)[0], S)
    if cm.a is None:
        one = np.ones(S)
        return (one,) if grid.n == 1 else (one, one, None)
    raw = cm.a(t, xs, u)
    if cm.a_form == "scalar":
        a = np.broadcast_to(np.asarray(raw, dtype=float), tail)
        return (a,) if grid.n == 1 else (a, a, None)
    arr = np.asarray(raw, dtype=float)
    if arr.shape == (cm.n, cm.n):
        arr = np.broadcast_to(arr[..., None], (cm.n, cm.n, S))
    if grid.n == 1:
        return (arr[0, 0],)
    a01 = arr[0, 1]
    if not np.any(a01):
        a01 = None
    return (arr[0, 0], arr[1, 1], a01)


def apply_operator(grid: Grid, coef, v: np.ndarray) -> np.ndarray:
    """Conservative divergence-form L applied to flat states (..., S)."""
    dx2 = grid.dx**2
    if grid.n == 1:
        a = coef[0]
        af = 0.5 * (a + np.roll(a, -1, axis=-1))
        afm = np.roll(af, 1, axis=-1)
        return (af * (np.roll(v, -1, -1) - v) - afm * (v - np.roll(v, 1, -1))) / dx2

    N = grid.npts
    w = v.reshape(v.shape[:-1] + (N, N))
    out = np.zeros_like(w)
    for axis, a in ((-2, coef[0]), (-1, coef[1])):
        am = a.reshape(a.shape[:-1] + (N, N))
        af = 0.5 * (am + np.roll(am, -1, axis=axis))
        out += af * (np.roll(w, -1, axis) - w) \
            - np.roll(af, 1, axis) * (w - np.roll(w, 1, axis))
    if len(coef) == 3 and coef[2] is not None:
        c = coef[2].reshape(coef[2].shape[:-1] + (N, N))
        af0 = 0.5 * (c + np.roll(c, -1, -2))
        cross1 = (np.roll(w, -1, -1) + np.roll(np.roll(w, -1, -2), -1, -1)
                  - np.roll(w, 1, -1) - np.roll(np.roll(w, -1, -2), 1, -1)) / 4.0
        flux0 = af0 * cross1
        out += flux0 - np.roll(flux0, 1, -2)
        af1 = 0.5 * (c + np.roll(c, -1, -1))
        cross0 = (np.roll(w, -1, -2) + np.roll(np.roll(w, -1, -1), -1, -2)
                  - np.roll(w, 1, -2) - np.roll(np.roll(w, -1, -1), 1, -2)) / 4.0
        flux1 = af1 * cross0
        out += flux1 - np.roll(flux1, 1, -1)
    return (out / dx2).reshape(v.shape)


def _implicit_matrix(grid: Grid, coef, dt: float):
    """Sparse I - dt L for shared (unbatched) coefficient fields."""
    lam = dt / grid.dx**2
    if grid.n == 1:
        N = grid.size
        a = np.broadcast_to(coef[0], (N,)).astype(float)
        af = 0.5 * (a + np.roll(a, -1))
        afm = np.roll(af, 1)
        idx = np.arange(N)
        rows = np.concatenate([idx, idx, idx])
        cols = np.concatenate([idx, (idx + 1) % N, (idx - 1) % N])
        vals = np.concatenate([1.0 + lam * (af + afm), -lam * af, -lam * afm])
        return sparse.csc_matrix((vals, (rows, cols)), shape=(N, N))

    if len(coef) == 3 and coef[2] is not None:
        raise InvalidArgumentError(
            "semi-implicit stepping supports diagonal coefficient matrices in 2d; "
            "use scheme='explicit' for cross terms")
    N = grid.npts
    S = grid.size
    a00 = np.broadcast_to(coef[0], (S,)).reshape(N, N)
    a11 = np.broadcast_to(coef[1], (S,)).reshape(N, N)
    af0 = 0.5 * (a00 + np.roll(a00, -1, 0))
    af1 = 0.5 * (a11 + np.roll(a11, -1, 1))
    af0m = np.roll(af0, 1, 0)
    af1m = np.roll(af1, 1, 1)
    i0, i1 = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    flat = (i0 * N + i1).ravel()
    up0 = (((i0 + 1) % N) * N + i1).ravel()
    dn0 = (((i0 - 1) % N) * N + i1).ravel()
    up1 = (i0 * N + (i1 + 1) % N).ravel()
    dn1 = (i0 * N + (i1 - 1) % N).ravel()
    diag = 1.0 + lam * (af0 + af0m + af1 + af1m).ravel()
    rows = np.concatenate([flat] * 5)
    cols = np.concatenate([flat, up0, dn0, up1, dn1])
    vals = np.concatenate([diag, -lam * af0.ravel(), -lam * af0m.ravel(),
                           -lam * af1.ravel(), -lam * af1m.ravel()])
    return sparse.csc_matrix((vals, (rows, cols)), shape=(S, S))


# ---------------------------------------------------------------------------
# seeding and integration

def path_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Counter-derived seed for one path; independent of execution order."""
    return np.random.SeedSequence(master_seed, spawn_key=(index,))


def draw_increments(seed, steps: int, m: int, dt: float) -> np.ndarray:
    """Brownian increments, shape (steps, m), N(0, dt) entries."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.normal(0.0, math.sqrt(dt), size=(steps, m))


def time_axis(t0: float, horizon: float, dt: float) -> np.ndarray:
    """Step boundaries from t0 to the first boundary at or beyond t0 + horizon."""
    ratio = horizon / dt
    steps = int(round(ratio)) if abs(ratio - round(ratio)) < 1e-9 else int(math.ceil(ratio))
    return t0 + dt * np.arange(max(steps, 1) + 1)


@dataclass
class IntegrationResult:
    final: np.ndarray
    history: np.ndarray | None
    failed: np.ndarray
    fail_step: np.ndarray


def integrate_batch(grid: Grid, cm: CoefficientModel, cfg: SolverConfig,
                    u0b: np.ndarray, times: np.ndarray, dWb,
                    keep_history: bool = False, observers: Sequence = ()) -> IntegrationResult:
    """Advance a batch of paths through all steps of `times`.

    u0b has shape (B, S); dWb has shape (B, M, m) or is None when m = 0.
    A path that turns non-finite (or exceeds the blow-up limit) is frozen
    at NaN and reported in failed/fail_step; other rows are unaffected.
    """
    if cm.n != grid.n:
        raise DimensionMismatchError(f"model dimension {cm.n} != grid dimension {grid.n}")
    B, S = u0b.shape
    M = times.size - 1
    dt = float(times[1] - times[0])
    xs = grid.coords_flat()
    implicit = cfg.scheme == "semi-implicit"
    if not implicit:
        # explicit diffusion needs the parabolic stability restriction
        if dt > grid.dx**2 * cm.iota / (2.0 * grid.n) * (1.0 + 1e-9):
            raise InvalidArgumentError(
                f"explicit scheme unstable: dt={dt} exceeds dx^2*iota/(2n)="
                f"{grid.dx**2 * cm.iota / (2.0 * grid.n):.3e}")

    u = np.array(u0b, dtype=float)
    failed = np.zeros(B, dtype=bool)
    fail_step = np.full(B, -1, dtype=int)
    hist = np.empty((B, M + 1, S)) if keep_history else None
    if keep_history:
        hist[:, 0, :] = u
    for obs in observers:
        obs.observe(0, float(times[0]), u, failed)

    state_free = "u" not in cm.a_deps
    time_free = "t" not in cm.a_deps
    lu = None
    for j in range(M):
        t = float(times[j])
        rhs = u.copy()
        if cm.f is not None:
            rhs += dt * np.broadcast_to(np.asarray(cm.f(t, xs, u), dtype=float), (B, S))
        if cm.m > 0 and dWb is not None:
            gj = np.asarray(cm.g(t, xs, u), dtype=float)
            rhs += np.einsum("mbs,bm->bs", gj, dWb[:, j, :])

        if implicit:
            if state_free:
                if lu is None or not time_free:
                    lu = splu(_implicit_matrix(grid, _coef_fields(cm, grid, xs, t, None), dt))
                unew = lu.solve(rhs.T).T
            else:
                unew = np.empty_like(rhs)
                for b in range(B):
                    if failed[b]:
                        unew[b] = np.nan
                        continue
                    coef = _coef_fields(cm, grid, xs, t, u[b])
                    unew[b] = splu(_implicit_matrix(grid, coef, dt)).solve(rhs[b])
        else:
            coef = _coef_fields(cm, grid, xs, t, u if not state_free else None)
            unew = rhs + dt * apply_operator(grid, coef, u)

        with np.errstate(invalid="ignore"):
            bad = ~np.all(np.isfinite(unew), axis=1)
            bad |= np.any(np.abs(unew) > BLOWUP_LIMIT, axis=1)
        fresh = bad & ~failed
        if np.any(fresh):
            fail_step[fresh] = j
            failed |= fresh
        unew[failed] = np.nan
        u = unew
        if keep_history:
            hist[:, j + 1, :] = u
        for obs in observers:
            obs.observe(j + 1, float(times[j + 1]), u, failed)
    return IntegrationResult(final=u, history=hist, failed=failed, fail_step=fail_step)


def step(state: FieldSnapshot, cm: CoefficientModel, cfg: SolverConfig,
         dW) -> FieldSnapshot:
    """One scheme step from a snapshot, consuming one increment per channel."""
    dW = np.asarray(dW, dtype=float).reshape(-1)
    if dW.size != cm.m:
        raise DimensionMismatchError(f"expected {cm.m} noise increments, got {dW.size}")
    grid = state.grid
    dt = cfg.step_size(grid)
    times = np.array([state.t, state.t + dt])
    res = integrate_batch(grid, cm, cfg, state.flat()[None, :], times,
                          dW[None, None, :] if cm.m else None)
    if res.failed[0]:
        raise BlowUpError("step produced a non-finite state", step_index=0)
    return FieldSnapshot(grid, float(times[1]), res.final[0].reshape(grid.shape))


def solve_path(u0: FieldSnapshot, cm: CoefficientModel, cfg: SolverConfig,
               horizon: float, seed, increments=None) -> FieldPath:
    """Integrate one path from u0 over [u0.t, u0.t + horizon].

    seed may be an integer or a SeedSequence; explicit `increments`
    (steps x m) override the seeded draw and are recorded as given.
    """
    if not (horizon > 0.0):
        raise InvalidArgumentError(f"horizon must be positive, got {horizon}")
    grid = u0.grid
    dt = cfg.step_size(grid)
    times = time_axis(u0.t, horizon, dt)
    M = times.size - 1
    if increments is not None:
        dW = np.asarray(increments, dtype=float)
        if dW.shape != (M, cm.m):
            raise DimensionMismatchError(
                f"increments shape {dW.shape} != {(M, cm.m)}")
    else:
        dW = draw_increments(seed, M, cm.m, dt)
    res = integrate_batch(grid, cm, cfg, u0.flat()[None, :], times,
                          dW[None] if cm.m else None, keep_history=True)
    if res.failed[0]:
        raise BlowUpError(f"path blew up at step {int(res.fail_step[0])}",
                          step_index=int(res.fail_step[0]))
    noise = dW if cfg.record_noise else None
    key = seed.entropy if isinstance(seed, np.random.SeedSequence) else seed
    return FieldPath(grid, times, res.history[0], noise=noise, seed_key=key,
                     scheme=cfg.scheme)


# ---------------------------------------------------------------------------
# test functions and weak-form diagnostics

@dataclass(frozen=True)
class TestFunction:
    """Nonnegative grid-sampled test function vanishing near the wrap seam."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size != self.grid.size:
            raise DimensionMismatchError("test function size != grid size")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("test function has non-finite values")
        if np.any(v < 0.0):
            raise InvalidArgumentError("test function must be nonnegative")
        xs = self.grid.coords_flat()
        margin = np.zeros(self.grid.size, dtype=bool)
        for c in xs:
            margin |= np.abs(c) >= self.grid.extent - 2.0 * self.grid.dx
        if np.any(v[margin] != 0.0):
            raise InvalidArgumentError(
                "test function must vanish within two nodes of the wrap seam")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def bump(cls, grid: Grid, center=0.0, radius: float = 1.0,
             height: float = 1.0) -> "TestFunction":
        xs = grid.coords_flat()
        ctr = np.zeros(grid.n) if np.isscalar(center) and center == 0.0 else \
            np.asarray(center, dtype=float).reshape(-1)
        rho = np.abs(xs[0] - ctr[0])
        for d in range(1, grid.n):
            rho = np.maximum(rho, np.abs(xs[d] - ctr[d]))
        return cls(grid, height * smoothstep(radius / 2.0, radius, rho))

    def pair(self, fields: np.ndarray):
        """Discrete L2 pairing dx^n sum(phi * field) over the last axis."""
        return self.grid.cell_volume() * np.sum(fields * self.values, axis=-1)


def weak_residual(path: FieldPath, cm: CoefficientModel, phi: TestFunction,
                  s: float, t: float) -> float:
    """Absolute defect of the weak formulation between times s and t.

    All time integrals use left-endpoint quadrature, so for the
    semi-implicit scheme the defect is the diffusion telescoping error,
    of size O(dt) on smooth data.
    """
    js, jt = path.time_index(s), path.time_index(t)
    if js >= jt:
        raise InvalidArgumentError(f"need s < t with at least one step, got {s}, {t}")
    if cm.m > 0 and path.noise is None:
        raise StateError("path has no recorded noise increments")
    grid = path.grid
    xs = grid.coords_flat()
    dt = path.dt
    window = np.arange(js, jt)
    states = path.values[window]

    lhs = float(phi.pair(path.values[jt] - path.values[js]))
    time_free = "t" not in cm.a_deps
    if time_free and "u" not in cm.a_deps:
        coef = _coef_fields(cm, grid, xs, float(path.times[js]), None)
        lw = apply_operator(grid, coef, states)
        diffusion = -dt * float(np.sum(phi.pair(lw)))
    else:
        acc = 0.0
        for k, j in enumerate(window):
            coef = _coef_fields(cm, grid, xs, float(path.times[j]), states[k])
            acc += float(phi.pair(apply_operator(grid, coef, states[k])))
        diffusion = -dt * acc
    fterm = 0.0
    if cm.f is not None:
        fv = np.stack([np.broadcast_to(
            np.asarray(cm.f(float(path.times[j]), xs, states[k]), dtype=float),
            (grid.size,)) for k, j in enumerate(window)])
        fterm = dt * float(np.sum(phi.pair(fv)))
    gterm = 0.0
    if cm.m > 0:
        for k, j in enumerate(window):
            gv = np.asarray(cm.g(float(path.times[j]), xs, states[k]), dtype=float)
            gterm += float(np.sum(phi.pair(gv) * path.noise[j]))
    return abs(lhs + diffusion - fterm - gterm)


@dataclass(frozen=True)
class QvReport:
    empirical_qv: float
    pairing_qv: float
    squared_qv: float

    @property
    def ratio(self) -> float:
        if self.pairing_qv == 0.0:
            return math.nan if self.empirical_qv else 1.0
        return self.empirical_qv / self.pairing_qv


def qv_check(path: FieldPath, cm: CoefficientModel, phi: TestFunction) -> QvReport:
    """Quadratic variation of the pairing <u, phi> along the whole path.

    empirical_qv sums squared martingale increments, i.e. pairing
    increments minus the scheme's exact drift; pairing_qv accumulates
    sum_i <g_i, phi>^2 dt and squared_qv accumulates sum_i <g_i^2, phi^2> dt.
    """
    if cm.m > 0 and path.noise is None:
        raise StateError("path has no recorded noise increments")
    grid = path.grid
    xs = grid.coords_flat()
    dt = path.dt
    phi2 = TestFunction(grid, phi.values**2)
    empirical = pairing = squared = 0.0
    implicit = path.scheme == "semi-implicit"
    for j in range(path.steps):
        t = float(path.times[j])
        uj, ujp = path.values[j], path.values[j + 1]
        coef = _coef_fields(cm, grid, xs, t, uj)
        drift = dt * float(phi.pair(apply_operator(grid, coef, ujp if implicit else uj)))
        if cm.f is not None:
            drift += dt * float(phi.pair(np.broadcast_to(
                np.asarray(cm.f(t, xs, uj), dtype=float), (grid.size,))))
        incr = float(phi.pair(ujp - uj)) - drift
        empirical += incr * incr
        if cm.m > 0:
            gv = np.asarray(cm.g(t, xs, uj), dtype=float)
            pairing += dt * float(np.sum(phi.pair(gv) ** 2))
            squared += dt * float(np.sum(phi2.pair(gv * gv)))
    return QvReport(empirical_qv=empirical, pairing_qv=pairing, squared_qv=squared)


# ---------------------------------------------------------------------------
# reference solutions and initial data

def periodic_heat_kernel(x, t: float, extent: float = 2.0, images: int = 8) -> np.ndarray:
    """Heat kernel of u_t = u_xx on the circle [-extent, extent), unit mass."""
    if not (t > 0.0):
        raise InvalidArgumentError(f"kernel time must be positive, got {t}")
    x = np.asarray(x, dtype=float)
    L = 2.0 * extent
    out = np.zeros_like(x)
    for k in range(-images, images + 1):
        y = x - L * k
        out += np.exp(-y * y / (4.0 * t)) / math.sqrt(4.0 * math.pi * t)
    return out


def make_initial_condition(kind: str, grid: Grid, amplitude: float = 1.0,
                           width: float = 1.0, seed: int = 0) -> FieldSnapshot:
    """Named nonnegative initial data sampled on the grid at t = 0."""
    if not (amplitude > 0.0):
        raise InvalidArgumentError(f"amplitude must be positive, got {amplitude}")
    xs = grid.coords_flat()
    rho = np.abs(xs[0])
    for d in range(1, grid.n):
        rho = np.maximum(rho, np.abs(xs[d]))
    if kind == "bump":
        vals = amplitude * np.clip(1.0 - (rho / width) ** 2, 0.0, None) ** 2
    elif kind == "constant":
        vals = np.full(grid.size, amplitude)
    elif kind == "gaussian":
        vals = np.ones(grid.size) * amplitude
        for d in range(grid.n):
            col = periodic_heat_kernel(xs[d], width**2, extent=grid.extent)
            vals = vals * col / col.max()
    elif kind == "random_positive":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        logv = np.zeros(grid.size)
        for d in range(grid.n):
            for k in range(1, 4):
                c = rng.normal(0.0, 0.5 / k)
                ph = rng.uniform(0.0, 2.0 * math.pi)
                logv += c * np.cos(k * math.pi * xs[d] / grid.extent + ph)
        vals = amplitude * np.exp(logv)
    else:
        raise InvalidArgumentError(f"unknown initial condition kind {kind!r}")
    return FieldSnapshot(grid, 0.0, vals.reshape(grid.shape))
