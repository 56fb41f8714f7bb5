"""Shared fixtures and the acceptance-summary reporter."""
import numpy as np
import pytest

from spdelab.fields import Grid
from spdelab.montecarlo import ExperimentSpec, run_ensemble
from spdelab.solver import (ModelParams, SolverConfig, build_model,
                            make_initial_condition, path_seed, solve_path)

# one line per acceptance criterion, printed after the test summary so the
# measured values are visible even when every test passes
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def grid32():
    return Grid.regular(1, 32)


@pytest.fixture(scope="session")
def grid64():
    return Grid.regular(1, 64)


@pytest.fixture(scope="session")
def default_model(grid64):
    """Identity diffusion, no drift, 4-channel multiplicative trig noise."""
    return build_model(ModelParams(), grid64.n, grid64.extent)


@pytest.fixture(scope="session")
def stoch_path(grid64, default_model):
    """One solved noisy path on [0, 0.5], reused by read-only tests."""
    u0 = make_initial_condition("bump", grid64)
    return solve_path(u0, default_model, SolverConfig(), 0.5,
                      seed=path_seed(314, 0))


@pytest.fixture(scope="session")
def long_path(grid64, default_model):
    """A horizon-1 path, long enough for the cube constructions."""
    u0 = make_initial_condition("bump", grid64)
    return solve_path(u0, default_model, SolverConfig(), 1.0,
                      seed=path_seed(314, 1))


@pytest.fixture(scope="session")
def small_ensemble():
    """16 paths on a coarse grid; enough for estimator plumbing tests."""
    spec = ExperimentSpec(grid=Grid.regular(1, 32), horizon=0.25,
                          n_paths=16, master_seed=77, chunk=8)
    return spec, run_ensemble(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1905)
