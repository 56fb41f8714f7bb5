"""Parabolic cube hierarchy: geometry, counts, and containment."""
import numpy as np
import pytest

from spdelab.cubes import (Cube, CubeHierarchy, build_core, build_extended,
                           containment_ok, core_count, count_bound,
                           extended_count, level_summary, subcubes, unit_cube)
from spdelab.errors import InvalidArgumentError, ResourceLimitError


def test_cube_basic_geometry():
    c = unit_cube(1)
    assert (c.l, c.s, c.z) == (1.0, 0.25, 0.5)
    assert c.time_lo == 0.0 and c.time_hi == 2.0
    assert c.ball().radius == 0.5
    r = c.rect()
    assert (r.t_lo, r.t_hi) == (0.0, 2.0)


def test_cube_rejects_nonparabolic_scales():
    with pytest.raises(InvalidArgumentError):
        Cube(l=0.0, s=0.25, z=0.4, w=(0.0,))     # z^2 != s
    with pytest.raises(InvalidArgumentError):
        Cube(l=0.0, s=-1.0, z=1.0, w=(0.0,))
    with pytest.raises(InvalidArgumentError):
        Cube(l=0.0, s=0.25, z=0.5, w=(0.0,), lineage="sideways")


def test_subcubes_frozen_geometry():
    # [TRIVIAL] halves (4s), eighths (s), quarters (2s) of (l-4s, l+4s)
    c = unit_cube(1)
    s = subcubes(c)
    assert (s.c_plus.t_lo, s.c_plus.t_hi) == (1.0, 2.0)
    assert (s.c_minus.t_lo, s.c_minus.t_hi) == (0.0, 1.0)
    assert (s.d_plus.t_lo, s.d_plus.t_hi) == (1.75, 2.0)
    assert (s.d_minus.t_lo, s.d_minus.t_hi) == (0.0, 0.25)
    assert (s.i_plus.t_lo, s.i_plus.t_hi) == (1.5, 2.0)
    assert (s.i_minus.t_lo, s.i_minus.t_hi) == (0.0, 0.5)
    for rect in (s.c_plus, s.d_plus, s.i_minus):
        assert rect.ball == c.ball()


def test_count_recurrence_closed_form():
    # core level j has (2 zeta^(n+2))^j cubes; for n=1, zeta=4 that is 128^j
    for j in range(4):
        assert core_count(1, j) == 128**j
        assert core_count(2, j) == 512**j
    # extended counts follow x_j = 128 x_{j-1} + 128^j (n=1)
    x = 1
    for j in range(1, 4):
        x = 128 * x + 128**j
        assert extended_count(1, j) == x
    # frozen values
    assert [extended_count(1, j) for j in range(4)] == [1, 256, 49152, 8388608]
    assert all(extended_count(1, j) <= count_bound(1, j) for j in range(4))
    assert all(extended_count(2, j) <= count_bound(2, j) for j in range(3))


def test_build_core_matches_counts():
    h = build_core(unit_cube(1), depth=2)
    assert [lv.count for lv in h.levels] == [core_count(1, j) for j in range(3)]
    assert containment_ok(h)


def test_build_extended_matches_counts():
    h = build_extended(unit_cube(1), depth=2)
    assert [lv.count for lv in h.levels] == [extended_count(1, j) for j in range(3)]
    assert containment_ok(h)


def test_build_core_2d():
    h = build_core(unit_cube(2), depth=1)
    assert [lv.count for lv in h.levels] == [1, core_count(2, 1)]
    assert containment_ok(h)


def test_child_scales_quarter_parent():
    # each level divides s by zeta^2 = 16 and z by zeta = 4
    h = build_core(unit_cube(1), depth=2)
    for j in range(1, 3):
        assert h.levels[j].s == pytest.approx(h.levels[j - 1].s / 16.0)
        assert h.levels[j].z == pytest.approx(h.levels[j - 1].z / 4.0)


def test_children_tile_parent_eighths():
    """Level-1 core cubes cover the top and bottom eighths of the root.

    The construction promises: each congruent child piece is the
    same-named (d+ or d-) eighth of exactly one child cube, and those
    pieces tile the parent's two eighths.
    """
    root = unit_cube(1)
    h = build_core(root, depth=1)
    parts = subcubes(root)
    lv = h.levels[1]
    plus_boxes = []
    minus_boxes = []
    for k in range(lv.count):
        c = lv.cube(k)
        d = subcubes(c)
        box = (d.d_plus if c.lineage == "plus" else d.d_minus)
        (plus_boxes if c.lineage == "plus" else minus_boxes).append(box)
    # pieces land inside the right parent eighth
    for box in plus_boxes:
        assert box.t_lo >= parts.d_plus.t_lo - 1e-12
        assert box.t_hi <= parts.d_plus.t_hi + 1e-12
    for box in minus_boxes:
        assert box.t_lo >= parts.d_minus.t_lo - 1e-12
        assert box.t_hi <= parts.d_minus.t_hi + 1e-12
    # and their total volume equals the eighth's volume (tiling, no overlap
    # double count at this tolerance)
    def vol(rect):
        return (rect.t_hi - rect.t_lo) * (2.0 * rect.ball.radius)

    assert sum(vol(b) for b in plus_boxes) == pytest.approx(vol(parts.d_plus))
    assert sum(vol(b) for b in minus_boxes) == pytest.approx(vol(parts.d_minus))


def test_level_ordering_deterministic():
    h1 = build_core(unit_cube(1), depth=1)
    h2 = build_core(unit_cube(1), depth=1)
    assert np.array_equal(h1.levels[1].l, h2.levels[1].l)
    assert np.array_equal(h1.levels[1].w, h2.levels[1].w)
    # plus children enumerate before minus children
    lin = h1.levels[1].lineage
    split = np.argmax(lin != lin[0])
    assert np.all(lin[:split] == lin[0]) and np.all(lin[split:] != lin[0])


def test_budget_guard():
    with pytest.raises(ResourceLimitError):
        build_core(unit_cube(1), depth=4, budget=10**6)
    with pytest.raises(ResourceLimitError):
        build_extended(unit_cube(1), depth=3, budget=10**5)


def test_level_summary_shape():
    h = build_core(unit_cube(1), depth=1)
    rows = level_summary(h)
    assert len(rows) == 2
    assert rows[0]["count"] == 1 and rows[1]["count"] == 128
    assert rows[1]["t_min"] >= rows[0]["t_min"] - 1e-12
    assert rows[1]["t_max"] <= rows[0]["t_max"] + 1e-12


def test_cube_index_bounds():
    h = build_core(unit_cube(1), depth=1)
    with pytest.raises(InvalidArgumentError):
        h.levels[1].cube(128)
    with pytest.raises(InvalidArgumentError):
        h.levels[1].cube(-1)
