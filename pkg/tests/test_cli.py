"""Config language, subcommand dispatch, and manifest reproducibility."""
import csv
import json
import os

import numpy as np
import pytest

from spdelab.cli import (DEFAULT_REGIONS, main, parse_config, print_config,
                         svg_line_chart)
from spdelab.cubes import core_count, count_bound, extended_count
from spdelab.errors import ConfigError

CUSTOM = """\
[grid]
n = 1
npts = 32

[model]
a = random_elliptic
f = linear
g = trig
lambda_f = 0.1
lambda_g = 0.3
iota = 0.5
m = 2
a_seed = 9

[solver]
dt = auto
scheme = semi-implicit
f0 = bump
horizon = 1.0

[regions]
Q = {"t0": 0.25, "x0": [0.0], "r": 0.4}
P = {"t_lo": 0.5, "t_hi": 1.0, "center": [0.0], "radius": 0.5}

[montecarlo]
paths = 6
seed = 123
chunk = 4
gammas = 1, 4, 16
"""


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def run_cli(*argv):
    return main(list(argv))


def test_defaults_fill_in():
    spec = parse_config("")
    assert spec.grid.n == 1 and spec.grid.npts == 128
    assert spec.model.g_kind == "trig" and spec.model.lambda_g == 0.5
    assert spec.n_paths == 200 and spec.master_seed == 2024
    assert spec.regions == DEFAULT_REGIONS


def test_round_trip_is_identity():
    for text in ("", CUSTOM):
        spec = parse_config(text)
        canon = print_config(spec)
        assert parse_config(canon) == spec
        # printing is idempotent on its own output
        assert print_config(parse_config(canon)) == canon


def test_cylinder_region_form():
    spec = parse_config(CUSTOM)
    q = spec.regions["Q"]
    assert q.t_hi == pytest.approx(0.25)
    assert q.t_lo == pytest.approx(0.25 - 0.4 ** 2)
    assert q.ball.radius == pytest.approx(0.4)


def test_unknown_section_hint():
    with pytest.raises(ConfigError, match=r"line 1: .*did you mean \[grid\]"):
        parse_config("[grd]\nn = 1\n")


def test_unknown_key_hint():
    with pytest.raises(ConfigError, match=r"line 2: .*did you mean 'f0'"):
        parse_config("[solver]\nfo = bump\n")


def test_malformed_lines():
    with pytest.raises(ConfigError, match="line 1: unterminated"):
        parse_config("[grid\n")
    with pytest.raises(ConfigError, match="key outside any"):
        parse_config("npts = 32\n")
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config("[grid]\nnpts 32\n")
    with pytest.raises(ConfigError, match=r"line 3: duplicate key 'npts'"):
        parse_config("[grid]\nnpts = 32\nnpts = 64\n")


def test_bad_values_carry_line_numbers():
    with pytest.raises(ConfigError, match=r"line 2: bad value for \[grid\] npts"):
        parse_config("[grid]\nnpts = many\n")
    with pytest.raises(ConfigError, match="region needs keys"):
        parse_config('[regions]\nQ = {"lo": 1}\n')
    with pytest.raises(ConfigError, match="bad region"):
        parse_config("[regions]\nQ = [1, 2]\n")


def test_window_order_is_checked():
    text = ('[regions]\n'
            'Q = {"t_lo": 0.5, "t_hi": 1.0, "center": [0.0], "radius": 0.5}\n'
            'P = {"t_lo": 0.25, "t_hi": 0.5, "center": [0.0], "radius": 0.5}\n')
    with pytest.raises(ConfigError, match="violated rule"):
        parse_config(text)


def test_model_is_built_eagerly():
    text = "[model]\nf = expr\nf_expr = u**2\n"
    with pytest.raises(ConfigError, match="model rejected"):
        parse_config(text)


def test_solve_writes_results(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli("--out", str(out), "solve") == 0
    assert (out / "resolution_study.csv").exists()
    assert (out / "manifest.json").exists()
    assert "error ratios" in capsys.readouterr().out
    rows = read_csv(out / "resolution_study.csv")
    assert rows[0] == ["npts", "dx", "dt", "l2_error", "error_ratio"]
    assert [r[0] for r in rows[1:]] == ["64", "128", "256"]


def test_config_error_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[grd]\nn = 1\n")
    assert run_cli("--config", str(cfg), "--out", str(tmp_path / "o"), "solve") == 2
    assert "error:" in capsys.readouterr().err
    missing = tmp_path / "missing.cfg"
    assert run_cli("--config", str(missing), "--out", str(tmp_path / "o2"),
                   "solve") == 2


def test_broken_manifest_exits_2(tmp_path, capsys):
    blob = tmp_path / "manifest.json"
    blob.write_text(json.dumps({"version": 1}))
    assert run_cli("--config", str(blob), "--out", str(tmp_path / "o"),
                   "solve") == 2
    assert "config_text" in capsys.readouterr().err


def test_diverging_ensemble_exits_3(tmp_path, capsys):
    cfg = tmp_path / "blowup.cfg"
    cfg.write_text(
        "[grid]\nnpts = 32\n\n"
        "[model]\nf = expr\nf_expr = u*u*u\ng = zero\nm = 0\ngrowth_bound = 1000\n\n"
        "[solver]\namplitude = 50.0\nhorizon = 0.5\n\n"
        '[regions]\nbox = {"t_lo": 0.0, "t_hi": 0.5, "center": [0.0], "radius": 1.0}\n\n'
        "[montecarlo]\npaths = 4\nchunk = 2\n")
    out = tmp_path / "boom"
    assert run_cli("--config", str(cfg), "--out", str(out), "ensemble") == 3
    assert "unusable" in capsys.readouterr().err
    # the manifest is still written so the failed run can be replayed
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["failures"]["invalid"] is True
    assert manifest["failures"]["count"] == 4
    assert len(manifest["failures"]["steps"]) == 4


def test_ensemble_table_shape(tmp_path):
    cfg = tmp_path / "ens.cfg"
    cfg.write_text(CUSTOM)
    out = tmp_path / "ens"
    assert run_cli("--config", str(cfg), "--out", str(out), "ensemble") == 0
    rows = read_csv(out / "paths.csv")
    assert rows[0][:3] == ["path", "failed", "fail_step"]
    assert len(rows) == 1 + 6
    assert all(r[1] == "false" for r in rows[1:])


def test_seed_override_lands_in_manifest(tmp_path):
    cfg = tmp_path / "ens.cfg"
    cfg.write_text(CUSTOM)
    out = tmp_path / "seeded"
    assert run_cli("--config", str(cfg), "--seed", "99", "--out", str(out),
                   "ensemble") == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["master_seed"] == 99
    assert "seed = 99" in manifest["config_text"]
    assert manifest["config_source"] == CUSTOM
    assert manifest["results"] == ["paths.csv"]


def test_manifest_replay_is_byte_identical(tmp_path):
    cfg = tmp_path / "h.cfg"
    cfg.write_text(CUSTOM)
    first = tmp_path / "a"
    assert run_cli("--config", str(cfg), "--out", str(first), "harnack") == 0
    replay = tmp_path / "b"
    assert run_cli("--config", str(first / "manifest.json"),
                   "--out", str(replay), "harnack") == 0
    threaded = tmp_path / "c"
    assert run_cli("--config", str(cfg), "--threads", "4",
                   "--out", str(threaded), "harnack") == 0
    for name in ("harnack_curve.csv", "harnack_summary.csv"):
        want = (first / name).read_bytes()
        assert (replay / name).read_bytes() == want
        assert (threaded / name).read_bytes() == want
    # replay re-canonicalizes to the same config text
    m0 = json.loads((first / "manifest.json").read_text())
    m1 = json.loads((replay / "manifest.json").read_text())
    assert m0["config_text"] == m1["config_text"]
    assert m0["results"] == m1["results"]


def test_cube_counts_match_recurrence(tmp_path):
    out = tmp_path / "cubes"
    assert run_cli("--out", str(out), "cubes", "--depth", "2") == 0
    rows = read_csv(out / "cube_counts.csv")
    got = [(int(r[0]), int(r[3]), int(r[5]), int(r[7])) for r in rows[1:]]
    want = [(j, core_count(1, j), extended_count(1, j), count_bound(1, j))
            for j in range(3)]
    assert got == want
    assert [r[1] for r in got] == [1, 128, 16384]
    assert [r[2] for r in got] == [1, 256, 49152]


def test_degiorgi_needs_room(tmp_path, capsys):
    cfg = tmp_path / "short.cfg"
    cfg.write_text(
        "[solver]\nhorizon = 0.5\n\n"
        '[regions]\nQ = {"t_lo": 0.1, "t_hi": 0.2, "center": [0.0], "radius": 0.5}\n'
        'P = {"t_lo": 0.25, "t_hi": 0.5, "center": [0.0], "radius": 0.5}\n')
    assert run_cli("--config", str(cfg), "--out", str(tmp_path / "o"),
                   "degiorgi") == 2
    assert "horizon" in capsys.readouterr().err


def test_norms_subcommand(tmp_path):
    cfg = tmp_path / "n.cfg"
    cfg.write_text(CUSTOM)
    out = tmp_path / "norms"
    assert run_cli("--config", str(cfg), "--out", str(out), "norms") == 0
    rows = read_csv(out / "norms.csv")
    assert rows[0] == ["p", "q", "value"]
    assert len(rows) == 8
    vals = [float(r[2]) for r in rows[1:]]
    assert all(np.isfinite(v) and v > 0.0 for v in vals)


def test_jn_subcommand_fits_median_fractions(tmp_path):
    cfg = tmp_path / "jn.cfg"
    cfg.write_text("[grid]\nnpts = 32\n\n[montecarlo]\npaths = 16\nchunk = 8\n")
    out = tmp_path / "jn"
    assert run_cli("--config", str(cfg), "--out", str(out), "jn") == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["results"] == ["jn_cubes.csv", "jn_levelsets.csv",
                                   "jn_summary.csv", "jn_tails.csv"]
    rows = read_csv(out / "jn_summary.csv")
    assert rows[0] == ["side", "decay_rate", "amplitude", "r_squared",
                       "clamp_fraction"]
    assert [r[0] for r in rows[1:]] == ["upper", "lower"]
    assert all(np.isfinite(float(r[1])) and float(r[1]) > 0.0 for r in rows[1:])
    # the tabulated fractions are ensemble medians: in [0, 1] and
    # nonincreasing in alpha on both sides
    lrows = read_csv(out / "jn_levelsets.csv")
    for col in (1, 2):
        fr = np.array([float(r[col]) for r in lrows[1:]])
        assert np.all((fr >= 0.0) & (fr <= 1.0))
        assert np.all(np.diff(fr) <= 1e-12)


def test_plot_flag_writes_svg(tmp_path):
    out = tmp_path / "plotted"
    assert run_cli("--out", str(out), "--plot", "solve") == 0
    svg = (out / "resolution_study.svg").read_text()
    assert svg.startswith("<svg ")
    assert svg.rstrip().endswith("</svg>")
    manifest = json.loads((out / "manifest.json").read_text())
    assert "resolution_study.svg" in manifest["results"]


def test_svg_line_chart_structure(tmp_path):
    path = tmp_path / "chart.svg"
    svg_line_chart(str(path), [1.0, 2.0, 4.0],
                   [[0.1, 0.2, 0.3], [1.0, 0.5, 0.25]],
                   ["up", "down"], "demo", "x", "y", logx=True)
    text = path.read_text()
    assert text.count("<polyline") == 2
    assert "demo" in text and ">up<" in text and ">down<" in text
