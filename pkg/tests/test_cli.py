import json

import numpy as np
import pytest

from exitdpp import cli
from exitdpp.dp import ValueGrid
from exitdpp.problem import Domain

BM = """
name = "bm-small"
[horizon]
T = {T}
[domain]
kind = "box"
lower = [-1.0]
upper = [1.0]
[coefficients]
b = ["0"]
sigma = ["1"]
f = "{f}"
[run]
seed = 11
"""

GRID = """
[grid]
spacing = 0.05
"""

VERIFY = """
[verify]
n_paths = 400
n_steps = 200
n_random = 1
"""


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(tmp_path, command, text, *extra):
    cfg = write(tmp_path, text)
    out = tmp_path / "out"
    return cli.main([command, "--config", str(cfg), "--out", str(out), *extra]), out


def test_check_valid(tmp_path, capsys):
    code, out = run(tmp_path, "check", BM.format(T=1.0, f="1") + "[check]\nlipschitz_samples = 200\n")
    assert code == 0
    rep = json.loads((out / "check.json").read_text())
    assert rep["ok"] and rep["violations"] == []
    assert (out / "meta.json").exists()


def test_check_negative_f(tmp_path, capsys):
    code, _ = run(tmp_path, "check", BM.format(T=1.0, f="-1"))
    assert code == 1
    assert "f negative" in capsys.readouterr().out


def test_check_missing_horizon(tmp_path, capsys):
    text = BM.format(T=1.0, f="1").replace("[horizon]\nT = 1.0\n", "")
    code, _ = run(tmp_path, "check", text)
    assert code == 2
    assert "missing section [horizon]" in capsys.readouterr().err


@pytest.mark.parametrize("extra", ["sed = 3\n", "[grid]\nspacng = 0.1\n", "[nonsense]\na = 1\n"])
def test_unknown_key_is_error(tmp_path, capsys, extra):
    code, _ = run(tmp_path, "check", BM.format(T=1.0, f="1") + extra)
    assert code == 2
    assert "unknown" in capsys.readouterr().err


def test_missing_seed(tmp_path, capsys):
    code, _ = run(tmp_path, "check", BM.format(T=1.0, f="1").replace("[run]\nseed = 11\n", ""))
    assert code == 2
    assert "seed" in capsys.readouterr().err


def test_seed_flag_overrides(tmp_path):
    text = BM.format(T=1.0, f="1").replace("[run]\nseed = 11\n", "")
    code, _ = run(tmp_path, "check", text + "[check]\nlipschitz_samples = 50\n", "--seed", "4")
    assert code == 0


def test_solve_zero_reward(tmp_path):
    code, out = run(tmp_path, "solve", BM.format(T=1.0, f="0") + GRID)
    assert code == 0
    grid = ValueGrid.from_binary(out / "grid.bin", Domain.box([-1.0], [1.0]))
    assert np.all(grid.values == 0.0)
    meta = json.loads((out / "grid_meta.json").read_text())
    assert meta["v_at_origin"] == 0.0
    for k in ("spec_hash", "cfl_margin", "runtime_s"):
        assert k in meta
    assert (out / "grid.csv").read_text().count("\n") > 1


def test_solve_cfl_violation(tmp_path, capsys):
    code, _ = run(tmp_path, "solve", BM.format(T=1.0, f="1") + GRID + "n_steps = 10\n")
    assert code == 1
    assert "CFL" in capsys.readouterr().err


def test_solve_reference_value(tmp_path):
    code, out = run(tmp_path, "solve", BM.format(T=10.0, f="1")
                    + "[grid]\nspacing = 0.02\nstore_every = 1000\n")
    assert code == 0
    meta = json.loads((out / "grid_meta.json").read_text())
    assert abs(meta["v_at_origin"] - 1.0) < 0.02


def test_estimate_writes_row(tmp_path):
    text = BM.format(T=1.0, f="1") + "[estimate]\nn_paths = 300\nn_steps = 100\nx = [0.5]\n"
    code, out = run(tmp_path, "estimate", text)
    assert code == 0
    row = json.loads((out / "estimate.json").read_text())
    assert row["x"] == [0.5]
    assert 0.0 < row["mean"] <= 1.0
    assert row["n_paths"] == 300


def test_estimate_outside_domain_zero(tmp_path):
    text = BM.format(T=1.0, f="1") + "[estimate]\nn_paths = 50\nn_steps = 20\nx = [2.0]\n"
    code, out = run(tmp_path, "estimate", text)
    assert code == 0
    assert json.loads((out / "estimate.json").read_text())["mean"] == 0.0


def test_estimate_bad_point(tmp_path, capsys):
    text = BM.format(T=1.0, f="1") + "[estimate]\nt = 5.0\n"
    code, _ = run(tmp_path, "estimate", text)
    assert code == 2


def test_simulate_writes_path(tmp_path):
    text = BM.format(T=1.0, f="1") + "[simulate]\nn_steps = 64\n"
    code, out = run(tmp_path, "simulate", text)
    assert code == 0
    lines = (out / "path.csv").read_text().strip().splitlines()
    assert len(lines) >= 2


def test_cover_dump(tmp_path):
    text = BM.format(T=1.0, f="1") + "[cover]\nradius = 0.25\nt_lo = 0.5\nt_hi = 0.75\n"
    code, out = run(tmp_path, "cover", text)
    assert code == 0
    cells = json.loads((out / "cover.json").read_text())["cells"]
    assert cells and all(c["radius"] == 0.25 for c in cells)


def verify_report(tmp_path, extra="", workers=1, seed=None):
    text = BM.format(T=2.0, f="1") + GRID + VERIFY + extra
    args = ["--workers", str(workers)] + (["--seed", str(seed)] if seed is not None else [])
    code, out = run(tmp_path, "verify", text, *args)
    return code, json.loads((out / "report.json").read_text())


def test_verify_passes(tmp_path):
    code, rep = verify_report(tmp_path)
    assert code == 0 and rep["passed"]
    assert set(rep["flags"]) == {"upper", "achievable"}
    # no controls: only argmax and zero policies exist
    assert len(rep["dpp"]["rows"]) == 3 * 2


def test_verify_inflated_grid_fails_achievability(tmp_path):
    code, rep = verify_report(tmp_path, "grid_scale = 2.0\n")
    assert code == 1
    assert not rep["flags"]["achievable"]


def test_verify_deflated_grid_fails_upper(tmp_path):
    code, rep = verify_report(tmp_path, "grid_scale = 0.5\n")
    assert code == 1
    assert not rep["flags"]["upper"]


def test_verify_trivial_rule(tmp_path):
    rules = '[[verify.rules]]\nid = "now"\nkind = "constant"\ns = 0.0\n'
    code, rep = verify_report(tmp_path, rules)
    assert code == 0
    # theta = t stops at once, so every estimate is v_ref itself
    for row in rep["dpp"]["rows"]:
        assert row["estimate"] == pytest.approx(rep["dpp"]["v_ref"], abs=1e-12)


def test_verify_worker_invariance(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    _, r1 = verify_report(a, workers=1)
    _, r2 = verify_report(b, workers=3)
    assert (a / "out" / "report.json").read_bytes() == (b / "out" / "report.json").read_bytes()
    assert r1 == r2


def test_verify_seed_changes_report(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    _, r1 = verify_report(a, seed=1)
    _, r2 = verify_report(b, seed=2)
    assert r1["dpp"]["rows"] != r2["dpp"]["rows"]


def test_problem_include(tmp_path):
    prob = BM.format(T=1.0, f="1").replace("[run]\nseed = 11\n", "")
    write(tmp_path, prob, "problem.toml")
    code, _ = run(tmp_path, "check", 'problem = "problem.toml"\n[run]\nseed = 2\n'
                  "[check]\nlipschitz_samples = 50\n")
    assert code == 0


def test_shipped_configs_parse():
    from pathlib import Path
    from exitdpp import config
    for p in sorted((Path(__file__).parent.parent / "configs").glob("*.toml")):
        cfg = config.load(p)
        assert cfg.seed >= 0 and cfg.spec.T > 0
