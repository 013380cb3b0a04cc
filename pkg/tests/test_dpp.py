import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import bm_spec, controlled_spec, solve_cfl
from exitdpp.dp import ValueGrid, extract_policy
from exitdpp.dpp import (Constant, Cover, FirstHit, HalfOpenCell, LscMinorant, MinOf, ToleranceModel,
                         build_cover, default_policies, lsc_minorant, realize_stopping, stitch,
                         stitching_improvement_test, verify_dpp)
from exitdpp.exittime import exit_time
from exitdpp.montecarlo import BudgetError, estimate_J
from exitdpp.paths import (BrownianPath, Feedback, StitchError, TimeMesh, concatenate, simulate,
                           zero_policy)
from exitdpp.problem import interval

MESH = TimeMesh(0.0, 2.0, 400)


@pytest.fixture(scope="module")
def bm2():
    spec = bm_spec(T=2.0)
    return spec, solve_cfl(spec, 1 / 50)


@pytest.fixture(scope="module")
def ctrl():
    spec = controlled_spec()
    return spec, solve_cfl(spec, 1 / 50)


def bm_path(seed=0, T=2.0, n=400):
    spec = bm_spec(T=T)
    mesh = TimeMesh(0.0, T, n)
    return simulate(spec, 0.0, [0.0], zero_policy(1, 0), BrownianPath.generate(mesh, 1, seed))


# ---------------------------------------------------------------- stopping rules


def test_constant_at_start_is_start_index():
    path = bm_path()
    assert realize_stopping(Constant(0.0), path, interval(-1, 1)) == 0


@pytest.mark.parametrize("seed", range(5))
def test_late_constant_is_clipped_to_exit(seed):
    path = bm_path(seed)
    tau = exit_time(path, interval(-1, 1)).tau_index
    assert realize_stopping(Constant(4.0), path, interval(-1, 1)) == tau
    assert realize_stopping(FirstHit(interval(-1, 1)), path, interval(-1, 1)) == tau


@settings(max_examples=30)
@given(st.integers(0, 2**32), st.floats(0, 3), st.floats(0.1, 0.9))
def test_realized_theta_is_between_start_and_exit(seed, s, r):
    path = bm_path(seed, n=200)
    G = interval(-1, 1)
    tau = exit_time(path, G).tau_index
    for rule in (Constant(s), FirstHit(interval(-r, r)), MinOf([Constant(s), FirstHit(interval(-r, r))])):
        k = realize_stopping(rule, path, G)
        assert 0 <= k <= tau


# ---------------------------------------------------------------- verify


def test_theta_at_start_reproduces_v_ref_bitwise(ctrl):
    spec, grid = ctrl
    pols = default_policies(spec, grid, n_random=1, seed=0)
    rep = verify_dpp(spec, 0.0, [0.2], grid, pols, {"now": Constant(0.0)}, n_paths=64, seed=1, mesh=MESH)
    assert all(r["estimate"] == rep.v_ref and r["std_error"] == 0.0 for r in rep.rows)
    assert rep.passed


def test_theta_at_exit_reduces_to_J(ctrl):
    spec, grid = ctrl
    pol = extract_policy(grid, spec)
    rep = verify_dpp(spec, 0.0, [0.0], grid, {"argmax": pol}, {"tau": FirstHit(spec.domain)},
                     n_paths=1000, seed=3, mesh=MESH)
    row = rep.rows[0]
    direct = estimate_J(spec, 0.0, [0.0], pol, MESH, 1000, row["seed"])
    assert row["estimate"] == direct.mean
    eps = rep.budgets["eps_disc"]
    assert abs(row["estimate"] - rep.v_ref) <= 3 * row["std_error"] + eps


def test_uncontrolled_reference_passes(bm2):
    spec, grid = bm2
    rep = verify_dpp(spec, 0.0, [0.0], grid, {"trivial": zero_policy(1, 0)}, {"half": Constant(1.0)},
                     n_paths=2000, seed=5, mesh=MESH, eps_opt_policy="trivial")
    assert rep.flags == {"upper": True, "achievable": True}
    row = rep.rows[0]
    assert row["seed"] and row["n_paths"] == 2000 and row["slack"] == rep.v_ref - row["estimate"]


def _scaled(grid, factor):
    return ValueGrid(grid.space, grid.mesh, grid.stored, grid.values * factor, grid.argmax,
                     grid.controls, dict(grid.metadata))


def test_inflated_grid_fails_achievability(bm2):
    spec, grid = bm2
    rep = verify_dpp(spec, 0.0, [0.0], _scaled(grid, 2.0), {"trivial": zero_policy(1, 0)},
                     {"half": Constant(1.0)}, n_paths=1000, seed=5, mesh=MESH)
    assert not rep.flags["achievable"]


def test_deflated_grid_fails_upper_bound(bm2):
    spec, grid = bm2
    rep = verify_dpp(spec, 0.0, [0.0], _scaled(grid, 0.5), {"trivial": zero_policy(1, 0)},
                     {"half": Constant(1.0)}, n_paths=1000, seed=5, mesh=MESH)
    assert not rep.flags["upper"]


def test_grid_from_another_problem_is_rejected(bm2, ctrl):
    with pytest.raises(ValueError, match="hash mismatch"):
        verify_dpp(ctrl[0], 0.0, [0.0], bm2[1], {"z": zero_policy(1, 1)}, {"c": Constant(1.0)},
                   n_paths=10, seed=0, mesh=MESH)


def test_budget_cap(bm2):
    spec, grid = bm2
    with pytest.raises(BudgetError):
        verify_dpp(spec, 0.0, [0.0], grid, {"z": zero_policy(1, 0)}, {"c": Constant(1.0)},
                   n_paths=10_000, seed=0, mesh=MESH, row_budget=10_000)


def test_report_is_reproducible(ctrl):
    spec, grid = ctrl
    pols = {"zero": zero_policy(1, 1), "pull": Feedback(["-sign(x1)"], 1)}
    args = (spec, 0.0, [0.1], grid, pols, {"q": Constant(0.5)})
    a = verify_dpp(*args, n_paths=300, seed=2, mesh=MESH)
    b = verify_dpp(*args, n_paths=300, seed=2, mesh=MESH, workers=3)
    assert a.to_json() == b.to_json()


def test_default_policy_family(ctrl):
    spec, grid = ctrl
    pols = default_policies(spec, grid, n_random=3, seed=4)
    assert list(pols) == ["argmax", "zero", "plus_sign", "minus_sign", "random_0", "random_1", "random_2"]
    assert default_policies(spec, grid, 3, 4)["random_1"] == pols["random_1"]
    assert list(default_policies(bm_spec(), None)) == ["zero"]


def test_tolerance_model():
    tm = ToleranceModel()
    assert tm.eps_disc(1e-4, 0.01) == pytest.approx(2 * (0.01 + 0.01))
    assert tm.eps_opt(1.0) == 0.05


@pytest.mark.parametrize("n_steps", [1000, 4000])
def test_disc_budget_covers_exit_bias(n_steps):
    # grid-point exit overshoots E tau = 1 by roughly 1.3 sqrt(dt); the frozen C = 2 must cover it
    spec = bm_spec()
    mesh = TimeMesh(0.0, 10.0, n_steps)
    est = estimate_J(spec, 0.0, [0.0], zero_policy(1, 0), mesh, 8000, 77)
    bias = est.mean - 1.0
    assert 0 < bias < ToleranceModel().eps_disc(mesh.dt, 1 / 200)


# ---------------------------------------------------------------- cover


def test_single_point_region_gives_one_cell():
    cover = build_cover((0.5, 0.5, [0.2], [0.2]), lambda t, x: 0.3)
    assert len(cover) == 1


def test_unit_square_is_covered():
    cover = build_cover((0.0, 1.0, [0.0], [1.0]), lambda t, x: 0.6, pitch=0.1)
    assert len(cover) >= 2
    T, X = np.meshgrid(np.linspace(0, 1, 21), np.linspace(0, 1, 21), indexing="ij")
    owners = cover.owner(T.ravel(), X.ravel()[:, None])
    assert np.all(owners >= 0)


def test_cover_rejects_radius_below_pitch():
    with pytest.raises(ValueError, match="cover would not terminate"):
        build_cover((0.0, 1.0, [0.0], [1.0]), lambda t, x: 0.05, pitch=0.1)


@settings(max_examples=10)
@given(st.integers(0, 2**32), st.floats(0.25, 0.6))
def test_each_point_has_exactly_one_owner(seed, r):
    cover = build_cover((0.0, 1.0, [-1.0, -1.0], [1.0, 1.0]), lambda t, x: r)
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 1, 500)
    X = rng.uniform(-1, 1, (500, 2))
    owners = cover.owner(t, X)
    assert np.all(owners >= 0)
    claims = np.stack([cover.member(i, t, X) for i in range(len(cover))])
    assert np.all(claims.sum(axis=0) == 1)
    assert np.array_equal(cover.membership(t, X), claims)
    assert np.array_equal(np.argmax(claims, axis=0), owners)
    anchors = np.array([cover[i].t for i in owners])
    assert np.all(anchors >= t)


def test_variable_radius_cover():
    cover = build_cover((0.0, 1.0, [-1.0], [1.0]), lambda t, x: 0.1 + 0.1 * abs(x[0]), pitch=0.02)
    t = np.random.default_rng(1).uniform(0, 1, 2000)
    X = np.random.default_rng(2).uniform(-1, 1, (2000, 1))
    assert np.all(cover.owner(t, X) >= 0)


# ---------------------------------------------------------------- stitching


def test_whole_space_cell_with_base_policy_is_base():
    spec = controlled_spec()
    base = Feedback(["-sign(x1)"], 1)
    cover = Cover([HalfOpenCell(10.0, (0.0,), 100.0, 0)])
    beta = stitch(base, Constant(0.7), cover, [base], spec.domain)
    for seed in range(5):
        bp = BrownianPath.generate(MESH, 1, seed)
        a = simulate(spec, 0.0, [0.1], beta, bp)
        b = simulate(spec, 0.0, [0.1], base, bp)
        assert np.array_equal(a.states, b.states)


def test_theta_at_exit_never_switches():
    spec = controlled_spec()
    base = zero_policy(1, 1)
    cover = Cover([HalfOpenCell(10.0, (0.0,), 100.0, 0)])
    beta = stitch(base, FirstHit(spec.domain), cover, [Feedback(["1"], 1)], spec.domain)
    assert estimate_J(spec, 0.0, [0.0], beta, MESH, 500, 1) == estimate_J(spec, 0.0, [0.0], base, MESH, 500, 1)


def test_uncovered_switch_point_raises():
    spec = controlled_spec()
    cover = Cover([HalfOpenCell(0.1, (0.0,), 0.05, 0)])
    beta = stitch(zero_policy(1, 1), Constant(1.0), cover, [zero_policy(1, 1)], spec.domain)
    with pytest.raises(StitchError, match="lies in no cover cell"):
        estimate_J(spec, 0.0, [0.0], beta, MESH, 50, 1)


def test_cell_choice_depends_only_on_switch_point():
    spec = controlled_spec()
    cover = build_cover((1.0, 1.05, [-1.0], [1.0]), lambda t, x: 0.1)
    pols = [Feedback([f"{(i % 3) - 1}"], 1) for i in range(len(cover))]
    beta = stitch(zero_policy(1, 1), Constant(1.0), cover, pols, spec.domain)
    theta = MESH.index_of(1.0)
    for seed in range(5):
        w = BrownianPath.generate(MESH, 1, seed, 0)
        a = simulate(spec, 0.0, [0.0], beta, w)
        if a.theta_index != theta:
            continue
        for j in (1, 2):
            w2 = BrownianPath.generate(MESH, 1, seed, j)
            spliced = BrownianPath.from_trajectory(MESH, concatenate(w, w2, theta))
            b = simulate(spec, 0.0, [0.0], beta, spliced)
            assert b.theta_index == theta
            assert np.array_equal(a.controls[theta], b.controls[theta])


# ---------------------------------------------------------------- minorant


@pytest.fixture(scope="module")
def small_grid():
    return solve_cfl(bm_spec(T=2.0), 0.05, max_slices=81)


def test_minorant_of_constant_grid(small_grid):
    g = small_grid
    const = ValueGrid(g.space, g.mesh, g.stored, np.full(g.values.shape, 0.4), None, None, {})
    phi = lsc_minorant(const, 5)
    z = np.random.default_rng(0).uniform(-0.99, 0.99, (50, 1))
    assert np.allclose(phi(0.3, z), 0.4, rtol=0, atol=1e-15)
    assert np.all(phi.node_values_ == 0.4)


def test_minorant_chain_at_nodes(small_grid):
    nodes = {n: LscMinorant(n).fit(small_grid).node_values_ for n in (1, 2, 20)}
    assert np.all(nodes[1] <= nodes[2])
    assert np.all(nodes[2] <= nodes[20])
    assert np.all(nodes[20] <= small_grid.values)


def test_minorant_chain_at_random_points(small_grid):
    rng = np.random.default_rng(3)
    t = rng.uniform(0, 2, 1000)
    x = rng.uniform(-1.2, 1.2, (1000, 1))
    v = small_grid.evaluate(t, x)
    phi1, phi2 = lsc_minorant(small_grid, 1)(t, x), lsc_minorant(small_grid, 2)(t, x)
    assert np.all(phi1 <= phi2) and np.all(phi2 <= v)


def test_minorant_is_n_lipschitz_at_nodes(small_grid):
    n = 3
    phi = LscMinorant(n).fit(small_grid).node_values_
    h_t = small_grid.times[1] - small_grid.times[0]
    h_x = small_grid.space.spacing[0]
    assert np.all(np.abs(np.diff(phi, axis=0)) <= n * h_t * (1 + 1e-12))
    assert np.all(np.abs(np.diff(phi, axis=1)) <= n * h_x * (1 + 1e-12))


def test_minorant_gap_closes(small_grid):
    gaps = [float(np.max(small_grid.values - LscMinorant(n).fit(small_grid).node_values_))
            for n in (1, 5, 25, 125)]
    assert gaps == sorted(gaps, reverse=True)
    assert gaps[-1] < 0.05 * gaps[0]


def test_degenerate_stitch(ctrl):
    spec, grid = ctrl
    pol = extract_policy(grid, spec)
    cover = Cover([HalfOpenCell(0.0, (0.0,), 0.05, 0)])
    phi = lsc_minorant(grid, 20)
    rep = stitching_improvement_test(spec, 0.0, [0.0], zero_policy(1, 1), Constant(0.0), cover, [pol], phi,
                                     0.1, grid, n_paths=1000, seed=2, mesh=MESH)
    assert rep["rhs"]["mean"] == float(phi(0.0, [[0.0]])[0])
    assert rep["passed"]


def test_stitching_with_zero_reward():
    spec = controlled_spec(f="0")
    grid = solve_cfl(spec, 0.1)
    cover = build_cover((1.0, 1.05, [-1.0], [1.0]), lambda t, x: 0.1)
    pol = extract_policy(grid, spec)
    rep = stitching_improvement_test(spec, 0.0, [0.0], zero_policy(1, 1), Constant(1.0), cover,
                                     [pol] * len(cover), lsc_minorant(grid, 20), 0.0, grid, n_paths=200,
                                     seed=0, mesh=MESH)
    assert rep["v_ref"] == rep["J_beta"]["mean"] == rep["rhs"]["mean"] == 0.0
    assert rep["passed"]
