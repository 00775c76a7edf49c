"""End-to-end acceptance checks; one test per criterion.

The terminal summary prints a PASS/FAIL line per test (see conftest.py).
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from oracles import beckmann_tstt
from tollmdp.cli import InstanceConfig, build_model, main
from tollmdp.conditions import (LyapunovSpec, bound_assumption_G, bound_assumption_V,
                                foster_drift_report, rho_condition)
from tollmdp.equilibrium import coefficient_extrema, solve_equilibrium, tstt
from tollmdp.mdp import (MdpModel, build_aggregated_model, build_truncated_model,
                         original_problem)
from tollmdp.pwl import PwlFunction
from tollmdp.solver import (exhaustive_search, policy_evaluation, policy_iteration,
                            relative_value_iteration, simulate_policy)

BASE = InstanceConfig()


def solve(inst):
    model = build_model(inst)
    return model, policy_iteration(model)


def toll_table(model, res):
    """Per-state toll vector chosen by the policy, shape (states, routes)."""
    return np.asarray(model.actions)[res.policy]


def test_01_policy_shape_original_instance():
    t0 = time.perf_counter()
    model, res = solve(BASE)
    elapsed = time.perf_counter() - t0
    tolls = toll_table(model, res)
    print(f"lambda={res.lam:.6f} runtime={elapsed:.3f}s")
    assert tolls.shape == (16, 2)
    assert np.all(np.diff(tolls, axis=0) <= 0)
    assert np.all(tolls[0] > tolls[-1])
    assert elapsed < 60.0


def test_02_tolls_non_decreasing_in_theta():
    tables = []
    for theta in (25.0, 100.0, 400.0):
        model, res = solve(replace(BASE, theta=theta))
        tables.append(toll_table(model, res))
    for lo, hi in zip(tables, tables[1:]):
        assert np.all(hi >= lo)


def test_03_breakpoint_count_stability():
    lams, policies = {}, {}
    for eta in range(1, 7):
        model, res = solve(replace(BASE, eta=eta))
        lams[eta], policies[eta] = res.lam, res.policy.tolist()
    print({k: round(v, 6) for k, v in lams.items()})
    assert policies[3] == policies[4] == policies[5] == policies[6]
    for eta in range(1, 6):
        assert lams[eta + 1] >= lams[eta] - 1e-9


def test_04_truncation_convergence():
    grid = (4, 6, 8, 10, 12, 15)
    lams, policies = [], []
    for x_max in grid:
        _, res = solve(replace(BASE, x_max=x_max))
        lams.append(res.lam)
        policies.append(res.policy)
    diffs = np.abs(np.diff(lams))
    print("lambda", np.round(lams, 6), "diffs", np.round(diffs, 6))
    # diffs[k] is between grid[k] and grid[k+1]; those from x_max = 6 onward shrink
    tail = diffs[1:]
    assert np.all(np.diff(tail) < 0)
    for k in range(1, len(grid)):
        for j in range(k + 1, len(grid)):
            shared = grid[k] + 1
            assert policies[k].tolist() == policies[j][:shared].tolist()


@pytest.fixture(scope="module")
def aggregation(original):
    cfg, _, res = original
    gaps = {}
    for n in (2, 4, 8, 16):
        agg = policy_iteration(build_aggregated_model(cfg, n))
        gaps[n] = abs(agg.lam - res.lam)
    return gaps, res.lam


def test_05a_aggregation_gap_smallest_at_finest(aggregation):
    gaps, _ = aggregation
    print({n: round(g, 6) for n, g in gaps.items()})
    assert min(gaps, key=gaps.get) == 16


def test_05b_aggregation_matches_truncation_at_full_resolution(aggregation):
    gaps, lam = aggregation
    print(f"truncated lambda={lam:.6f} gap at N=16: {gaps[16]:.6f}")
    assert gaps[16] <= 1e-6


def random_model(rng, n_states, n_actions):
    P = rng.dirichlet(np.ones(n_states), size=(n_actions, n_states))
    g = rng.uniform(0.5, 10.0, (n_states, n_actions))
    return MdpModel.from_arrays(P, g)


def test_06_solver_oracles(original):
    rng = np.random.default_rng(6)
    for _ in range(100):
        model = random_model(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        res = policy_iteration(model)
        lam_rvi, h_rvi = relative_value_iteration(model)
        lam_ex, pol_ex = exhaustive_search(model)
        assert abs(res.lam - lam_ex) <= 1e-8 and abs(lam_rvi - lam_ex) <= 1e-8
        assert res.policy.tolist() == pol_ex.tolist()
        greedy = np.argmin(model.g + np.einsum("aij,j->ia", model.P, h_rvi), axis=1)
        assert greedy.tolist() == pol_ex.tolist()
    _, model, res = original
    lam, _ = policy_evaluation(model, res.policy)
    rep = simulate_policy(model, res.policy, 1_000_000, seed=2024)
    z = (rep.mean - lam) / rep.std_error
    print(f"lambda={lam:.6f} simulated={rep.mean:.6f} se={rep.std_error:.6f} z={z:.3f}")
    assert abs(z) <= 3


def test_07_equilibrium_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        routes = []
        for _r in range(2):
            n = int(rng.integers(1, 5))
            xs = np.concatenate([[0.0], np.cumsum(rng.uniform(0.2, 2.0, n - 1))])
            slopes = rng.uniform(0.2, 5.0, n)
            ys = [rng.uniform(0, 3)]
            for k in range(1, n):
                ys.append(ys[-1] + slopes[k - 1] * (xs[k] - xs[k - 1]))
            routes.append(PwlFunction.from_points(xs, ys, slopes[-1]))
        u, x = rng.uniform(0, 4, 2), rng.uniform(0, 5)
        ref = beckmann_tstt(routes, x, u)
        assert abs(tstt(routes, x, u) - ref) <= 1e-6 * abs(ref)
    lines = (PwlFunction.line(1, 0.5), PwlFunction.line(2, 1))
    sol = solve_equilibrium(lines, 3, (2, 2))
    assert abs(sol.w - 14 / 3) <= 1e-12
    assert np.max(np.abs(np.array(sol.flows) - [13 / 6, 5 / 6])) <= 1e-12
    assert abs(sol.tstt - 28 / 3) <= 1e-12
    assert abs(solve_equilibrium(lines, 0, (2, 2)).tstt - 5.5) <= 1e-12


def test_08_condition_checkers(original):
    small = rho_condition(1, 0.1, 1, 1, 1, 10)
    assert small.holds and abs(small.details["rhs"] - 9.0484) < 1e-4
    assert not rho_condition(1, 100, 1, 1, 1, 10).holds

    cfg, model, _ = original
    ex = coefficient_extrema(model.tstt_functions)
    spec = LyapunovSpec.from_extrema(ex, cfg.theta, cfg.tau_max)
    for a in range(model.n_actions):
        policy = np.full(model.n_states, a)
        assert foster_drift_report(model, policy, spec).holds

    for theta in (25.0, 100.0, 400.0):
        c = original_problem(theta=theta)
        m = build_truncated_model(c)
        e = coefficient_extrema(m.tstt_functions)
        g = bound_assumption_G(e, c, m)
        v = bound_assumption_V(e, c, m)
        assert g.attained <= g.bound + 1e-9
        assert v.attained <= v.bound + 1e-9


@pytest.mark.parametrize("command,text", [
    ("solve", "{}\n"),
    ("sweep", "kind: sweep-theta\ngrid: [25, 100, 400]\n"),
    ("simulate", "horizon: 50000\n"),
], ids=["solve", "sweep", "simulate"])
def test_09_reruns_byte_identical(tmp_path, command, text):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(text)
    for name in ("a", "b"):
        assert main([command, str(cfg), "--out", str(tmp_path / name), "--seed", "11"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.csv") if p.name != "timing.csv")
    assert files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "manifest.txt").read_bytes() == (tmp_path / "b" / "manifest.txt").read_bytes()
