import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import beckmann_tstt
from tollmdp.equilibrium import (CoefficientExtrema, EquilibriumError,
                                 coefficient_extrema, complementarity_residual,
                                 extract_tstt_pwl, solve_equilibrium, tstt)
from tollmdp.mdp import original_problem
from tollmdp.pwl import PwlFunction

LINES = (PwlFunction.line(1, 0.5), PwlFunction.line(2, 1))


def random_routes(rng, n_routes=2, max_pieces=4):
    routes = []
    for _ in range(n_routes):
        n = rng.integers(1, max_pieces + 1)
        xs = np.concatenate([[0.0], np.cumsum(rng.uniform(0.2, 2.0, n - 1))])
        slopes = rng.uniform(0.2, 5.0, n)
        ys = [rng.uniform(0, 3)]
        for k in range(1, n):
            ys.append(ys[-1] + slopes[k - 1] * (xs[k] - xs[k - 1]))
        routes.append(PwlFunction.from_points(xs, ys, slopes[-1]))
    return tuple(routes)


def test_both_routes_used():
    sol = solve_equilibrium(LINES, 3, (2, 2))
    assert sol.w == pytest.approx(14 / 3, abs=1e-12)
    assert sol.flows == pytest.approx((13 / 6, 5 / 6), abs=1e-12)
    assert sol.tstt == pytest.approx(28 / 3, abs=1e-12)
    assert sol.unused_count == 0


def test_zero_demand():
    sol = solve_equilibrium(LINES, 0, (2, 2))
    assert sol.flows == (0.0, 0.0)
    assert sol.unused_count == 2
    assert sol.tstt == pytest.approx(5.5, abs=1e-12)


def test_one_route_used():
    sol = solve_equilibrium(LINES, 0.2, (2, 2))
    assert sol.used == (True, False)
    assert sol.w == pytest.approx(2.7, abs=1e-12)
    assert sol.tstt == pytest.approx(5.7, abs=1e-12)
    assert float(LINES[1](0)) + 2 > sol.w


def test_rejects_negative_demand_and_toll():
    with pytest.raises(EquilibriumError):
        solve_equilibrium(LINES, -1, (2, 2))
    with pytest.raises(EquilibriumError):
        solve_equilibrium(LINES, 1, (2, -1))


def test_continuous_at_activation():
    # route 2 activates where w = 3, i.e. x = 0.5
    left = tstt(LINES, 0.5 - 1e-10, (2, 2))
    right = tstt(LINES, 0.5 + 1e-10, (2, 2))
    assert abs(left - right) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 20))
def test_solution_invariants(seed, x):
    rng = np.random.default_rng(seed)
    routes = random_routes(rng, n_routes=rng.integers(1, 4))
    u = rng.uniform(0, 4, len(routes))
    sol = solve_equilibrium(routes, x, u)
    assert complementarity_residual(routes, sol) <= 1e-9 * max(1.0, sol.w)
    assert sum(sol.flows) == pytest.approx(x, rel=1e-12, abs=1e-12)
    assert min(sol.flows) >= 0
    recomputed = sum(sol.w if ok else float(f(0)) + t
                     for f, ok, t in zip(routes, sol.used, u))
    assert sol.tstt == pytest.approx(recomputed, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 10), st.floats(0.01, 3), st.integers(0, 1))
def test_monotone_in_demand_and_toll(seed, x, dx, r):
    rng = np.random.default_rng(seed)
    routes = random_routes(rng)
    u = rng.uniform(0, 4, 2)
    base = tstt(routes, x, u)
    assert tstt(routes, x + dx, u) > base
    bumped = u.copy()
    bumped[r] += dx
    assert tstt(routes, x, bumped) >= base - 1e-12


def test_matches_beckmann_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        routes = random_routes(rng)
        u = rng.uniform(0, 4, 2)
        x = rng.uniform(0, 5)
        assert tstt(routes, x, u) == pytest.approx(beckmann_tstt(routes, x, u), rel=1e-6)


def test_two_piece_coefficients():
    t = extract_tstt_pwl(LINES, (2, 2))
    assert np.allclose(t.x_start, [0, 0.5])
    assert np.allclose(t.k0, [1, 4 / 3])
    assert np.allclose(t.kr, [[1, 1], [4 / 3, 2 / 3]])
    assert np.allclose(t.kc, [1.5, 4 / 3])
    left = t.k0[0] * 0.5 + t.intercepts[0]
    right = t.k0[1] * 0.5 + t.intercepts[1]
    assert left == pytest.approx(6) and right == pytest.approx(6)
    assert t(3) == pytest.approx(28 / 3, abs=1e-12)


def test_single_route_coefficients():
    f = PwlFunction([(0, 1, 0.5), (2, 3, -3.5)])
    t = extract_tstt_pwl((f,), (2,))
    assert np.allclose(t.k0, f.slopes)
    assert np.allclose(t.kr, 1)
    assert np.allclose(t.kc, f.intercepts)


def test_pointwise_agreement_on_base_routes():
    cfg = original_problem()
    rng = np.random.default_rng(5)
    for u in cfg.actions():
        t = extract_tstt_pwl(cfg.routes, u)
        for x in rng.uniform(0, 20, 200 // len(cfg.actions()) + 1):
            assert t(x) == pytest.approx(tstt(cfg.routes, x, u), rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_extracted_pieces_positive_and_continuous(seed):
    rng = np.random.default_rng(seed)
    routes = random_routes(rng, n_routes=rng.integers(1, 4))
    u = rng.uniform(0.5, 4, len(routes))
    t = extract_tstt_pwl(routes, u)
    assert np.all(t.k0 > 0) and np.all(t.kr > 0)
    for x in t.x_start[1:]:
        assert t(x) == pytest.approx(tstt(routes, x, u), rel=1e-9)
    for x in rng.uniform(0, 15, 20):
        assert t(x) == pytest.approx(tstt(routes, x, u), rel=1e-9)


def test_extrema():
    t = extract_tstt_pwl(LINES, (2, 2))
    ex = coefficient_extrema([t])
    assert ex.k0_min == pytest.approx(1) and ex.k0_max == pytest.approx(4 / 3)
    other = extract_tstt_pwl(LINES, (4, 2))
    a, b = coefficient_extrema([t, other]), coefficient_extrema([other, t])
    assert (a.k0_min, a.k0_max) == (b.k0_min, b.k0_max)
    assert np.array_equal(a.kr_min, b.kr_min) and np.array_equal(a.kr_max, b.kr_max)
    single = extract_tstt_pwl((LINES[0],), (2,))
    one = coefficient_extrema([single])
    assert one.k0_min == one.k0_max and np.array_equal(one.kr_min, one.kr_max)
    with pytest.raises(EquilibriumError):
        CoefficientExtrema(1.0, 2.0, np.ones(1), np.ones(1))


def test_csv_export():
    t = extract_tstt_pwl(LINES, (2, 2))
    lines = t.to_csv().splitlines()
    assert lines[0] == "x_start,k0,kr_0,kr_1,kc"
    assert len(lines) == 3
