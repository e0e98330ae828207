
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynmech.mechanism import constant_rules, zero_rules
from dynmech.payoff import AgentProblem, PayoffQuery, interim_payoff
from dynmech.scenario import (UtilitySpec, build_scenario, persistence_kernel, random_scenario, s1)
from dynmech.stopping import (NON_THRESHOLD, THRESHOLD, StoppingSolution, check_single_crossing,
                              check_stochastic_dominance, extract_threshold, never_sentinel, save_stopping_csv,
                              solve_stopping, threshold_from_region)
from dynmech.synthesis import synthesize


def test_single_period_stops_everywhere():
    sc = s1(T=0)
    rules = zero_rules(sc)
    sol = solve_stopping(sc, rules)
    for i in range(2):
        assert np.all(sol.region[i][0])
        vals = [interim_payoff(sc, rules, PayoffQuery(i, 0, x, 0)) for x in sc.points(i, 0)]
        assert np.array_equal(sol.V[i][0], vals)


def test_huge_price_forces_stop(sc):
    beta = np.zeros((2, 3))
    beta[:, 0] = 1e6
    rules = zero_rules(sc).replace(beta=beta)
    sol = solve_stopping(sc, rules)
    for i in range(2):
        assert np.all(sol.region[i][0])
        assert np.array_equal(sol.V[i][0], sol.stop_value[i][0])


def test_values_match_horizon_enumeration(sc, synth_priced):
    rules = synth_priced.rules
    sol = solve_stopping(sc, rules)
    for i in range(2):
        for t in range(3):
            for k, x in enumerate(sc.points(i, t)):
                best = max(interim_payoff(sc, rules, PayoffQuery(i, t, x, tau)) for tau in range(t, 3))
                assert sol.V[i][t][k] == pytest.approx(best, abs=1e-12)


def test_terminal_invariants(sc, synth_priced):
    sol = solve_stopping(sc, synth_priced.rules)
    prob = AgentProblem(sc, synth_priced.rules, 0)
    assert np.array_equal(sol.V[0][2], prob.payoff(2, 2))
    assert all(np.all(sol.region[i][2]) for i in range(2))
    assert np.array_equal(sol.epsilon[:, 2], [1.0, 1.0])


def test_threshold_examples():
    grid = np.array([0.0, 0.5, 1.0])
    assert threshold_from_region(np.array([True, True, True]), grid)[:2] == (1.0, THRESHOLD)
    assert threshold_from_region(np.array([True, False, False]), grid)[:2] == (0.0, THRESHOLD)
    e, kind, pair = threshold_from_region(np.array([False, True, False]), grid)
    assert kind == NON_THRESHOLD and pair == (0.0, 0.5) and np.isnan(e)
    e, kind, _ = threshold_from_region(np.array([False, False, False]), grid)
    assert kind == THRESHOLD and e == never_sentinel(grid) == -0.5


def test_extract_threshold_reports_pair(sc):
    region = [[np.array([False, True, False]), np.array([True, False, False]), np.ones(3, bool)]] * 2
    sol = StoppingSolution(None, None, region, None, None)
    eps, verdicts = extract_threshold(sol, sc)
    assert verdicts[0][0].kind == NON_THRESHOLD and verdicts[0][0].pair == (0.0, 0.5)
    assert eps[1, 1] == 0.0 and eps[1, 2] == 1.0


def test_single_crossing_on_unpriced_s1(sc):
    assert all(v.passed for v in check_single_crossing(sc, zero_rules(sc)))


def test_single_crossing_fails_with_negative_utility(sc):
    neg = sc.with_utilities([UtilitySpec(tuple(-t for t in u.tables)) for u in sc.utilities])
    verdicts = check_single_crossing(neg, zero_rules(neg))
    bad = [v for v in verdicts if not v.passed]
    assert bad and bad[0].witness is not None


def test_single_crossing_constant_utilities(sc):
    const = sc.with_utilities([UtilitySpec(tuple(np.full_like(t, 0.3) for t in u.tables)) for u in sc.utilities])
    assert all(v.passed for v in check_single_crossing(const, zero_rules(const)))


def test_dominance_examples(sc):
    flat = np.full((3, 3, 3), 1 / 3)
    sc_flat = build_scenario([[0.0, 0.5, 1.0]] * 2, 2, [flat, flat], [[1 / 3] * 3] * 2, [0.0, 0.5, 1.0])
    assert all(v.passed for v in check_stochastic_dominance(sc_flat))
    assert all(v.passed for v in check_stochastic_dominance(sc))
    rev = persistence_kernel(3, 0.6, 3)[::-1]
    sc_rev = build_scenario([[0.0, 0.5, 1.0]] * 2, 2, [rev, rev], [[1 / 3] * 3] * 2, [0.0, 0.5, 1.0])
    bad = [v for v in check_stochastic_dominance(sc_rev) if not v.passed]
    assert bad and bad[0].witness[:2] == (0.0, 0.5)


def test_tie_break_continue_gives_same_thresholds(sc):
    res = synthesize(sc, epsilon=np.array([[0.5, 0.0, 1.0]] * 2))
    a = solve_stopping(sc, res.rules, ties="stop")
    b = solve_stopping(sc, res.rules, ties="continue")
    # the synthesized price makes the threshold point exactly indifferent; only tied points may differ
    for i in range(2):
        for t in range(3):
            tied = np.abs(a.stop_value[i][t] - a.V[i][t]) < 1e-12
            if t < 2:
                tied &= np.abs(a.continue_value[i][t] - a.V[i][t]) < 1e-12
            assert np.array_equal(a.region[i][t] & ~tied, b.region[i][t] & ~tied)


def test_csv_bundle(tmp_path, sc, synth):
    sol = solve_stopping(sc, synth.rules)
    save_stopping_csv(sol, sc, tmp_path)
    for name in ("V", "g", "region", "epsilon"):
        lines = (tmp_path / f"{name}.csv").read_text().splitlines()
        assert lines[0] == "agent,period,grid_point,value"
    assert len((tmp_path / "V.csv").read_text().splitlines()) == 1 + 2 * 3 * 3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 4), st.integers(0, 3))
def test_bellman_consistency(seed, m, T):
    rng = np.random.default_rng(seed)
    sc = random_scenario(rng, m=m, T=T)
    rules = constant_rules(sc, rng.normal(), rng.normal(), 0.0).replace(beta=rng.normal(size=(2, T + 1)))
    sol = solve_stopping(sc, rules)
    for i, prob in enumerate(AgentProblem(sc, rules, j) for j in range(2)):
        for t in range(T):
            cont = prob.model.truthful_kernel(t) @ sol.V[i][t + 1]
            cont = cont + np.diag(prob.model.U[t]) + prob.R[t]
            assert np.all(np.abs(sol.V[i][t] - np.maximum(sol.stop_value[i][t], cont)) <= 1e-12)
