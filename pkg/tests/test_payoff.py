import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynmech.mechanism import MechanismRules, constant_rules, zero_rules
from dynmech.payoff import (AgentProblem, PayoffQuery, auxiliary_J, continuing_value_g, ex_ante_payoff,
                            interim_payoff)
from dynmech.scenario import UtilitySpec, build_scenario, persistence_kernel, random_scenario, s1
from dynmech.stopping import solve_stopping


def _zero_utilities(sc):
    return sc.with_utilities([UtilitySpec(tuple(np.zeros_like(t) for t in u.tables)) for u in sc.utilities])


def _brute_force(sc, rules, agent, x_idx, tau):
    """Enumerate every joint type path from period 0 with everyone truthful and present."""
    total = 0.0
    other = 1 - agent
    paths = itertools.product(*[range(3)] * (2 * (tau + 1)))
    for flat in paths:
        own = flat[:tau + 1]
        oth = flat[tau + 1:]
        if own[0] != x_idx:
            continue
        p = sc.initial_dists[other][oth[0]]
        value = 0.0
        for t in range(tau + 1):
            prof = [0, 0]
            prof[agent], prof[other] = own[t], oth[t]
            lev = sc.allocation_rule.present_table(t)[tuple(prof)]
            value += sc.utilities[agent].tables[t][own[t], lev[agent]]
            if t < tau:
                value += rules.rho[agent][t][tuple(prof)]
                p *= sc.kernels[agent][t].table[own[t], lev[agent], own[t + 1]]
                p *= sc.kernels[other][t].table[oth[t], lev[other], oth[t + 1]]
            else:
                value += rules.gamma[agent][t][tuple(prof)] + rules.beta[agent, t]
        total += p * value
    return total


def test_stop_now_is_utility_gamma_price(sc, synth_priced):
    rules = synth_priced.rules
    prob = AgentProblem(sc, rules, 0)
    for t in range(3):
        for k, x in enumerate(sc.points(0, t)):
            expect = prob.model.U[t][k, k] + prob.G[t][k] + rules.beta[0, t]
            assert interim_payoff(sc, rules, PayoffQuery(0, t, x, t)) == pytest.approx(expect, abs=1e-14)


def test_only_posted_price_survives(sc):
    z = _zero_utilities(sc)
    rules = constant_rules(z, 0.0, 0.0, 0.7)
    for t in range(3):
        for tau in range(t, 3):
            assert interim_payoff(z, rules, PayoffQuery(1, t, 0.5, tau)) == pytest.approx(0.7, abs=1e-14)


@pytest.mark.parametrize("x_idx", [0, 1, 2])
def test_interim_matches_path_enumeration(sc, synth_priced, x_idx):
    rules = synth_priced.rules
    for agent in (0, 1):
        exact = interim_payoff(sc, rules, PayoffQuery(agent, 0, sc.points(agent, 0)[x_idx], 2))
        assert exact == pytest.approx(_brute_force(sc, rules, agent, x_idx, 2), abs=1e-12)


def test_horizon_out_of_range(sc, synth):
    with pytest.raises(ValueError, match="horizon"):
        interim_payoff(sc, synth.rules, PayoffQuery(0, 2, 0.0, 1))
    with pytest.raises(ValueError, match="horizon"):
        ex_ante_payoff(sc, synth.rules, 0, 3)


def test_ex_ante_point_mass(synth_priced):
    k = persistence_kernel(3, 0.6, 3)
    sc = build_scenario([[0.0, 0.5, 1.0]] * 2, 2, [k, k], [[0.0, 1.0, 0.0], [1 / 3] * 3], [0.0, 0.5, 1.0])
    rules = synth_priced.rules.replace(sigma=sc.allocation_rule)
    for tau in range(3):
        assert ex_ante_payoff(sc, rules, 0, tau) == pytest.approx(
            interim_payoff(sc, rules, PayoffQuery(0, 0, 0.5, tau)), abs=1e-14)


def test_ex_ante_mixture(sc, synth_priced):
    rules = synth_priced.rules
    for tau in range(3):
        mix = sum(w * interim_payoff(sc, rules, PayoffQuery(1, 0, x, tau))
                  for w, x in zip(sc.initial_dists[1], sc.points(1, 0)))
        assert ex_ante_payoff(sc, rules, 1, tau) == pytest.approx(mix, abs=1e-14)


def test_g_singleton_horizon():
    sc = s1(T=1)
    rules = constant_rules(sc, 0.1, -0.2, 0.05)
    for k, x in enumerate(sc.points(0, 0)):
        c1 = interim_payoff(sc, rules, PayoffQuery(0, 0, x, 1))
        c0 = interim_payoff(sc, rules, PayoffQuery(0, 0, x, 0))
        assert continuing_value_g(sc, rules, 0, 0, x) == pytest.approx(c1 - c0 + 0.05, abs=1e-14)


def test_g_vanishes_without_payoffs(sc):
    z = _zero_utilities(sc)
    rules = zero_rules(z)
    for t in range(2):
        for x in z.points(0, t):
            assert continuing_value_g(z, rules, 0, t, x) == 0.0


def test_g_undefined_at_end(sc, synth):
    with pytest.raises(ValueError):
        continuing_value_g(sc, synth.rules, 0, 2, 0.0)


def test_g_at_threshold_equals_price(sc, synth_priced):
    rules = synth_priced.rules
    eps = synth_priced.epsilon
    assert rules.beta[0, 0] > 0.1
    for i in range(2):
        for t in range(2):
            grid = sc.points(i, t)
            if grid[0] < eps[i, t] < grid[-1]:
                g = continuing_value_g(sc, rules, i, t, eps[i, t])
                assert abs(g - rules.beta[i, t]) <= 1e-9


def test_auxiliary_branches(sc, synth_priced):
    rules = synth_priced.rules
    prob = AgentProblem(sc, rules, 0)
    x = 0.5
    stop = auxiliary_J(sc, rules, 0, 0, x, 0)
    assert stop == pytest.approx(interim_payoff(sc, rules, PayoffQuery(0, 0, x, 0)), abs=1e-14)
    for tau in (1, 2):
        cont = auxiliary_J(sc, rules, 0, 0, x, tau)
        expect = stop - rules.beta[0, 0] + prob.g(0, tau=tau)[1]
        assert cont == pytest.approx(expect, abs=1e-14)
        # the continuation branch equals the truthful payoff with that horizon
        assert cont == pytest.approx(interim_payoff(sc, rules, PayoffQuery(0, 0, x, tau)), abs=1e-12)


def test_auxiliary_indifference_at_threshold(sc, synth_priced):
    rules = synth_priced.rules
    eps = synth_priced.epsilon
    stop = auxiliary_J(sc, rules, 0, 0, eps[0, 0], 0)
    best = max(auxiliary_J(sc, rules, 0, 0, eps[0, 0], tau) for tau in (1, 2))
    assert abs(stop - best) <= 1e-9


def test_terminal_payoff_is_terminal_value(sc, synth_priced):
    rules = synth_priced.rules
    sol = solve_stopping(sc, rules)
    for i in range(2):
        vals = [interim_payoff(sc, rules, PayoffQuery(i, 2, x, 2)) for x in sc.points(i, 2)]
        assert np.array_equal(vals, sol.V[i][2])


def _random_rules(sc, rng):
    n, T = sc.n, sc.T
    rho = tuple(tuple(rng.normal(size=sc.sizes(t)) for t in range(T + 1)) for _ in range(n))
    gamma = tuple(tuple(rng.normal(size=sc.sizes(t)) for t in range(T + 1)) for _ in range(n))
    return MechanismRules(sc.allocation_rule, rho, gamma, rng.normal(size=(n, T + 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_payoff_linear_in_payments(seed):
    rng = np.random.default_rng(seed)
    sc = _zero_utilities(random_scenario(rng, m=3, T=2))
    r1, r2 = _random_rules(sc, rng), _random_rules(sc, rng)
    i = int(rng.integers(2))
    t = int(rng.integers(3))
    tau = int(rng.integers(t, 3))
    x = sc.points(i, t)[int(rng.integers(3))]
    q = PayoffQuery(i, t, x, tau)
    lhs = interim_payoff(sc, r1 + r2, q)
    assert lhs == pytest.approx(interim_payoff(sc, r1, q) + interim_payoff(sc, r2, q), abs=1e-10)
