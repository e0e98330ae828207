import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynmech.scenario import (PreferenceGrid, ScenarioError, TransitionKernel, build_scenario, inverse_cdf,
                              inverse_cdf_index, load_scenario, persistence_kernel, sample_path, scenario_to_dict,
                              simulate, smoothed_identity, update_belief)


def _write(tmp_path, doc, name="sc.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc), encoding="utf-8")
    return p


def test_load_roundtrip(tmp_path, sc):
    loaded = load_scenario(_write(tmp_path, scenario_to_dict(sc)))
    assert loaded.n == 2 and loaded.T == 2
    assert all(len(loaded.grids[i][t]) == 3 for i in range(2) for t in range(3))
    assert np.array_equal(loaded.allocation_rule.tables[1], sc.allocation_rule.tables[1])


def test_load_rejects_row_not_stochastic(tmp_path, sc):
    doc = scenario_to_dict(sc)
    doc["agents"][0]["kernels"][0][1][0] = [0.59, 0.2, 0.2]
    with pytest.raises(ScenarioError, match="row not stochastic"):
        load_scenario(_write(tmp_path, doc))


def test_load_rejects_decreasing_grid(tmp_path, sc):
    doc = scenario_to_dict(sc)
    doc["agents"][1]["grids"][0] = [1.0, 0.5, 0.0]
    with pytest.raises(ScenarioError, match="grid not increasing"):
        load_scenario(_write(tmp_path, doc))


def test_load_names_missing_field(tmp_path, sc):
    doc = scenario_to_dict(sc)
    del doc["horizon"]
    with pytest.raises(ScenarioError, match="horizon"):
        load_scenario(_write(tmp_path, doc))


def test_grid_needs_two_points():
    with pytest.raises(ScenarioError):
        PreferenceGrid([0.0], 0)


def test_kernel_positivity():
    tab = np.array([[[1.0, 0.0, 0.0]], [[0.2, 0.3, 0.5]], [[0.2, 0.3, 0.5]]])
    with pytest.raises(ScenarioError):
        TransitionKernel(tab)


@pytest.mark.parametrize("omega, expected", [(0.1, 0.0), (0.5, 0.5), (0.2, 0.0), (0.51, 1.0), (0.999, 1.0)])
def test_inverse_cdf(omega, expected):
    assert inverse_cdf([0.2, 0.3, 0.5], [0.0, 0.5, 1.0], omega) == expected


def test_identity_kernel_keeps_type_constant():
    k = smoothed_identity(3, 1e-9, 3)
    sc = build_scenario([[0.0, 0.5, 1.0]] * 2, 2, [k, k], [np.full(3, 1 / 3)] * 2, [0.0, 0.5, 1.0])
    tr = simulate(sc, seed=5, n_paths=200)
    assert np.all(tr.true_x == tr.true_x[:, :, :1])
    assert np.all(tr.stop_time == 2)


def test_sample_path_deterministic(sc, synth):
    a = sample_path(sc, seed=42, rules=synth.rules, stopping_rules=synth.epsilon)
    b = sample_path(sc, seed=42, rules=synth.rules, stopping_rules=synth.epsilon)
    for f in ("true_x", "report_x", "allocation", "payment"):
        assert np.array_equal(getattr(a, f), getattr(b, f), equal_nan=True)
    assert np.array_equal(a.stop_time, b.stop_time)


def test_lowest_thresholds_stop_only_at_end(sc):
    eps = np.array([[-0.5, -0.5, 1.0]] * 2)
    tr = simulate(sc, seed=1, n_paths=500, stopping=eps)
    assert np.all(tr.stop_time == 2)
    # the threshold at the lowest point binds only for the lowest type
    eps_low = np.array([[0.0, 0.0, 1.0]] * 2)
    tr = simulate(sc, seed=1, n_paths=500, stopping=eps_low)
    early = tr.stop_time < 2
    assert np.all(tr.true_x[early[:, 0], 0, 0][tr.stop_time[early[:, 0], 0] == 0] == 0.0)


def test_departed_agents_are_blank(sc):
    tr = simulate(sc, seed=3, n_paths=300, stopping=np.array([[1.0, 1.0, 1.0], [-0.5, -0.5, 1.0]]))
    assert np.all(tr.stop_time[:, 0] == 0)
    assert np.all(np.isnan(tr.true_x[:, 0, 1:]))
    # alone in the market agent 1 always wins
    assert np.all(tr.allocation[:, 1, 1:] == 1.0)


def test_missing_strategy_entry(sc):
    strategies = [[np.array([0, 1, 2]), np.array([0, -1, 2]), np.array([0, 1, 2])], None]
    with pytest.raises(ScenarioError, match="missing entry"):
        simulate(sc, strategies=strategies, seed=0, n_paths=200)


def test_misreport_strategy_is_applied(sc):
    always_top = [[np.array([2, 2, 2])] * 3, None]
    tr = simulate(sc, strategies=always_top, seed=0, n_paths=50)
    assert np.all(tr.report_x[:, 0, :] == 1.0)


def test_update_belief_uniform_when_uninformative():
    k = persistence_kernel(3, 1 / 3, 3)
    sc = build_scenario([[0.0, 0.5, 1.0]] * 2, 2, [k, k], [np.full(3, 1 / 3)] * 2, [0.0, 0.5, 1.0],
                        rule="constant-split")
    post = update_belief(np.full(3, 1 / 3), 1, sc.allocation_rule.present_table(0)[1, 1, 0], sc, 0, 0)
    assert np.allclose(post, 1 / 3, atol=1e-12)


def test_update_belief_point_mass_gives_kernel_row(sc):
    post = update_belief(np.array([1.0, 0.0, 0.0]), 2, 2, sc, 0, 0)
    assert np.allclose(post, sc.kernels[1][0].table[0, 0], atol=1e-12)


def test_update_belief_zero_normalizer_is_uniform(sc):
    # a top report against a lowest-type opponent always wins; observing a loss has probability zero
    post = update_belief(np.array([1.0, 0.0, 0.0]), 2, 0, sc, 0, 0)
    assert np.allclose(post, 1 / 3)


def test_update_belief_shape_mismatch(sc):
    with pytest.raises(ScenarioError):
        update_belief(np.full(4, 0.25), 0, 0, sc, 0, 0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6))
def test_inverse_cdf_histogram(weights):
    row = np.array(weights) / np.sum(weights)
    N = 1_000_000
    omegas = (np.arange(N) + 0.5) / N
    counts = np.bincount(inverse_cdf_index(row, omegas), minlength=row.size)
    se = np.sqrt(N * row * (1 - row))
    assert np.all(np.abs(counts - N * row) <= 3 * se + 1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**64 - 1))
def test_simulation_reproducible(seed):
    from dynmech.scenario import s1
    sc = s1()
    a = simulate(sc, seed=seed, n_paths=20, stopping=np.array([[0.5, 0.0, 1.0]] * 2))
    b = simulate(sc, seed=seed, n_paths=20, stopping=np.array([[0.5, 0.0, 1.0]] * 2))
    assert np.array_equal(a.true_idx, b.true_idx) and np.array_equal(a.stop_time, b.stop_time)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3), st.integers(0, 2), st.integers(0, 2),
       st.integers(0, 1))
def test_update_belief_normalized(prior, report, level, t):
    from dynmech.scenario import s1
    sc = s1()
    p = np.array(prior) + 1e-3
    post = update_belief(p / p.sum(), report, level, sc, 1, t)
    assert np.all(post >= 0)
    assert abs(post.sum() - 1.0) <= 1e-12
