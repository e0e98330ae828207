"""Planner-side evaluation: stopping times, population schedules, the exact and
relaxed planner objectives, participation checks and allocation search.

Population-level quantities are computed on the exact joint chain: the joint
state is every agent's type index, with index m_i marking an agent that has
left. Departures feed back into allocations through the rule's absent entries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .io import atomic_write_csv
from .mechanism import MechanismRules
from .payoff import AgentProblem, AllocationModel, ex_ante_payoff
from .scenario import (AllocationRule, Scenario, ScenarioError, _stop_regions, constant_split,
                       highest_report_wins, reserve_highest_report_wins, simulate)
from .stopping import check_stochastic_dominance, solve_stopping
from .synthesis import synthesize
from .verification import OracleLimits, TOL_EXACT, audit


@dataclass
class ChainSummary:
    """Expectations over the exact joint chain with truthful reports."""

    presence: np.ndarray        # (n, T+1) probability of being present at period t
    stop_prob: np.ndarray       # (n, T+1) probability of stopping at period t
    utility: np.ndarray         # (n,) expected realized utility
    payments: np.ndarray        # (n,) expected payments received
    cp_utility: float           # expected planner utility

    @property
    def tau_star(self) -> np.ndarray:
        return self.stop_prob @ np.arange(self.stop_prob.shape[1])

    @property
    def payoff(self) -> np.ndarray:
        return self.utility + self.payments

    @property
    def cp_objective(self) -> float:
        return float(self.cp_utility - self.payments.sum())


def exact_chain(scenario: Scenario, rules: MechanismRules | None = None, stopping=None,
                allocation_rule: AllocationRule | None = None) -> ChainSummary:
    """Propagate the joint distribution of (types, presence) forward in time.

    `stopping` follows the conventions of `simulate`; when omitted, the
    optimal stopping regions of `rules` are used.
    """
    sigma = allocation_rule or (rules.sigma if rules is not None else scenario.allocation_rule)
    n, T = scenario.n, scenario.T
    if stopping is None and rules is not None:
        stopping = solve_stopping(scenario, rules).region
    regions = _stop_regions(scenario, stopping)
    presence = np.zeros((n, T + 1))
    stop_prob = np.zeros((n, T + 1))
    utility = np.zeros(n)
    payments = np.zeros(n)
    cp_util = 0.0
    dist = {(): 1.0}
    for i in range(n):
        dist = {s + (k,): p * q for s, p in dist.items()
                for k, q in enumerate(scenario.initial_dists[i]) if q > 0}
    for t in range(T + 1):
        sizes = scenario.sizes(t)
        nxt: dict = {}
        for state, p in dist.items():
            here = [state[i] < sizes[i] for i in range(n)]
            lev = sigma.tables[t][state]
            pay_prof = tuple(s if h else 0 for s, h in zip(state, here))
            xs, acts, stops = [], [], []
            for i in range(n):
                if not here[i]:
                    stops.append(True)
                    continue
                presence[i, t] += p
                a = sigma.levels[lev[i]]
                utility[i] += p * scenario.utilities[i].tables[t][state[i], lev[i]]
                xs.append(scenario.points(i, t)[state[i]])
                acts.append(a)
                s = bool(regions[i][t][state[i]])
                stops.append(s)
                if s:
                    stop_prob[i, t] += p
                if rules is not None:
                    if s:
                        payments[i] += p * (rules.gamma[i][t][pay_prof] + rules.beta[i, t])
                    else:
                        payments[i] += p * rules.rho[i][t][pay_prof]
            cp_util += p * scenario.cp_utility.value(np.array(xs), np.array(acts))
            if t == T:
                continue
            branches = {(): p}
            nsizes = scenario.sizes(t + 1)
            for i in range(n):
                if stops[i]:
                    branches = {b + (nsizes[i],): q for b, q in branches.items()}
                else:
                    row = scenario.kernels[i][t].table[state[i], lev[i]]
                    branches = {b + (k,): q * r for b, q in branches.items() for k, r in enumerate(row)}
            for b, q in branches.items():
                nxt[b] = nxt.get(b, 0.0) + q
        dist = nxt
    return ChainSummary(presence, stop_prob, utility, payments, cp_util)


@dataclass
class StoppingTimeEstimate:
    tau_star: np.ndarray
    stderr: np.ndarray
    method: str


def estimate_stopping_times(scenario: Scenario, rules: MechanismRules, solution=None,
                            method: str = "exact_chain", n_samples: int = 100_000,
                            seed: int = 0) -> StoppingTimeEstimate:
    """Expected stop period per agent under truthful reporting.

    method is "exact_chain" (forward propagation of the survival distribution)
    or "monte_carlo" (average of n_samples seeded paths).
    """
    regions = (solution or solve_stopping(scenario, rules)).region
    if method == "exact_chain":
        chain = exact_chain(scenario, rules, regions)
        return StoppingTimeEstimate(chain.tau_star, np.zeros(scenario.n), method)
    if method == "monte_carlo":
        tr = simulate(scenario, rules, None, regions, seed, n_samples)
        st = tr.stop_time.astype(float)
        return StoppingTimeEstimate(st.mean(axis=0), st.std(axis=0, ddof=1) / np.sqrt(n_samples), method)
    raise ValueError(f"unknown method {method!r}")


def monte_carlo_payoffs(scenario: Scenario, rules: MechanismRules, n_samples: int, seed: int,
                        stopping=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of each agent's realized payoff."""
    if stopping is None:
        stopping = solve_stopping(scenario, rules).region
    tot = simulate(scenario, rules, None, stopping, seed, n_samples).total_payoff()
    return tot.mean(axis=0), tot.std(axis=0, ddof=1) / np.sqrt(n_samples)


# ---------------------------------------------------------------------------
# population schedule

def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


@dataclass(frozen=True)
class PopulationSchedule:
    tau_star: np.ndarray
    order: tuple            # order[t]: agent ids present at t, in index order
    index_maps: tuple       # index_maps[t]: dict previous index -> index at t (t = 0: agent id -> index)
    participants: tuple     # I_t as sorted agent-id tuples
    leaving: tuple          # I^S_t
    staying: tuple          # I^Sbar_t

    @property
    def T(self) -> int:
        return len(self.order) - 1


def build_population_schedule(scenario: Scenario, tau_star: Sequence[float]) -> PopulationSchedule:
    """Order survivors by descending expected stop time, ties kept in the
    previous period's order; each agent leaves at its rounded expected stop time."""
    tau = np.asarray(tau_star, dtype=float)
    T = scenario.T
    leave_at = [min(max(_round_half_up(v), 0), T) for v in tau]
    prev = list(range(scenario.n))
    order, maps, part, leave, stay = [], [], [], [], []
    for t in range(T + 1):
        survivors = [i for i in prev if leave_at[i] >= t]
        cur = sorted(survivors, key=lambda i: -tau[i])           # stable
        if t == 0:
            maps.append({i: cur.index(i) for i in cur})
        else:
            maps.append({order[-1].index(i): cur.index(i) for i in cur})
        order.append(tuple(cur))
        part.append(tuple(sorted(cur)))
        leave.append(tuple(sorted(i for i in cur if leave_at[i] == t)))
        stay.append(tuple(sorted(i for i in cur if leave_at[i] > t)))
        prev = cur
    return PopulationSchedule(tau, tuple(order), tuple(maps), tuple(part), tuple(leave), tuple(stay))


# ---------------------------------------------------------------------------
# objectives

def cp_objective(scenario: Scenario, rules: MechanismRules, schedule: PopulationSchedule | None = None,
                 stopping=None) -> float:
    """Expected planner utility minus every payment made, over the exact chain.

    Participation follows the chain's survival probabilities; the schedule is
    accepted for interface symmetry but only orders agents. Passing `stopping`
    holds behaviour fixed while payments vary.
    """
    return exact_chain(scenario, rules, stopping).cp_objective


def _threshold_sensitivity(model: AllocationModel, stop_sets: list[np.ndarray]) -> np.ndarray:
    """Derivative in the initial type of expected utility under a stopping set."""
    T = model.T
    H = np.diag(model.dU[T]).copy()
    for t in range(T - 1, -1, -1):
        m = model.grids[t].size
        du = np.diag(model.dU[t])
        width = np.diff(model.grids[t + 1])
        dF = model.dF[t][np.arange(m), np.arange(m)][:, :-1]
        cont = du + (-dF) @ (width * (H[:-1] + H[1:]) / 2.0)
        H = np.where(stop_sets[t], du, cont)
    return H


def _expected_marginal_utility(model: AllocationModel, stop_sets: list[np.ndarray]) -> np.ndarray:
    """E[sum of du/dx over periods up to the stop | initial type]."""
    T = model.T
    W = np.diag(model.dU[T]).copy()
    for t in range(T - 1, -1, -1):
        du = np.diag(model.dU[t])
        W = np.where(stop_sets[t], du, du + model.truthful_kernel(t) @ W)
    return W


def relaxed_objective(scenario: Scenario, allocation_rule: AllocationRule | None, epsilon,
                      g_weight: str = "one") -> float:
    """Planner utility plus agents' utilities minus the information rent.

    Each agent's rent is sum_k (1 - F0(x_k)) * (x_{k+1} - x_k) * w(x_k), the
    discrete form of E[(1 - F0)/f0 * w]. With g_weight="one", w is the expected
    sum of du/dx up to the threshold stop; with "sensitivity" the chain
    derivative of expected utility in the initial type is used instead.
    """
    if g_weight not in ("one", "sensitivity"):
        raise ValueError("g_weight must be 'one' or 'sensitivity'")
    for i, u in enumerate(scenario.utilities):
        if not u.monotone:
            raise ScenarioError(f"utility of agent {i} is not flagged monotone in the type")
    sigma = allocation_rule or scenario.allocation_rule
    eps = np.asarray(epsilon, dtype=float)
    chain = exact_chain(scenario, None, eps, sigma)
    total = chain.cp_utility + chain.utility.sum()
    for i in range(scenario.n):
        model = AllocationModel(scenario, i, sigma)
        stops = [scenario.points(i, t) <= eps[i, t] for t in range(scenario.T + 1)]
        stops[-1] = np.ones_like(stops[-1])
        w = (_expected_marginal_utility if g_weight == "one" else _threshold_sensitivity)(model, stops)
        grid = scenario.points(i, 0)
        f0 = scenario.initial_dists[i]
        tail = 1.0 - np.cumsum(f0)
        step = np.append(np.diff(grid), 0.0)
        total -= float(np.sum(tail * step * w))
    return float(total)


@dataclass(frozen=True)
class ParticipationVerdict:
    agent: int
    exact_passed: bool
    exact_payoff: float
    sufficient_passed: Optional[bool]     # None when the monotone route does not apply
    lowest_type_payoff: float


def check_participation(scenario: Scenario, rules: MechanismRules) -> list[ParticipationVerdict]:
    """Exact: ex-ante payoff >= 0. Sufficient: the lowest initial type's optimal
    payoff >= 0, applicable with monotone utilities and dominant kernels."""
    dominance = all(v.passed for v in check_stochastic_dominance(scenario, rules.sigma))
    out = []
    for i in range(scenario.n):
        prob = AgentProblem(scenario, rules, i)
        exact = ex_ante_payoff(scenario, rules, i, None, prob)
        low = float(prob.optimal_values()[0][0][0])
        applicable = dominance and scenario.utilities[i].monotone
        out.append(ParticipationVerdict(i, exact >= -TOL_EXACT, exact,
                                        (low >= -TOL_EXACT) if applicable else None, low))
    return out


# ---------------------------------------------------------------------------
# search

def builtin_candidates(scenario: Scenario) -> list[AllocationRule]:
    """Highest-report-wins, constant split and reserve-price variants."""
    raw = [[scenario.points(i, t) for t in range(scenario.T + 1)] for i in range(scenario.n)]
    levels = scenario.levels
    out = [highest_report_wins(raw, levels), constant_split(raw, levels)]
    m = min(len(scenario.grids[i][t]) for i in range(scenario.n) for t in range(scenario.T + 1))
    for r in range(1, m):
        out.append(reserve_highest_report_wins(raw, levels, r))
    return out


@dataclass
class CandidateRecord:
    candidate_id: int
    name: str
    passed: bool
    delta_ic: float
    cp_objective: float
    relaxed_objective: float
    tau_star: np.ndarray
    audit: object = field(repr=False, default=None)
    rules: MechanismRules = field(repr=False, default=None)


@dataclass
class SearchResult:
    best: CandidateRecord
    records: list
    no_pass: bool          # True when no candidate passed; best is then the best failing one

    def rows(self):
        for r in self.records:
            yield (r.candidate_id, r.name, "PASS" if r.passed else "FAIL", float(r.delta_ic),
                   float(r.cp_objective), float(r.relaxed_objective), *map(float, r.tau_star))


def search_allocation(scenario: Scenario, candidate_space: Sequence[AllocationRule] | None = None,
                      budget: int | None = None, tol_ic: float = TOL_EXACT,
                      oracle_limits: OracleLimits | None = None, run_oracle: bool = False) -> SearchResult:
    """Synthesize, audit and score each candidate in order; return the best
    passing one by planner objective (first wins ties)."""
    cands = list(candidate_space) if candidate_space is not None else builtin_candidates(scenario)
    if budget is not None:
        cands = cands[:budget]
    if not cands:
        raise ValueError("empty candidate space")
    records = []
    for k, sigma in enumerate(cands):
        syn = synthesize(scenario, sigma)
        rep = audit(scenario, syn.rules, syn.phi, tol_ic, oracle_limits, run_oracle)
        sol = solve_stopping(scenario, syn.rules)
        chain = exact_chain(scenario, syn.rules, sol.region)
        try:
            relaxed = relaxed_objective(scenario, sigma, _fill_never(scenario, sol.epsilon))
        except ScenarioError:
            relaxed = float("nan")
        records.append(CandidateRecord(k, sigma.name, rep.passed, rep.delta_ic, chain.cp_objective,
                                       relaxed, chain.tau_star, rep, syn.rules))
    passing = [r for r in records if r.passed]
    pool = passing or records
    best = max(pool, key=lambda r: (r.cp_objective, -r.candidate_id))
    return SearchResult(best, records, not passing)


def _fill_never(scenario: Scenario, eps: np.ndarray) -> np.ndarray:
    # non-threshold regions have no threshold; treat them as never stopping
    out = np.array(eps, dtype=float)
    for i in range(scenario.n):
        for t in range(scenario.T + 1):
            if np.isnan(out[i, t]):
                g = scenario.points(i, t)
                out[i, t] = g[0] - (g[1] - g[0])
    return out


def write_search_csv(result: SearchResult, scenario: Scenario, path) -> None:
    header = ("candidate_id", "name", "verdict", "delta_ic", "cp_objective", "relaxed_objective",
              *(f"tau_star_{i}" for i in range(scenario.n)))
    atomic_write_csv(Path(path), header, result.rows())
