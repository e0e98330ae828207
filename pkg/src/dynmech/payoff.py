"""Interim and ex-ante payoffs, the continuing value g and the auxiliary J.

Each agent's problem is reduced to a Markov decision problem over its own type
grid. Other agents are integrated out under the belief that they report
truthfully and stay in the population; their period-t type profile follows the
marginal of the all-truthful joint chain.

Notation used throughout (per agent, per period t):
    A[t][r, l]      probability that report r yields allocation level l
    U[t][x, r]      expected utility of true type x reporting r
    P[t][x, r, y]   next-period type distribution of true x reporting r
    R[t][r], G[t][r]  expected continuation / terminal payment for report r
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .mechanism import MechanismRules
from .scenario import AllocationRule, Scenario

# stop and continue values closer than this (relative) are treated as tied
TIE_TOL = 1e-12


def joint_truthful_chain(scenario: Scenario, sigma: AllocationRule | None = None) -> list[np.ndarray]:
    """Joint type distribution per period when everyone reports truthfully and stays."""
    sigma = sigma or scenario.allocation_rule
    n, T = scenario.n, scenario.T
    dist = scenario.initial_dists[0]
    for i in range(1, n):
        dist = np.multiply.outer(dist, scenario.initial_dists[i])
    out = [dist]
    for t in range(T):
        tab = sigma.present_table(t)
        nxt = np.zeros(scenario.sizes(t + 1))
        for prof in zip(*np.nonzero(dist)):
            levels = tab[prof]
            step = np.array(1.0)
            for i in range(n):
                step = np.multiply.outer(step, scenario.kernels[i][t].table[prof[i], levels[i]])
            nxt += dist[prof] * step
        out.append(nxt)
        dist = nxt
    return out


def others_marginals(scenario: Scenario, agent: int, sigma: AllocationRule | None = None) -> list[np.ndarray]:
    """Belief over the other agents' joint type profile, one table per period."""
    return [d.sum(axis=agent) for d in joint_truthful_chain(scenario, sigma)]


def expect_over_others(table: np.ndarray, agent: int, belief: np.ndarray) -> np.ndarray:
    """E_belief[table[..., r at axis agent, ...]] as a function of r.

    Trailing axes beyond the agent axes are kept.
    """
    moved = np.moveaxis(table, agent, 0)
    k = belief.ndim
    return np.tensordot(moved, belief, axes=(list(range(1, 1 + k)), list(range(k))))


class AllocationModel:
    """Allocation-only quantities of one agent's reduced problem."""

    def __init__(self, scenario: Scenario, agent: int, sigma: AllocationRule | None = None,
                 beliefs: list[np.ndarray] | None = None):
        self.scenario = scenario
        self.agent = agent
        self.sigma = sigma or scenario.allocation_rule
        self.T = scenario.T
        self.beliefs = beliefs if beliefs is not None else others_marginals(scenario, agent, self.sigma)
        L = self.sigma.levels.size
        grids = [scenario.points(agent, t) for t in range(self.T + 1)]
        self.grids = grids
        util = scenario.utilities[agent]
        self.utab = list(util.tables)
        self.du = util.derivative(grids)
        self.A, self.U, self.dU, self.P, self.dF = [], [], [], [], []
        for t in range(self.T + 1):
            lev = self.sigma.present_table(t)[..., agent]
            onehot = (lev[..., None] == np.arange(L)).astype(float)
            A = expect_over_others(onehot, agent, self.beliefs[t])
            self.A.append(A)
            self.U.append(self.utab[t] @ A.T)
            self.dU.append(self.du[t] @ A.T)
            if t < self.T:
                K = scenario.kernels[agent][t].table
                self.P.append(np.einsum("rl,xly->xry", A, K))
                dcdf = np.gradient(np.cumsum(K, axis=2), grids[t], axis=0)
                self.dF.append(np.einsum("rl,xly->xry", A, dcdf))

    def truthful_kernel(self, t: int) -> np.ndarray:
        m = self.grids[t].size
        return self.P[t][np.arange(m), np.arange(m)]

    def expect(self, t: int, table_t: np.ndarray) -> np.ndarray:
        """Expected value of a joint-report table as a function of own report."""
        return expect_over_others(table_t, self.agent, self.beliefs[t])


class AgentProblem:
    """Reduced stopping/reporting problem of one agent under fixed rules."""

    def __init__(self, scenario: Scenario, rules: MechanismRules, agent: int,
                 model: AllocationModel | None = None):
        self.scenario = scenario
        self.rules = rules
        self.agent = agent
        self.model = model or AllocationModel(scenario, agent, rules.sigma)
        m = self.model
        self.T = scenario.T
        self.R = [m.expect(t, rules.rho[agent][t]) for t in range(self.T + 1)]
        self.G = [m.expect(t, rules.gamma[agent][t]) for t in range(self.T + 1)]
        self.beta = rules.beta[agent]
        self._W = {}
        self._V = None

    # one-period building blocks, indexed [true x, report r]
    def stop_matrix(self, t: int) -> np.ndarray:
        return self.model.U[t] + self.G[t][None, :] + self.beta[t]

    def continue_matrix(self, t: int, v_next: np.ndarray) -> np.ndarray:
        return self.model.U[t] + self.R[t][None, :] + self.model.P[t] @ v_next

    def horizon_values(self, tau: int) -> list[np.ndarray]:
        """Truthful payoff C_s(x, tau) for s = 0..tau (entries s > tau are None)."""
        if tau not in self._W:
            W = [None] * (self.T + 1)
            W[tau] = np.diag(self.stop_matrix(tau)).copy()
            for s in range(tau - 1, -1, -1):
                W[s] = np.diag(self.continue_matrix(s, W[s + 1])).copy()
            self._W[tau] = W
        return self._W[tau]

    def payoff(self, t: int, tau: int, report: Optional[np.ndarray] = None) -> np.ndarray:
        """C_t(x, tau) over the grid; `report` gives a one-shot report index per x."""
        m = self.model.grids[t].size
        r = np.arange(m) if report is None else np.asarray(report)
        if tau == t:
            return self.stop_matrix(t)[np.arange(m), r]
        nxt = self.horizon_values(tau)[t + 1]
        return self.continue_matrix(t, nxt)[np.arange(m), r]

    def optimal_values(self, ties: str = "stop"):
        """Backward induction. Returns (V, stop_value, continue_value, region)."""
        if self._V is not None and ties == "stop":
            return self._V
        T = self.T
        V = [None] * (T + 1)
        stop_v = [None] * (T + 1)
        cont_v = [None] * (T + 1)
        region = [None] * (T + 1)
        stop_v[T] = np.diag(self.stop_matrix(T)).copy()
        V[T] = stop_v[T]
        region[T] = np.ones(V[T].size, dtype=bool)
        for t in range(T - 1, -1, -1):
            stop_v[t] = np.diag(self.stop_matrix(t)).copy()
            cont_v[t] = np.diag(self.continue_matrix(t, V[t + 1])).copy()
            V[t] = np.maximum(stop_v[t], cont_v[t])
            slack = TIE_TOL * np.maximum(1.0, np.abs(V[t]))
            if ties == "stop":
                region[t] = stop_v[t] >= cont_v[t] - slack
            else:
                region[t] = stop_v[t] > cont_v[t] + slack
        out = (V, stop_v, cont_v, region)
        if ties == "stop":
            self._V = out
        return out

    def deviation_values(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Stop and continue values of every (true x, report r) at period t,
        with truthful optimal play afterwards."""
        stop = self.stop_matrix(t)
        if t == self.T:
            return stop, np.full_like(stop, -np.inf)
        V = self.optimal_values()[0]
        return stop, self.continue_matrix(t, V[t + 1])

    def g(self, t: int, report: Optional[np.ndarray] = None, tau: Optional[int] = None) -> np.ndarray:
        """Continuing value over the grid (sup over deterministic horizons when tau is None)."""
        if t >= self.T:
            raise ValueError("no continuation exists at the final period")
        m = self.model.grids[t].size
        r = np.arange(m) if report is None else np.asarray(report)
        taus = range(t + 1, self.T + 1) if tau is None else [tau]
        best = None
        for s in taus:
            val = self.payoff(t, s, report=r)
            best = val if best is None else np.maximum(best, val)
        return best - self.stop_matrix(t)[np.arange(m), r] + self.beta[t]


def build_problems(scenario: Scenario, rules: MechanismRules) -> list[AgentProblem]:
    return [AgentProblem(scenario, rules, i) for i in range(scenario.n)]


# ---------------------------------------------------------------------------
# public operations

@dataclass(frozen=True)
class PayoffQuery:
    agent: int
    t: int
    x: float
    tau: int
    deviation: Optional[float] = None   # one-shot report at period t; None = truthful

    def validate(self, scenario: Scenario) -> tuple[int, int]:
        if not self.t <= self.tau <= scenario.T:
            raise ValueError(f"horizon {self.tau} out of range for period {self.t} (T={scenario.T})")
        grid = scenario.grids[self.agent][self.t]
        xi = grid.index_of(self.x)
        ri = xi if self.deviation is None else grid.index_of(self.deviation)
        return xi, ri


def interim_payoff(scenario: Scenario, rules: MechanismRules, query: PayoffQuery,
                   problem: AgentProblem | None = None) -> float:
    xi, ri = query.validate(scenario)
    prob = problem or AgentProblem(scenario, rules, query.agent)
    m = scenario.grids[query.agent][query.t].points.size
    report = np.arange(m)
    report[xi] = ri
    return float(prob.payoff(query.t, query.tau, report)[xi])


def ex_ante_payoff(scenario: Scenario, rules: MechanismRules, agent: int, tau: Optional[int],
                   problem: AgentProblem | None = None) -> float:
    """E over the initial distribution of C_0(x, tau); tau=None uses the optimal stopping rule."""
    prob = problem or AgentProblem(scenario, rules, agent)
    if tau is None:
        vals = prob.optimal_values()[0][0]
    else:
        if not 0 <= tau <= scenario.T:
            raise ValueError(f"horizon {tau} out of range (T={scenario.T})")
        vals = prob.payoff(0, tau)
    return float(scenario.initial_dists[agent] @ vals)


def continuing_value_g(scenario: Scenario, rules: MechanismRules, agent: int, t: int, x: float,
                       x_report: Optional[float] = None, problem: AgentProblem | None = None) -> float:
    if t >= scenario.T:
        raise ValueError("continuing value is undefined at the final period")
    grid = scenario.grids[agent][t]
    xi = grid.index_of(x)
    prob = problem or AgentProblem(scenario, rules, agent)
    report = np.arange(len(grid))
    if x_report is not None:
        report[xi] = grid.index_of(x_report)
    return float(prob.g(t, report)[xi])


def auxiliary_J(scenario: Scenario, rules: MechanismRules, agent: int, t: int, x: float, tau: int,
                problem: AgentProblem | None = None) -> float:
    if not t <= tau <= scenario.T:
        raise ValueError(f"horizon {tau} out of range for period {t}")
    prob = problem or AgentProblem(scenario, rules, agent)
    return float(auxiliary_J_table(prob, t, tau)[scenario.grids[agent][t].index_of(x)])


def auxiliary_J_table(prob: AgentProblem, t: int, tau: int) -> np.ndarray:
    m = prob.model
    base = np.diag(m.U[t]) + prob.G[t]
    if tau == t:
        return base + prob.beta[t]
    return base + prob.g(t, tau=tau)
