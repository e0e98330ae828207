"""Characterizing functions and payment synthesis.

The sensitivity kernel h(tau, x) is the derivative of the truthful payoff with
horizon tau with respect to the true type, holding reports fixed. The two
characterizing functions integrate it from an anchor point; payments are then
read off them.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mechanism import MechanismRules
from .payoff import AgentProblem, AllocationModel
from .scenario import AllocationRule, Scenario, ScenarioError
from .stopping import is_never, solve_stopping

FEASIBILITY_TOL = 1e-9


def sensitivity_tables(model: AllocationModel) -> list[np.ndarray]:
    """H[t][x, tau] for tau >= t (NaN below t).

    H[t][x, t] is dU/dx at the truthful report. For tau > t the next-period
    contribution integrates -dF/dx against H[t+1] by summation by parts, with
    the trapezoid rule on each grid interval.
    """
    T = model.T
    H = [None] * (T + 1)
    for t in range(T, -1, -1):
        m = model.grids[t].size
        tab = np.full((m, T + 1), np.nan)
        du = np.diag(model.dU[t])
        tab[:, t] = du
        if t < T:
            nxt = model.grids[t + 1]
            width = np.diff(nxt)
            dF = model.dF[t][np.arange(m), np.arange(m)][:, :-1]      # (m, m_next - 1)
            for tau in range(t + 1, T + 1):
                h_next = H[t + 1][:, tau]
                incr = width * (h_next[:-1] + h_next[1:]) / 2.0
                tab[:, tau] = du + (-dF) @ incr
        H[t] = tab
    return H


def deviation_sensitivity(model: AllocationModel, H: list[np.ndarray], t: int, tau: int) -> np.ndarray:
    """h(tau, report x; true y) as a matrix [true y, report x]."""
    du = model.dU[t]
    if tau == t:
        return du
    nxt = model.grids[t + 1]
    h_next = H[t + 1][:, tau]
    incr = np.diff(nxt) * (h_next[:-1] + h_next[1:]) / 2.0
    return du + np.einsum("yxk,k->yx", -model.dF[t][:, :, :-1], incr)


def cumulative_trapezoid(values: np.ndarray, grid: np.ndarray, anchor: int) -> np.ndarray:
    c = np.concatenate([[0.0], np.cumsum(np.diff(grid) * (values[1:] + values[:-1]) / 2.0)])
    return c - c[anchor]


@dataclass(frozen=True)
class CharacterizingFunctions:
    phi_S: tuple        # phi_S[i][t]: over the period-t grid
    phi_Sbar: tuple
    h: tuple            # h[i][t]: (m_t, T + 1), NaN for tau < t
    anchor: np.ndarray  # anchor values, shape (n, T + 1)

    def gap(self, i: int, t: int) -> np.ndarray:
        """phi_Sbar - phi_S."""
        return self.phi_Sbar[i][t] - self.phi_S[i][t]


def derivative_kernel_h(scenario: Scenario, allocation_rule: AllocationRule | None, agent: int,
                        t: int, x: float, tau: int) -> float:
    if not t <= tau <= scenario.T:
        raise ValueError(f"horizon {tau} out of range for period {t}")
    model = AllocationModel(scenario, agent, allocation_rule)
    H = sensitivity_tables(model)
    return float(H[t][scenario.grids[agent][t].index_of(x), tau])


def _anchor_indices(scenario: Scenario, anchor_policy) -> np.ndarray:
    n, T = scenario.n, scenario.T
    idx = np.zeros((n, T + 1), dtype=int)
    if isinstance(anchor_policy, str):
        if anchor_policy != "lower_bound":
            raise ValueError(f"unknown anchor policy {anchor_policy!r}")
        return idx
    table = np.asarray(anchor_policy, dtype=float)
    if table.shape != (n, T + 1):
        raise ValueError(f"custom anchor table must have shape ({n}, {T + 1})")
    for i in range(n):
        for t in range(T + 1):
            idx[i, t] = scenario.grids[i][t].index_of(table[i, t])
    return idx


def build_characterizing(scenario: Scenario, allocation_rule: AllocationRule | None = None,
                         anchor_policy="lower_bound", models: list[AllocationModel] | None = None
                         ) -> CharacterizingFunctions:
    sigma = allocation_rule or scenario.allocation_rule
    anchors = _anchor_indices(scenario, anchor_policy)
    models = models or [AllocationModel(scenario, i, sigma) for i in range(scenario.n)]
    phi_S, phi_Sbar, hs = [], [], []
    for i, model in enumerate(models):
        H = sensitivity_tables(model)
        pS, pB = [], []
        for t in range(scenario.T + 1):
            grid = model.grids[t]
            pS.append(cumulative_trapezoid(H[t][:, t], grid, anchors[i, t]))
            candidates = [cumulative_trapezoid(H[t][:, tau], grid, anchors[i, t])
                          for tau in range(t, scenario.T + 1)]
            pB.append(np.max(candidates, axis=0))
        phi_S.append(tuple(pS))
        phi_Sbar.append(tuple(pB))
        hs.append(tuple(H))
    anchor_vals = np.array([[scenario.points(i, t)[anchors[i, t]] for t in range(scenario.T + 1)]
                            for i in range(scenario.n)])
    return CharacterizingFunctions(tuple(phi_S), tuple(phi_Sbar), tuple(hs), anchor_vals)


def _own_index_grid(shape: tuple, agent: int) -> np.ndarray:
    m = shape[agent]
    s = [1] * len(shape)
    s[agent] = m
    return np.broadcast_to(np.arange(m).reshape(s), shape)


def build_rho(scenario: Scenario, allocation_rule: AllocationRule | None,
              phi: CharacterizingFunctions) -> tuple:
    sigma = allocation_rule or scenario.allocation_rule
    out = []
    for i in range(scenario.n):
        per = []
        for t in range(scenario.T + 1):
            shape = scenario.sizes(t)
            if t == scenario.T:
                per.append(np.zeros(shape))
                continue
            lev = sigma.present_table(t)[..., i]
            xi = _own_index_grid(shape, i)
            K = scenario.kernels[i][t].table
            k_phi = K @ phi.phi_Sbar[i][t + 1]                  # (m, L)
            u = scenario.utilities[i].tables[t]
            per.append(phi.phi_Sbar[i][t][xi] - k_phi[xi, lev] - u[xi, lev])
        out.append(tuple(per))
    return tuple(out)


def build_gamma(scenario: Scenario, allocation_rule: AllocationRule | None,
                phi: CharacterizingFunctions) -> tuple:
    sigma = allocation_rule or scenario.allocation_rule
    out = []
    for i in range(scenario.n):
        per = []
        for t in range(scenario.T + 1):
            shape = scenario.sizes(t)
            lev = sigma.present_table(t)[..., i]
            xi = _own_index_grid(shape, i)
            u = scenario.utilities[i].tables[t]
            per.append(phi.phi_S[i][t][xi] - u[xi, lev])
        out.append(tuple(per))
    return tuple(out)


def _threshold_indices(scenario: Scenario, epsilon) -> np.ndarray:
    eps = np.asarray(epsilon, dtype=float)
    n, T = scenario.n, scenario.T
    if eps.shape != (n, T + 1):
        raise ValueError(f"epsilon must have shape ({n}, {T + 1})")
    idx = np.zeros((n, T + 1), dtype=int)
    for i in range(n):
        for t in range(T + 1):
            grid = scenario.points(i, t)
            if is_never(eps[i, t], grid):
                # max(x, below-lowest) = x, and conditioning falls back to the lowest point
                idx[i, t] = 0
            else:
                try:
                    idx[i, t] = scenario.grids[i][t].index_of(eps[i, t])
                except ScenarioError as exc:
                    raise ValueError(f"threshold for agent {i}, period {t} is off-grid: {eps[i, t]}") from exc
    return idx


def _required_beta(model: AllocationModel, phi: CharacterizingFunctions, agent: int,
                   eps_idx: np.ndarray) -> np.ndarray:
    """Expected telescoping sum of the characterizing-function gap along the
    truthful chain started at the threshold, evaluated at max(x, threshold)."""
    T = model.T
    diff = [phi.phi_S[agent][s] - phi.phi_Sbar[agent][s] for s in range(T + 1)]
    capped = [diff[s][np.maximum(np.arange(diff[s].size), eps_idx[s])] for s in range(T + 1)]
    beta = np.zeros(T + 1)
    for t in range(T):
        dist = np.zeros(model.grids[t].size)
        dist[eps_idx[t]] = 1.0
        total = 0.0
        for s in range(t, T):
            before = dist @ capped[s]
            dist = dist @ model.truthful_kernel(s)
            total += dist @ capped[s + 1] - before
        beta[t] = total
    return beta


def build_beta(scenario: Scenario, allocation_rule: AllocationRule | None,
               phi: CharacterizingFunctions, epsilon, models: list[AllocationModel] | None = None
               ) -> np.ndarray:
    sigma = allocation_rule or scenario.allocation_rule
    idx = _threshold_indices(scenario, epsilon)
    models = models or [AllocationModel(scenario, i, sigma) for i in range(scenario.n)]
    return np.array([_required_beta(models[i], phi, i, idx[i]) for i in range(scenario.n)])


@dataclass
class FeasibilityReport:
    passed: bool
    residuals: np.ndarray                 # (n, T + 1)
    mode: str
    required: np.ndarray                  # beta sequences that make residuals vanish
    solutions: list = field(default_factory=list)      # zero-price mode: solving thresholds per agent
    g_at_top: Optional[np.ndarray] = None              # no-exit mode
    member: Optional[list] = None                      # no-exit mode, per agent
    global_intersection_empty: Optional[bool] = None


def beta_feasible_set_check(scenario: Scenario, allocation_rule: AllocationRule | None,
                            phi: CharacterizingFunctions, epsilon, candidate_beta=None,
                            mode: str = "check", rules: MechanismRules | None = None,
                            tol: float = FEASIBILITY_TOL) -> FeasibilityReport:
    """Residual of the posted-price feasibility equations.

    mode="check": residuals of candidate_beta against the thresholds.
    mode="zero": candidate is zero; also scans every grid-valued threshold
        function for one that solves the equations without posted prices.
    mode="no-exit": thresholds at the top of every grid; compares the
        continuing value at the top point with the required prices, and tests
        whether one price sequence can serve all agents.
    """
    sigma = allocation_rule or scenario.allocation_rule
    n, T = scenario.n, scenario.T
    models = [AllocationModel(scenario, i, sigma) for i in range(n)]
    if mode == "no-exit":
        epsilon = np.array([[scenario.points(i, t)[-1] for t in range(T + 1)] for i in range(n)])
    required = build_beta(scenario, sigma, phi, epsilon, models)
    if mode == "check":
        if candidate_beta is None:
            raise ValueError("candidate_beta is required in check mode")
        cand = np.asarray(candidate_beta, dtype=float)
    elif mode in ("zero",):
        cand = np.zeros((n, T + 1))
    elif mode == "no-exit":
        if rules is None:
            rules = MechanismRules(sigma, build_rho(scenario, sigma, phi),
                                   build_gamma(scenario, sigma, phi), required)
        g_top = np.zeros((n, T + 1))
        for i in range(n):
            prob = AgentProblem(scenario, rules, i, models[i])
            for t in range(T):
                g_top[i, t] = prob.g(t)[-1]
        cand = g_top
    else:
        raise ValueError(f"unknown mode {mode!r}")
    residuals = cand - required
    report = FeasibilityReport(bool(np.all(np.abs(residuals) <= tol)), residuals, mode, required)
    if mode == "zero":
        for i in range(n):
            sols = []
            choices = [range(scenario.points(i, t).size) for t in range(T)]
            for combo in itertools.product(*choices):
                idx = np.array(list(combo) + [scenario.points(i, T).size - 1])
                req = _required_beta(models[i], phi, i, idx)
                if np.all(np.abs(req) <= tol):
                    sols.append(tuple(float(scenario.points(i, t)[k]) for t, k in enumerate(idx)))
            report.solutions.append(sols)
    if mode == "no-exit":
        report.g_at_top = cand
        report.member = [bool(np.all(np.abs(residuals[i]) <= tol)) for i in range(n)]
        spread = np.max(required, axis=0) - np.min(required, axis=0)
        report.global_intersection_empty = bool(np.any(spread > tol))
    return report


def threshold_identity_residuals(scenario: Scenario, rules: MechanismRules, epsilon=None) -> np.ndarray:
    """beta_t(t) - g(eps(t)) per (agent, t < T); NaN where eps(t) is not interior.

    Without an explicit table the mechanism's own thresholds are used.
    """
    if epsilon is None:
        epsilon = solve_stopping(scenario, rules).epsilon
    eps = np.asarray(epsilon, dtype=float)
    out = np.full((scenario.n, scenario.T), np.nan)
    for i in range(scenario.n):
        prob = AgentProblem(scenario, rules, i)
        for t in range(scenario.T):
            grid = scenario.points(i, t)
            e = eps[i, t]
            if np.isnan(e) or not grid[0] < e < grid[-1]:
                continue
            k = scenario.grids[i][t].index_of(e)
            out[i, t] = rules.beta[i, t] - prob.g(t)[k]
    return out


@dataclass
class SynthesisResult:
    rules: MechanismRules
    phi: CharacterizingFunctions
    target_epsilon: np.ndarray
    epsilon: np.ndarray             # thresholds of the synthesized mechanism
    identity: np.ndarray            # beta_t - g(eps_t) at interior thresholds, NaN elsewhere

    @property
    def consistent(self) -> bool:
        """True when the mechanism's thresholds equal the targets below the final period."""
        a, b = self.epsilon[:, :-1], self.target_epsilon[:, :-1]
        return bool(np.all(np.isclose(a, b, rtol=0.0, atol=1e-12)))

    @property
    def identity_max(self) -> float:
        vals = np.abs(self.identity[~np.isnan(self.identity)])
        return float(vals.max()) if vals.size else 0.0


def synthesize(scenario: Scenario, allocation_rule: AllocationRule | None = None,
               anchor_policy="lower_bound", epsilon=None) -> SynthesisResult:
    """Payments for an allocation rule.

    When no target thresholds are given they are taken from the stopping
    problem of the mechanism with zero posted prices.
    """
    sigma = allocation_rule or scenario.allocation_rule
    models = [AllocationModel(scenario, i, sigma) for i in range(scenario.n)]
    phi = build_characterizing(scenario, sigma, anchor_policy, models)
    rho = build_rho(scenario, sigma, phi)
    gamma = build_gamma(scenario, sigma, phi)
    no_price = MechanismRules(sigma, rho, gamma, np.zeros((scenario.n, scenario.T + 1)))
    if epsilon is None:
        sol = solve_stopping(scenario, no_price,
                             problems=[AgentProblem(scenario, no_price, i, models[i]) for i in range(scenario.n)])
        epsilon = np.array(sol.epsilon)
        for i in range(scenario.n):
            for t in range(scenario.T + 1):
                if np.isnan(epsilon[i, t]):
                    # non-threshold region: fall back to the lowest point
                    epsilon[i, t] = scenario.points(i, t)[0]
    epsilon = np.asarray(epsilon, dtype=float)
    beta = build_beta(scenario, sigma, phi, epsilon, models)
    rules = no_price.replace(beta=beta)
    solved = solve_stopping(scenario, rules,
                            problems=[AgentProblem(scenario, rules, i, models[i]) for i in range(scenario.n)])
    residuals = threshold_identity_residuals(scenario, rules, solved.epsilon)
    return SynthesisResult(rules, phi, epsilon, solved.epsilon, residuals)


def consistent_targets(scenario: Scenario, allocation_rule: AllocationRule | None = None,
                       limit: int = 4096) -> list[np.ndarray]:
    """Grid-valued threshold targets that the synthesized mechanism reproduces.

    Every agent uses the same target index pattern; only desk-scale instances
    are enumerated.
    """
    choices = [range(min(scenario.points(i, t).size for i in range(scenario.n))) for t in range(scenario.T)]
    out = []
    for k, combo in enumerate(itertools.product(*choices)):
        if k >= limit:
            break
        eps = np.array([[scenario.points(i, t)[c] for t, c in enumerate(combo)] + [scenario.points(i, scenario.T)[-1]]
                        for i in range(scenario.n)])
        res = synthesize(scenario, allocation_rule, epsilon=eps)
        if res.consistent:
            out.append(eps)
    return out
