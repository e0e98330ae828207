"""Honesty audits: distance functions, sufficient and relaxed conditions, the
one-shot deviation audit, an exhaustive multi-period deviation oracle and the
delta-IC measure."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .io import atomic_write_csv, atomic_write_json
from .mechanism import MechanismRules
from .payoff import AgentProblem, AllocationModel, build_problems
from .scenario import AllocationRule, Scenario
from .synthesis import CharacterizingFunctions, deviation_sensitivity, sensitivity_tables

TOL_EXACT = 1e-8
TOL_FD = 1e-6


class OracleBudgetError(RuntimeError):
    """The exhaustive strategy space exceeds the configured limits."""


# ---------------------------------------------------------------------------
# distances

def distance_S(scenario: Scenario, allocation_rule: AllocationRule | None, agent: int, t: int,
               y: float, x: float, others_profile=None, model: AllocationModel | None = None) -> float:
    """u(y, sigma(y, .)) - u(x, sigma(y, .)); expected over the belief when no profile is given."""
    grid = scenario.grids[agent][t]
    yi, xi = grid.index_of(y), grid.index_of(x)
    sigma = allocation_rule or scenario.allocation_rule
    if others_profile is not None:
        prof = list(others_profile)
        prof.insert(agent, yi)
        lev = sigma.present_table(t)[tuple(prof)][agent]
        u = scenario.utilities[agent].tables[t]
        return float(u[yi, lev] - u[xi, lev])
    model = model or AllocationModel(scenario, agent, sigma)
    return float(model.U[t][yi, yi] - model.U[t][xi, yi])


def _stop_accumulation(prob: AgentProblem, tau: int) -> list:
    """Truthful expected utilities from s to tau plus terminal gamma (no rho, no beta)."""
    m = prob.model
    z = [None] * (prob.T + 1)
    z[tau] = np.diag(m.U[tau]) + prob.G[tau]
    for s in range(tau - 1, -1, -1):
        z[s] = np.diag(m.U[s]) + m.truthful_kernel(s) @ z[s + 1]
    return z


def distance_Sbar_matrix(prob: AgentProblem, t: int, tau: int) -> np.ndarray:
    """d^Sbar(y, x, tau) as a matrix [y, x].

    The second expectation keeps the report y at period t (allocation and
    hence kernel row follow the report) while the true type is x.
    """
    if tau <= t:
        raise ValueError("the continuation distance needs tau > t")
    m = prob.model
    z = _stop_accumulation(prob, tau)
    price = np.max(prob.beta[tau:])
    own = z[t]                                                     # indexed by y
    mixed = m.U[t] + m.P[t] @ z[t + 1]                             # [true x, report y]
    return price + own[:, None] - mixed.T


def distance_Sbar(scenario: Scenario, rules: MechanismRules, agent: int, t: int, y: float, x: float,
                  tau: int, problem: AgentProblem | None = None) -> float:
    if tau <= t or tau > scenario.T:
        raise ValueError(f"horizon {tau} must satisfy {t} < tau <= {scenario.T}")
    grid = scenario.grids[agent][t]
    prob = problem or AgentProblem(scenario, rules, agent)
    return float(distance_Sbar_matrix(prob, t, tau)[grid.index_of(y), grid.index_of(x)])


# ---------------------------------------------------------------------------
# characterizing functions implied by a set of rules

def implied_characterizing(prob: AgentProblem) -> tuple[list, list]:
    """phi_S and phi_Sbar recovered from the payment tables.

    gamma pins phi_S directly; rho pins phi_Sbar backwards from the terminal
    equality phi_Sbar = phi_S at the final period.
    """
    m = prob.model
    T = prob.T
    phi_S = [prob.G[t] + np.diag(m.U[t]) for t in range(T + 1)]
    phi_B = [None] * (T + 1)
    phi_B[T] = phi_S[T].copy()
    for t in range(T - 1, -1, -1):
        phi_B[t] = prob.R[t] + np.diag(m.U[t]) + m.truthful_kernel(t) @ phi_B[t + 1]
    return phi_S, phi_B


@dataclass
class ConditionVerdict:
    name: str
    passed: bool
    worst_margin: float                 # most negative slack (>= -tol when passing)
    witness: Optional[dict] = None


def _scan_pairs(margin_fn, scenario, agent_range, periods, name, tol):
    worst, witness = np.inf, None
    for i in agent_range:
        for t in periods(i):
            M = margin_fn(i, t)                     # [y, x]
            k = np.unravel_index(np.argmin(M), M.shape)
            if M[k] < worst:
                grid = scenario.points(i, t)
                worst = float(M[k])
                witness = {"agent": i, "period": t, "y": float(grid[k[0]]), "x": float(grid[k[1]]),
                           "margin": worst}
    if worst == np.inf:
        worst = 0.0
    return ConditionVerdict(name, worst >= -tol, worst, witness if worst < -tol else None)


def check_sufficient(scenario: Scenario, rules: MechanismRules, phi: CharacterizingFunctions | None = None,
                     tol: float = TOL_EXACT, problems: list[AgentProblem] | None = None) -> dict:
    """Verdicts for the three sufficient conditions.

    The characterizing functions are those implied by the payments, so a
    corrupted payment table shows up here even when phi is the one the rules
    were built from. When phi is supplied its terminal gap is checked too.
    """
    problems = problems or build_problems(scenario, rules)
    implied = [implied_characterizing(p) for p in problems]
    T = scenario.T

    def margin_stop(i, t):
        U = problems[i].model.U[t]
        dS = np.diag(U)[:, None] - U.T                    # [y, x] = U[y,y] - U[x,y]
        pS = implied[i][0][t]
        return dS - (pS[:, None] - pS[None, :])

    def margin_continue(i, t):
        best = np.max([distance_Sbar_matrix(problems[i], t, tau) for tau in range(t + 1, T + 1)], axis=0)
        pB = implied[i][1][t]
        return best - (pB[:, None] - pB[None, :])

    c_stop = _scan_pairs(margin_stop, scenario, range(scenario.n), lambda i: range(T + 1), "stop", tol)
    c_continue = _scan_pairs(margin_continue, scenario, range(scenario.n), lambda i: range(T), "continue", tol)
    worst, witness = 0.0, None
    for i in range(scenario.n):
        for t in range(T + 1):
            gap = implied[i][1][t] - implied[i][0][t]
            if t == T and phi is not None:
                gap = np.minimum(gap, -np.abs(phi.gap(i, T)))
            k = int(np.argmin(gap))
            if gap[k] < worst:
                worst = float(gap[k])
                witness = {"agent": i, "period": t, "x": float(scenario.points(i, t)[k]), "margin": worst}
    c_terminal = ConditionVerdict("terminal", worst >= -tol, worst, witness if worst < -tol else None)
    return {"stop": c_stop, "continue": c_continue, "terminal": c_terminal}


def check_relaxed(scenario: Scenario, rules: MechanismRules, phi: CharacterizingFunctions | None = None,
                  tol: float = TOL_FD, problems: list[AgentProblem] | None = None) -> dict:
    """Sensitivity-kernel conditions that imply the first two sufficient conditions.

    h(tau, x; y) denotes the sensitivity of a type-y agent that reports x.
    """
    problems = problems or build_problems(scenario, rules)
    T = scenario.T
    H = [phi.h[i] if phi is not None else sensitivity_tables(p.model) for i, p in enumerate(problems)]

    def diff(i, t):
        g = scenario.points(i, t)
        return g[:, None] - g[None, :]                   # [y, x] = y - x

    def margin_relaxed_stop(i, t):
        dev = deviation_sensitivity(problems[i].model, H[i], t, t)   # [true y, report x]
        own = H[i][t][:, t]
        return (own[:, None] - dev) * diff(i, t)

    def margin_relaxed_continue(i, t):
        m = problems[i].model
        beta = problems[i].beta
        devs = {tau: deviation_sensitivity(m, H[i], t, tau) for tau in range(t + 1, T + 1)}
        sup_dev = np.max([devs[tau] for tau in devs], axis=0)
        sup_own = np.nanmax(H[i][t][:, t:], axis=1)
        lhs = (sup_dev - sup_own[:, None]) * diff(i, t)
        rhs = np.max([np.max(beta[tau:]) + (H[i][t][:, tau][:, None] - devs[tau]) * diff(i, t)
                      for tau in devs], axis=0)
        return rhs - lhs

    return {"relaxed_stop": _scan_pairs(margin_relaxed_stop, scenario, range(scenario.n), lambda i: range(T + 1), "relaxed_stop", tol),
            "relaxed_continue": _scan_pairs(margin_relaxed_continue, scenario, range(scenario.n), lambda i: range(T), "relaxed_continue", tol)}


# ---------------------------------------------------------------------------
# deviation audits

@dataclass
class OneShotResult:
    gaps: list                 # gaps[i][t]: matrix [true x, report] (diagonal zero)
    worst_gap: float
    witness: Optional[dict]
    passed: bool
    terminal_ok: bool


def one_shot_audit(scenario: Scenario, rules: MechanismRules, tol: float = TOL_EXACT,
                   problems: list[AgentProblem] | None = None) -> OneShotResult:
    problems = problems or build_problems(scenario, rules)
    gaps, worst, witness = [], -np.inf, None
    terminal_ok = True
    for prob in problems:
        V = prob.optimal_values()[0]
        per = []
        for t in range(scenario.T + 1):
            stop, cont = prob.deviation_values(t)
            gap = np.maximum(stop, cont) - V[t][:, None]
            np.fill_diagonal(gap, 0.0)
            per.append(gap)
            if t == scenario.T:
                terminal_ok &= bool(np.all(stop - np.diag(stop)[:, None] <= tol))
            k = np.unravel_index(np.argmax(gap), gap.shape)
            if gap[k] > worst:
                grid = scenario.points(prob.agent, t)
                worst = float(gap[k])
                witness = {"agent": prob.agent, "period": t, "true_x": float(grid[k[0]]),
                           "report": float(grid[k[1]]), "gap": worst,
                           "branch": "stop" if stop[k] >= cont[k] else "continue"}
        gaps.append(per)
    return OneShotResult(gaps, worst, witness, worst <= tol and terminal_ok, terminal_ok)


def measure_delta_ic(scenario: Scenario, rules: MechanismRules,
                     problems: list[AgentProblem] | None = None) -> float:
    return max(0.0, one_shot_audit(scenario, rules, problems=problems).worst_gap)


@dataclass(frozen=True)
class OracleLimits:
    max_grid: int = 3
    max_T: int = 2
    max_strategies: int = 2_000_000
    max_stop_rules: int = 4096


@dataclass
class OracleResult:
    worst_gap: float
    witness: Optional[dict]
    passed: bool
    strategies: int
    stop_rules_enumerated: bool


def _report_maps(m: int) -> np.ndarray:
    return np.array(list(itertools.product(range(m), repeat=m)), dtype=int)


def _strategy_values(prob: AgentProblem, maps: list[np.ndarray], stop_rule=None) -> list[np.ndarray]:
    """Values of every Markov reporting strategy from each start period.

    vals[s] has shape (#strategies for periods s..T, m_s). When stop_rule is
    None the agent stops optimally given the strategy; otherwise stop_rule[s]
    is a boolean array over the grid (forced stop at T).
    """
    T = prob.T
    vals = [None] * (T + 1)
    for s in range(T, -1, -1):
        mp = maps[s]                                       # (k, m)
        m = mp.shape[1]
        xs = np.arange(m)
        stop = prob.stop_matrix(s)[xs[None, :], mp]        # (k, m)
        if s == T:
            vals[s] = stop
            continue
        U = prob.model.U[s][xs[None, :], mp]
        R = prob.R[s][mp]
        P = prob.model.P[s][xs[None, :], mp]               # (k, m, m_next)
        nxt = vals[s + 1]                                  # (K, m_next)
        cont = (U + R)[:, None, :] + np.einsum("kxy,cy->kcx", P, nxt)
        stop_b = np.broadcast_to(stop[:, None, :], cont.shape)
        if stop_rule is None:
            v = np.maximum(stop_b, cont)
        else:
            v = np.where(stop_rule[s][None, None, :], stop_b, cont)
        vals[s] = v.reshape(-1, m)
    return vals


def full_deviation_oracle(scenario: Scenario, rules: MechanismRules, limits: OracleLimits | None = None,
                          tol: float = TOL_EXACT, enumerate_stop_rules: Optional[bool] = None,
                          problems: list[AgentProblem] | None = None) -> OracleResult:
    """Worst advantage over truthful reporting with optimal stopping, across
    every Markov reporting strategy and every Markov stopping rule."""
    limits = limits or OracleLimits()
    T = scenario.T
    sizes = [[scenario.points(i, t).size for t in range(T + 1)] for i in range(scenario.n)]
    if T > limits.max_T or max(max(s) for s in sizes) > limits.max_grid:
        raise OracleBudgetError(f"instance exceeds oracle limits (grid <= {limits.max_grid}, T <= {limits.max_T})")
    counts = [int(np.prod([float(m) ** m for m in s])) for s in sizes]
    if max(counts) > limits.max_strategies:
        raise OracleBudgetError(f"{max(counts)} strategies exceed the budget of {limits.max_strategies}")
    n_stop = [2 ** int(sum(s[:-1])) for s in sizes]
    if enumerate_stop_rules is None:
        enumerate_stop_rules = max(n_stop) <= limits.max_stop_rules
    problems = problems or build_problems(scenario, rules)
    worst, witness = -np.inf, None
    for prob, sz in zip(problems, sizes):
        maps = [_report_maps(m) for m in sz]
        V = prob.optimal_values()[0]
        if enumerate_stop_rules:
            best = [np.full(m, -np.inf) for m in sz]
            cells = [(s, x) for s in range(T) for x in range(sz[s])]
            for bits in itertools.product((False, True), repeat=len(cells)):
                rule = [np.zeros(m, dtype=bool) for m in sz]
                for (s, x), b in zip(cells, bits):
                    rule[s][x] = b
                rule[T][:] = True
                vals = _strategy_values(prob, maps, rule)
                for s in range(T + 1):
                    best[s] = np.maximum(best[s], vals[s].max(axis=0))
        else:
            vals = _strategy_values(prob, maps)
            best = [v.max(axis=0) for v in vals]
        for s in range(T + 1):
            gap = best[s] - V[s]
            k = int(np.argmax(gap))
            if gap[k] > worst:
                worst = float(gap[k])
                witness = {"agent": prob.agent, "period": s, "true_x": float(scenario.points(prob.agent, s)[k]),
                           "gap": worst}
    return OracleResult(worst, witness, worst <= tol, max(counts), bool(enumerate_stop_rules))


# ---------------------------------------------------------------------------
# report

@dataclass
class AuditReport:
    sufficient_verdicts: dict
    relaxed_verdicts: dict
    one_shot: OneShotResult
    full_oracle: Optional[OracleResult]
    delta_ic: float
    tol_ic: float
    counterexamples: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.delta_ic <= self.tol_ic

    @property
    def sufficient_passed(self) -> bool:
        return all(v.passed for v in self.sufficient_verdicts.values())

    @property
    def one_shot_gaps(self) -> list:
        return self.one_shot.gaps

    @property
    def full_oracle_gap(self) -> Optional[float]:
        return None if self.full_oracle is None else self.full_oracle.worst_gap

    def summary(self) -> dict:
        verdicts = {f"condition_{k}": ("PASS" if v.passed else "FAIL") for k, v in self.sufficient_verdicts.items()}
        verdicts.update({f"relaxed_{k}": ("PASS" if v.passed else "FAIL") for k, v in self.relaxed_verdicts.items()})
        verdicts["one_shot"] = "PASS" if self.one_shot.passed else "FAIL"
        if self.full_oracle is not None:
            verdicts["full_oracle"] = "PASS" if self.full_oracle.passed else "FAIL"
        return {
            "verdict": "PASS" if self.passed else "FAIL",
            "verdicts": verdicts,
            "delta_ic": self.delta_ic,
            "tol_ic": self.tol_ic,
            "full_oracle_gap": self.full_oracle_gap,
            "worst_witness": self.one_shot.witness,
            "counterexamples": self.counterexamples,
        }


def audit(scenario: Scenario, rules: MechanismRules, phi: CharacterizingFunctions | None = None,
          tol_ic: float = TOL_EXACT, oracle_limits: OracleLimits | None = None,
          run_oracle: bool = True) -> AuditReport:
    problems = build_problems(scenario, rules)
    suff = check_sufficient(scenario, rules, phi, problems=problems)
    relaxed = check_relaxed(scenario, rules, phi, problems=problems)
    one = one_shot_audit(scenario, rules, tol_ic, problems=problems)
    oracle = None
    if run_oracle:
        try:
            oracle = full_deviation_oracle(scenario, rules, oracle_limits, tol_ic, problems=problems)
        except OracleBudgetError:
            oracle = None
    delta = max(0.0, one.worst_gap)
    ce = [v.witness | {"condition": k} for k, v in suff.items() if v.witness]
    if one.witness and one.worst_gap > tol_ic:
        ce.append(one.witness | {"condition": "one_shot"})
    return AuditReport(suff, relaxed, one, oracle, delta, tol_ic, ce)


def write_audit(report: AuditReport, scenario: Scenario, outdir) -> None:
    outdir = Path(outdir)
    rows = []
    for i, per in enumerate(report.one_shot.gaps):
        for t, gap in enumerate(per):
            grid = scenario.points(i, t)
            for a in range(gap.shape[0]):
                for b in range(gap.shape[1]):
                    rows.append((i, t, float(grid[a]), float(grid[b]), float(gap[a, b])))
    atomic_write_csv(outdir / "one_shot_gaps.csv", ("agent", "period", "true_x", "report", "gap"), rows)
    atomic_write_json(outdir / "audit_summary.json", report.summary())
