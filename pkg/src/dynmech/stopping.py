"""Optimal stopping by backward induction, threshold extraction and the
monotonicity checks that guarantee threshold structure."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .io import atomic_write_csv
from .mechanism import MechanismRules
from .payoff import AgentProblem, build_problems
from .scenario import AllocationRule, Scenario

THRESHOLD = "THRESHOLD"
NON_THRESHOLD = "NON_THRESHOLD"
DOMINANCE_TOL = 1e-12


def never_sentinel(grid: np.ndarray) -> float:
    """Threshold value meaning "never stop here": one grid step below the lowest point."""
    return float(grid[0] - (grid[1] - grid[0]))


def is_never(value: float, grid: np.ndarray) -> bool:
    return bool(value < grid[0] - 1e-12)


@dataclass(frozen=True)
class CheckVerdict:
    agent: int
    t: int
    passed: bool
    witness: Optional[tuple] = None
    detail: str = ""


@dataclass(frozen=True)
class ThresholdVerdict:
    agent: int
    t: int
    kind: str
    pair: Optional[tuple] = None   # (continue point, stop point above it)


@dataclass
class StoppingSolution:
    V: list            # V[i][t]: value over the period-t grid
    g: list            # g[i][t]: continuing value (NaN at t = T)
    region: list       # region[i][t]: True where stopping attains the max
    stop_value: list
    continue_value: list
    epsilon: np.ndarray = field(default=None)
    verdicts: list = field(default=None)


def threshold_from_region(region: np.ndarray, grid: np.ndarray) -> tuple[float, str, Optional[tuple]]:
    stops = np.flatnonzero(region)
    conts = np.flatnonzero(~region)
    if stops.size == 0:
        return never_sentinel(grid), THRESHOLD, None
    if conts.size and conts[0] < stops[-1]:
        c = conts[0]
        s = stops[stops > c][0]
        return float("nan"), NON_THRESHOLD, (float(grid[c]), float(grid[s]))
    return float(grid[stops[-1]]), THRESHOLD, None


def extract_threshold(solution: StoppingSolution, scenario: Scenario) -> tuple[np.ndarray, list]:
    n, T = scenario.n, scenario.T
    eps = np.empty((n, T + 1))
    verdicts = []
    for i in range(n):
        row = []
        for t in range(T + 1):
            e, kind, pair = threshold_from_region(np.asarray(solution.region[i][t]), scenario.points(i, t))
            eps[i, t] = e
            row.append(ThresholdVerdict(i, t, kind, pair))
        verdicts.append(row)
    return eps, verdicts


def solve_stopping(scenario: Scenario, rules: MechanismRules, ties: str = "stop",
                   problems: list[AgentProblem] | None = None) -> StoppingSolution:
    """Backward induction for every agent. Ties go to STOP unless ties="continue"."""
    if ties not in ("stop", "continue"):
        raise ValueError("ties must be 'stop' or 'continue'")
    problems = problems or build_problems(scenario, rules)
    V, G, region, sv, cv = [], [], [], [], []
    for prob in problems:
        v, s, c, reg = prob.optimal_values(ties)
        V.append(v)
        sv.append(s)
        cv.append(c)
        region.append(reg)
        gs = [prob.g(t) for t in range(scenario.T)]
        gs.append(np.full(scenario.points(prob.agent, scenario.T).size, np.nan))
        G.append(gs)
    sol = StoppingSolution(V, G, region, sv, cv)
    sol.epsilon, sol.verdicts = extract_threshold(sol, scenario)
    return sol


def check_single_crossing(scenario: Scenario, rules: MechanismRules,
                          problems: list[AgentProblem] | None = None) -> list[CheckVerdict]:
    """C_t(x, t+1) - C_t(x, t) must be non-decreasing in x."""
    problems = problems or build_problems(scenario, rules)
    out = []
    for prob in problems:
        for t in range(scenario.T):
            diff = prob.payoff(t, t + 1) - prob.payoff(t, t)
            bad = np.flatnonzero(np.diff(diff) < -1e-12)
            grid = scenario.points(prob.agent, t)
            if bad.size:
                k = bad[0]
                out.append(CheckVerdict(prob.agent, t, False, (float(grid[k]), float(grid[k + 1])),
                                        f"difference drops by {diff[k] - diff[k + 1]:.3g}"))
            else:
                out.append(CheckVerdict(prob.agent, t, True))
    return out


def check_stochastic_dominance(scenario: Scenario, allocation_rule: AllocationRule | None = None) -> list[CheckVerdict]:
    """Next-period CDF must be pointwise non-increasing in the current type,
    for every profile of the others' reports."""
    sigma = allocation_rule or scenario.allocation_rule
    out = []
    for i in range(scenario.n):
        for t in range(scenario.T):
            K = scenario.kernels[i][t].table
            lev = np.moveaxis(sigma.present_table(t)[..., i], i, 0)   # (m_i, others...)
            cdf = np.cumsum(K, axis=2)                               # (m_i, L, m_next)
            m = lev.shape[0]
            rows = cdf[np.arange(m).reshape((m,) + (1,) * (lev.ndim - 1)), lev]  # (m_i, others..., m_next)
            drop = rows[:-1] - rows[1:]          # must be >= 0
            bad = np.argwhere(drop < -DOMINANCE_TOL)
            if bad.size:
                b = bad[0]
                x = b[0]
                others = tuple(int(v) for v in b[1:-1])
                grid = scenario.points(i, t)
                out.append(CheckVerdict(i, t, False, (float(grid[x]), float(grid[x + 1]), others),
                                        f"CDF at next-period index {b[-1]} rises with the current type"))
            else:
                out.append(CheckVerdict(i, t, True))
    return out


def save_stopping_csv(solution: StoppingSolution, scenario: Scenario, outdir) -> None:
    outdir = Path(outdir)
    tables = {"V": solution.V, "g": solution.g, "region": solution.region}
    for name, tab in tables.items():
        rows = []
        for i in range(scenario.n):
            for t in range(scenario.T + 1):
                for x, v in zip(scenario.points(i, t), tab[i][t]):
                    rows.append((i, t, float(x), int(v) if name == "region" else float(v)))
        atomic_write_csv(outdir / f"{name}.csv", ("agent", "period", "grid_point", "value"), rows)
    rows = [(i, t, float("nan"), float(solution.epsilon[i, t]))
            for i in range(scenario.n) for t in range(scenario.T + 1)]
    atomic_write_csv(outdir / "epsilon.csv", ("agent", "period", "grid_point", "value"), rows)
