"""Problem instances: agents, discretized type grids, Markov dynamics, utilities
and the tabulated allocation rule.

Everything here is immutable after construction. Arrays are copied and marked
read-only so a Scenario can be shared freely between threads.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ROW_TOL = 1e-12


class ScenarioError(ValueError):
    """Raised when a scenario document or object violates an invariant."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PreferenceGrid:
    points: np.ndarray
    period: int

    def __post_init__(self):
        pts = _frozen(self.points)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 2:
            raise ScenarioError(f"grid for period {self.period} needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise ScenarioError(f"grid for period {self.period} has non-finite points")
        if np.any(np.diff(pts) <= 0):
            raise ScenarioError(f"grid not increasing (period {self.period}): {pts.tolist()}")

    @property
    def lower(self) -> float:
        return float(self.points[0])

    @property
    def upper(self) -> float:
        return float(self.points[-1])

    def __len__(self) -> int:
        return self.points.size

    def index_of(self, value: float) -> int:
        hits = np.flatnonzero(np.isclose(self.points, value, rtol=0.0, atol=1e-12))
        if hits.size == 0:
            raise ScenarioError(f"{value} is not a point of the period-{self.period} grid")
        return int(hits[0])


@dataclass(frozen=True)
class TransitionKernel:
    """table[x_prev, allocation_level, x_next]."""

    table: np.ndarray

    def __post_init__(self):
        tab = _frozen(self.table)
        object.__setattr__(self, "table", tab)
        if tab.ndim != 3:
            raise ScenarioError("kernel table must be (prev, allocation, next)")
        sums = tab.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)
        if bad.size:
            x, a = bad[0]
            raise ScenarioError(f"row not stochastic: prev={x}, allocation={a}, sum={sums[x, a]!r}")
        if np.any(tab <= 0):
            x, a, y = np.argwhere(tab <= 0)[0]
            raise ScenarioError(f"kernel entry not strictly positive at prev={x}, allocation={a}, next={y}")

    @property
    def cdf(self) -> np.ndarray:
        return np.cumsum(self.table, axis=2)


@dataclass(frozen=True)
class UtilitySpec:
    """Tabulated u(x, a) per period: tables[t][x_index, level_index]."""

    tables: tuple
    kind: str = "table"
    monotone: bool | None = None

    def __post_init__(self):
        tabs = tuple(_frozen(t) for t in self.tables)
        object.__setattr__(self, "tables", tabs)
        for t, tab in enumerate(tabs):
            if not np.all(np.isfinite(tab)):
                raise ScenarioError(f"utility table for period {t} has non-finite entries")
        if self.monotone is None:
            mono = all(np.all(np.diff(tab, axis=0) >= -1e-12) for tab in tabs)
            object.__setattr__(self, "monotone", bool(mono))

    @classmethod
    def product(cls, grids: Sequence[np.ndarray], levels: np.ndarray, scale: float = 1.0) -> "UtilitySpec":
        """u(x, a) = scale * x * a."""
        tabs = [scale * np.outer(g, levels) for g in grids]
        return cls(tuple(tabs), kind=f"product:{scale!r}")

    def derivative(self, grids: Sequence[np.ndarray]) -> list[np.ndarray]:
        # central differences inside, one-sided at the edges
        return [np.gradient(tab, g, axis=0) for tab, g in zip(self.tables, grids)]


@dataclass(frozen=True)
class CPUtility:
    """Planner utility u_0(x_t, a_t) summed over present agents.

    kind: "zero", "welfare" (coef * sum x_i a_i) or "allocation" (coef * sum a_i).
    """

    kind: str = "zero"
    coef: float = 1.0

    def __post_init__(self):
        if self.kind not in ("zero", "welfare", "allocation"):
            raise ScenarioError(f"unknown cp_utility kind {self.kind!r}")

    def value(self, x: np.ndarray, a: np.ndarray) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "welfare":
            return float(self.coef * np.dot(x, a))
        return float(self.coef * np.sum(a))


@dataclass(frozen=True)
class AllocationRule:
    """Tabulated allocation rule.

    tables[t] has shape (m_0 + 1, ..., m_{n-1} + 1, n) and holds allocation
    level indices. Index m_j on axis j means agent j has left the population;
    an absent agent's own entry is never read.
    """

    levels: np.ndarray
    tables: tuple
    name: str = "tabulated"

    def __post_init__(self):
        object.__setattr__(self, "levels", _frozen(self.levels))
        tabs = tuple(_frozen(t, dtype=np.int64) for t in self.tables)
        object.__setattr__(self, "tables", tabs)
        L = self.levels.size
        for t, tab in enumerate(tabs):
            if tab.shape[-1] != tab.ndim - 1:
                raise ScenarioError(f"allocation table for period {t}: last axis must be the agent axis")
            if np.any(tab < 0) or np.any(tab >= L):
                raise ScenarioError(f"allocation table for period {t} references unknown levels")

    @property
    def n(self) -> int:
        return self.tables[0].ndim - 1

    def present_table(self, t: int) -> np.ndarray:
        """Level indices for full-presence profiles, shape (m_0, ..., m_{n-1}, n)."""
        tab = self.tables[t]
        return tab[tuple(slice(0, s - 1) for s in tab.shape[:-1])]

    def level_indices(self, t: int, profile: Sequence[int]) -> np.ndarray:
        return self.tables[t][tuple(profile)]

    def values(self, t: int, profile: Sequence[int]) -> np.ndarray:
        return self.levels[self.level_indices(t, profile)]

    def with_name(self, name: str) -> "AllocationRule":
        return AllocationRule(self.levels, self.tables, name)


def _level_index(levels: np.ndarray, value: float) -> int:
    hits = np.flatnonzero(np.isclose(levels, value, rtol=0.0, atol=1e-12))
    if hits.size == 0:
        raise ScenarioError(f"allocation value {value} is not an allocation level")
    return int(hits[0])


def _zero_level(levels: np.ndarray) -> int:
    hits = np.flatnonzero(levels == 0)
    return int(hits[0]) if hits.size else 0


def highest_report_wins(grids: Sequence[Sequence[np.ndarray]], levels: np.ndarray) -> AllocationRule:
    """One unit to the highest present report; ties split equally.

    grids[i][t] are the agents' period grids. Reports are compared by value.
    Requires 1/k to be a level for every tie size k that can occur.
    """
    levels = np.asarray(levels, dtype=float)
    n = len(grids)
    T = len(grids[0]) - 1
    zero = _zero_level(levels)
    tables = []
    for t in range(T + 1):
        sizes = [len(grids[i][t]) for i in range(n)]
        tab = np.full([s + 1 for s in sizes] + [n], zero, dtype=np.int64)
        for prof in itertools.product(*[range(s + 1) for s in sizes]):
            present = [i for i in range(n) if prof[i] < sizes[i]]
            if not present:
                continue
            vals = {i: grids[i][t][prof[i]] for i in present}
            top = max(vals.values())
            winners = [i for i in present if np.isclose(vals[i], top, rtol=0.0, atol=1e-12)]
            share = _level_index(levels, 1.0 / len(winners))
            for i in winners:
                tab[prof + (i,)] = share
        tables.append(tab)
    return AllocationRule(levels, tuple(tables), "highest-report-wins")


def constant_split(grids: Sequence[Sequence[np.ndarray]], levels: np.ndarray) -> AllocationRule:
    """Every present agent receives 1/n regardless of reports."""
    levels = np.asarray(levels, dtype=float)
    n = len(grids)
    T = len(grids[0]) - 1
    share = _level_index(levels, 1.0 / n)
    tables = []
    for t in range(T + 1):
        sizes = [len(grids[i][t]) for i in range(n)]
        tables.append(np.full([s + 1 for s in sizes] + [n], share, dtype=np.int64))
    return AllocationRule(levels, tuple(tables), "constant-split")


def reserve_highest_report_wins(grids, levels, reserve: int) -> AllocationRule:
    """Highest report wins, but only among reports at grid index >= reserve."""
    base = highest_report_wins(grids, levels)
    zero = _zero_level(base.levels)
    n = len(grids)
    tables = []
    for t, tab in enumerate(base.tables):
        tab = np.array(tab)
        sizes = [len(grids[i][t]) for i in range(n)]
        for prof in itertools.product(*[range(s + 1) for s in sizes]):
            eligible = [i for i in range(n) if prof[i] < sizes[i] and prof[i] >= reserve]
            present = [i for i in range(n) if prof[i] < sizes[i]]
            if not eligible:
                for i in present:
                    tab[prof + (i,)] = zero
                continue
            top = max(grids[i][t][prof[i]] for i in eligible)
            winners = [i for i in eligible if np.isclose(grids[i][t][prof[i]], top, atol=1e-12)]
            share = _level_index(base.levels, 1.0 / len(winners))
            for i in present:
                tab[prof + (i,)] = share if i in winners else zero
        tables.append(tab)
    return AllocationRule(base.levels, tuple(tables), f"reserve-{reserve}")


def _extend_absent(present_tab: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Pad a full-presence table with absent slots.

    An absent agent is evaluated as if it reported its lowest grid point and
    receives nothing.
    """
    sizes = present_tab.shape[:-1]
    n = len(sizes)
    zero = _zero_level(levels)
    out = np.full([s + 1 for s in sizes] + [n], zero, dtype=np.int64)
    for prof in itertools.product(*[range(s + 1) for s in sizes]):
        proxy = tuple(0 if p == s else p for p, s in zip(prof, sizes))
        for i in range(n):
            if prof[i] < sizes[i]:
                out[prof + (i,)] = present_tab[proxy + (i,)]
    return out


@dataclass(frozen=True)
class Scenario:
    grids: tuple            # grids[i][t]: PreferenceGrid
    kernels: tuple          # kernels[i][t]: TransitionKernel from period t to t+1, t < T
    initial_dists: tuple    # initial_dists[i]: pmf over grids[i][0]
    utilities: tuple        # utilities[i]: UtilitySpec
    allocation_rule: AllocationRule
    cp_utility: CPUtility = field(default_factory=CPUtility)
    name: str = "scenario"

    def __post_init__(self):
        n = len(self.grids)
        if n < 1:
            raise ScenarioError("at least one agent is required")
        T = len(self.grids[0]) - 1
        L = self.allocation_rule.levels.size
        dists = []
        for i in range(n):
            if len(self.grids[i]) != T + 1:
                raise ScenarioError(f"dimension mismatch: agent {i} has {len(self.grids[i])} grids, expected {T + 1}")
            if len(self.kernels[i]) != T:
                raise ScenarioError(f"dimension mismatch: agent {i} has {len(self.kernels[i])} kernels, expected {T}")
            for t, k in enumerate(self.kernels[i]):
                exp = (len(self.grids[i][t]), L, len(self.grids[i][t + 1]))
                if k.table.shape != exp:
                    raise ScenarioError(f"dimension mismatch: kernel agent {i} period {t} has shape {k.table.shape}, expected {exp}")
            d = _frozen(self.initial_dists[i])
            if d.shape != (len(self.grids[i][0]),):
                raise ScenarioError(f"dimension mismatch: initial_dist of agent {i}")
            if np.any(d < 0) or abs(d.sum() - 1.0) > ROW_TOL:
                raise ScenarioError(f"initial_dist of agent {i} is not a probability row")
            dists.append(d)
            u = self.utilities[i]
            if len(u.tables) != T + 1:
                raise ScenarioError(f"dimension mismatch: utility of agent {i} needs {T + 1} period tables")
            for t, tab in enumerate(u.tables):
                if tab.shape != (len(self.grids[i][t]), L):
                    raise ScenarioError(f"dimension mismatch: utility agent {i} period {t}")
        object.__setattr__(self, "initial_dists", tuple(dists))
        rule = self.allocation_rule
        if rule.n != n or len(rule.tables) != T + 1:
            raise ScenarioError("dimension mismatch: allocation rule does not match agents/horizon")
        for t, tab in enumerate(rule.tables):
            exp = tuple(len(self.grids[i][t]) + 1 for i in range(n)) + (n,)
            if tab.shape != exp:
                raise ScenarioError(f"dimension mismatch: allocation table period {t} has shape {tab.shape}, expected {exp}")

    @property
    def n(self) -> int:
        return len(self.grids)

    @property
    def T(self) -> int:
        return len(self.grids[0]) - 1

    @property
    def levels(self) -> np.ndarray:
        return self.allocation_rule.levels

    def points(self, i: int, t: int) -> np.ndarray:
        return self.grids[i][t].points

    def sizes(self, t: int) -> tuple:
        return tuple(len(self.grids[i][t]) for i in range(self.n))

    def with_allocation(self, rule: AllocationRule) -> "Scenario":
        return Scenario(self.grids, self.kernels, self.initial_dists, self.utilities, rule,
                        self.cp_utility, self.name)

    def with_utilities(self, utilities) -> "Scenario":
        return Scenario(self.grids, self.kernels, self.initial_dists, tuple(utilities),
                        self.allocation_rule, self.cp_utility, self.name)


# ---------------------------------------------------------------------------
# builders

def persistence_kernel(m: int, stay: float = 0.6, n_levels: int = 1) -> np.ndarray:
    """Mass `stay` on the current point, the rest spread evenly on the others."""
    other = (1.0 - stay) / (m - 1)
    mat = np.full((m, m), other)
    np.fill_diagonal(mat, stay)
    return np.repeat(mat[:, None, :], n_levels, axis=1)


def smoothed_identity(m: int, eps: float = 1e-9, n_levels: int = 1) -> np.ndarray:
    mat = np.full((m, m), eps)
    np.fill_diagonal(mat, 1.0 - (m - 1) * eps)
    return np.repeat(mat[:, None, :], n_levels, axis=1)


def gaussian_kernel(grid, intercept: float, slope: float, sd: float, n_levels: int = 1) -> np.ndarray:
    """Discretized normal kernel: next type ~ N(intercept + slope * x, sd), renormalized on the grid."""
    grid = np.asarray(grid, dtype=float)
    mean = intercept + slope * grid
    w = np.exp(-0.5 * ((grid[None, :] - mean[:, None]) / sd) ** 2)
    w /= w.sum(axis=1, keepdims=True)
    return np.repeat(w[:, None, :], n_levels, axis=1)


def build_scenario(grid_points, T: int, kernel_tables, initial_dists, levels,
                   utility_scales=None, rule: str = "highest-report-wins",
                   cp_utility: CPUtility | None = None, name: str = "scenario",
                   utilities=None) -> Scenario:
    """Convenience constructor with the same grid for every period of an agent.

    kernel_tables[i] is one (m, L, m) table reused for every transition, or a
    list of T tables.
    """
    n = len(grid_points)
    levels = np.asarray(levels, dtype=float)
    grids = tuple(tuple(PreferenceGrid(grid_points[i], t) for t in range(T + 1)) for i in range(n))
    kernels = []
    for i in range(n):
        kt = kernel_tables[i]
        if isinstance(kt, np.ndarray) and kt.ndim == 3:
            kt = [kt] * T
        kernels.append(tuple(TransitionKernel(np.asarray(k)) for k in kt))
    raw = [[g.points for g in grids[i]] for i in range(n)]
    if utilities is None:
        scales = utility_scales or [1.0] * n
        utilities = tuple(UtilitySpec.product(raw[i], levels, scales[i]) for i in range(n))
    rule_obj = make_rule(rule, raw, levels)
    return Scenario(grids, tuple(kernels), tuple(np.asarray(d, float) for d in initial_dists),
                    tuple(utilities), rule_obj, cp_utility or CPUtility("welfare", 1.0), name)


def make_rule(rule, raw_grids, levels) -> AllocationRule:
    if isinstance(rule, AllocationRule):
        return rule
    if rule == "highest-report-wins":
        return highest_report_wins(raw_grids, levels)
    if rule == "constant-split":
        return constant_split(raw_grids, levels)
    if isinstance(rule, str) and rule.startswith("reserve-"):
        return reserve_highest_report_wins(raw_grids, levels, int(rule.split("-")[1]))
    raise ScenarioError(f"unknown builtin allocation rule {rule!r}")


S1_GRID = (0.0, 0.5, 1.0)
S1_LEVELS = (0.0, 0.5, 1.0)


def s1(T: int = 2) -> Scenario:
    """Canonical instance: 2 agents, 3-point grids, persistence 0.6/0.2/0.2,
    u = x*a, highest report wins."""
    k = persistence_kernel(3, 0.6, len(S1_LEVELS))
    uniform = np.full(3, 1 / 3)
    return build_scenario([S1_GRID, S1_GRID], T, [k, k], [uniform, uniform], S1_LEVELS, name="s1")


def s1_asymmetric(T: int = 2) -> Scenario:
    """S1 with agent 1's utility doubled."""
    k = persistence_kernel(3, 0.6, len(S1_LEVELS))
    uniform = np.full(3, 1 / 3)
    return build_scenario([S1_GRID, S1_GRID], T, [k, k], [uniform, uniform], S1_LEVELS,
                          utility_scales=[1.0, 2.0], name="s1-asym")


BUILTINS = {"s1": s1, "s1-asym": s1_asymmetric}


def random_dominant_kernel(rng: np.random.Generator, m: int, n_levels: int) -> np.ndarray:
    """Random strictly positive kernel whose rows are ordered by first-order
    stochastic dominance in the previous type (allocation-independent)."""
    base = rng.dirichlet(np.ones(m)) * 0.5 + 0.5 / m
    tilt = rng.uniform(0.5, 2.0)
    rows = []
    for x in range(m):
        w = base * np.exp(tilt * (x / (m - 1)) * np.arange(m) / (m - 1))
        rows.append(w / w.sum())
    mat = np.array(rows)
    return np.repeat(mat[:, None, :], n_levels, axis=1)


def random_scenario(rng: np.random.Generator, m: int = 3, T: int = 2, n: int = 2,
                    dominant: bool = True, utility: str = "product") -> Scenario:
    """Small random instance for property tests."""
    levels = np.array([0.0, 0.5, 1.0]) if n == 2 else np.unique(np.r_[0.0, 1.0 / np.arange(1, n + 1)])
    grids, kernels, dists, scales = [], [], [], []
    for _ in range(n):
        pts = np.sort(rng.choice(np.arange(0, 10), size=m, replace=False)).astype(float) / 4.0
        grids.append(pts)
        if dominant:
            kernels.append(random_dominant_kernel(rng, m, levels.size))
        else:
            mat = rng.dirichlet(np.ones(m), size=m) * 0.9 + 0.1 / m
            kernels.append(np.repeat(mat[:, None, :], levels.size, axis=1))
        dists.append(rng.dirichlet(np.ones(m)))
        scales.append(float(rng.uniform(0.5, 2.0)))
    utilities = None
    if utility == "table":
        utilities = []
        for i in range(n):
            tabs = [np.sort(rng.uniform(-1, 1, size=(m, levels.size)), axis=0) for _ in range(T + 1)]
            utilities.append(UtilitySpec(tuple(tabs)))
    return build_scenario(grids, T, kernels, dists, levels, utility_scales=scales,
                          name="random", utilities=utilities)


# ---------------------------------------------------------------------------
# JSON schema

def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ScenarioError(f"schema violation: missing field '{where}{key}'")
    return doc[key]


def scenario_from_dict(doc: dict) -> Scenario:
    T = int(_require(doc, "horizon", ""))
    levels = np.asarray(_require(doc, "allocation_levels", ""), dtype=float)
    agents = _require(doc, "agents", "")
    if not isinstance(agents, list) or not agents:
        raise ScenarioError("schema violation: field 'agents' must be a non-empty list")
    grids, kernels, dists, utils = [], [], [], []
    for i, a in enumerate(agents):
        where = f"agents[{i}]."
        g = _require(a, "grids", where)
        if len(g) == T + 1 and isinstance(g[0], list):
            raw = g
        else:
            raw = [g] * (T + 1)
        grids.append(tuple(PreferenceGrid(np.asarray(p, float), t) for t, p in enumerate(raw)))
        ks = _require(a, "kernels", where)
        if len(ks) != T:
            raise ScenarioError(f"dimension mismatch: field '{where}kernels' needs {T} entries")
        tabs = []
        for t, k in enumerate(ks):
            arr = np.asarray(k, dtype=float)
            if arr.ndim == 2:
                arr = np.repeat(arr[:, None, :], levels.size, axis=1)
            tabs.append(TransitionKernel(arr))
        kernels.append(tuple(tabs))
        dists.append(np.asarray(_require(a, "initial_dist", where), float))
        u = _require(a, "utility", where)
        pts = [gr.points for gr in grids[-1]]
        if isinstance(u, dict) and u.get("type") == "product":
            utils.append(UtilitySpec.product(pts, levels, float(u.get("scale", 1.0))))
        elif isinstance(u, dict) and u.get("type") == "table":
            utils.append(UtilitySpec(tuple(np.asarray(v, float) for v in u["values"]),
                                     monotone=u.get("monotone")))
        else:
            raise ScenarioError(f"schema violation: field '{where}utility' must be a product or table spec")
    raw_grids = [[gr.points for gr in g] for g in grids]
    rule_doc = _require(doc, "allocation_rule", "")
    if isinstance(rule_doc, str):
        rule = make_rule(rule_doc, raw_grids, levels)
    elif isinstance(rule_doc, dict) and "table" in rule_doc:
        tabs = []
        full = rule_doc.get("table_with_absent")
        for t, values in enumerate(full if full is not None else rule_doc["table"]):
            vals = np.asarray(values, dtype=float)
            idx = np.vectorize(lambda v: _level_index(levels, v))(vals).astype(np.int64)
            tabs.append(idx if full is not None else _extend_absent(idx, levels))
        rule = AllocationRule(levels, tuple(tabs), rule_doc.get("name", "tabulated"))
    else:
        raise ScenarioError("schema violation: field 'allocation_rule' must be a builtin name or {table: ...}")
    cp = doc.get("cp_utility", {"type": "zero"})
    cp_obj = CPUtility(cp.get("type", "zero"), float(cp.get("coef", 1.0)))
    return Scenario(tuple(grids), tuple(kernels), tuple(dists), tuple(utils), rule, cp_obj,
                    doc.get("name", "scenario"))


def scenario_to_dict(sc: Scenario) -> dict:
    agents = []
    for i in range(sc.n):
        agents.append({
            "grids": [g.points.tolist() for g in sc.grids[i]],
            "kernels": [k.table.tolist() for k in sc.kernels[i]],
            "initial_dist": sc.initial_dists[i].tolist(),
            "utility": {"type": "table", "values": [t.tolist() for t in sc.utilities[i].tables],
                        "monotone": sc.utilities[i].monotone},
        })
    rule = sc.allocation_rule
    table = [sc.levels[rule.present_table(t)].tolist() for t in range(sc.T + 1)]
    full = [sc.levels[tab].tolist() for tab in rule.tables]
    return {
        "name": sc.name,
        "horizon": sc.T,
        "allocation_levels": sc.levels.tolist(),
        "agents": agents,
        "allocation_rule": {"name": rule.name, "table": table, "table_with_absent": full},
        "cp_utility": {"type": sc.cp_utility.kind, "coef": sc.cp_utility.coef},
    }


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"schema violation: {path} is not valid JSON ({exc})") from exc
    return scenario_from_dict(doc)


# ---------------------------------------------------------------------------
# dynamics

def inverse_cdf(kernel_row, grid, omega: float) -> float:
    """Smallest grid point whose cumulative probability reaches omega."""
    row = np.asarray(kernel_row, dtype=float)
    if not 0.0 < omega < 1.0:
        raise ValueError("omega must lie in (0, 1)")
    if np.any(row < 0) or abs(row.sum() - 1.0) > ROW_TOL:
        raise ValueError("kernel row is not stochastic")
    k = int(np.searchsorted(np.cumsum(row), omega, side="left"))
    return float(np.asarray(grid)[min(k, row.size - 1)])


def inverse_cdf_index(kernel_row, omega) -> np.ndarray:
    row = np.asarray(kernel_row, dtype=float)
    k = np.searchsorted(np.cumsum(row), omega, side="left")
    return np.minimum(k, row.size - 1)


def agent_streams(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-agent generators derived from one 64-bit seed."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


@dataclass
class Trajectory:
    """A batch of simulated paths; arrays are indexed [path, agent, period].

    Entries after an agent's exit are NaN (floats), -1 (indices) or False.
    """

    true_idx: np.ndarray
    true_x: np.ndarray
    report_idx: np.ndarray
    report_x: np.ndarray
    allocation: np.ndarray
    utility: np.ndarray
    payment: np.ndarray
    stopped: np.ndarray
    stop_time: np.ndarray          # [path, agent]

    @property
    def n_paths(self) -> int:
        return self.true_idx.shape[0]

    def total_payoff(self) -> np.ndarray:
        """Realized utility plus payments per [path, agent]."""
        return np.nansum(self.utility, axis=2) + np.nansum(self.payment, axis=2)

    def rows(self, path: int = 0):
        """(period, agent, true_x, report, allocation, payment, stopped) for present entries."""
        n, T1 = self.true_idx.shape[1:]
        for t in range(T1):
            for i in range(n):
                if self.true_idx[path, i, t] < 0:
                    continue
                yield (t, i, float(self.true_x[path, i, t]), float(self.report_x[path, i, t]),
                       float(self.allocation[path, i, t]), float(self.payment[path, i, t]),
                       int(self.stopped[path, i, t]))


def _stop_regions(scenario: Scenario, stopping) -> list:
    """Normalize a stopping specification to boolean regions [agent][period]."""
    n, T = scenario.n, scenario.T
    if stopping is None:
        regions = [[np.zeros(len(scenario.grids[i][t]), dtype=bool) for t in range(T + 1)] for i in range(n)]
    elif isinstance(stopping, np.ndarray) or (np.ndim(stopping) == 2 and np.asarray(stopping).dtype.kind == "f"):
        eps = np.asarray(stopping, dtype=float)
        if eps.shape != (n, T + 1):
            raise ScenarioError(f"threshold table must have shape ({n}, {T + 1})")
        regions = [[scenario.points(i, t) <= eps[i, t] for t in range(T + 1)] for i in range(n)]
    else:
        regions = [[np.asarray(stopping[i][t], dtype=bool) for t in range(T + 1)] for i in range(n)]
    for i in range(n):
        regions[i][T] = np.ones(len(scenario.grids[i][T]), dtype=bool)
    return regions


def _strategy_table(scenario: Scenario, strategies, i: int, t: int) -> np.ndarray:
    m = len(scenario.grids[i][t])
    if strategies is None or strategies[i] is None:
        return np.arange(m)
    try:
        tab = strategies[i][t]
    except IndexError:
        tab = np.full(m, -1)
    if tab is None:
        return np.arange(m)
    tab = np.asarray(tab, dtype=np.int64)
    if tab.shape != (m,):
        out = np.full(m, -1)
        out[:min(m, tab.size)] = tab.ravel()[:m]
        tab = out
    return tab


def simulate(scenario: Scenario, rules=None, strategies=None, stopping=None, seed: int = 0,
             n_paths: int = 1, allocation_rule: AllocationRule | None = None) -> Trajectory:
    """Simulate n_paths independent paths of the population.

    strategies[i][t] maps true-type indices to report indices (None = truthful);
    stopping is None (stay until T), a threshold table (n, T+1) or boolean
    regions [i][t]. Every agent stops at T. Payments come from `rules`
    (rho when continuing, gamma + beta when stopping); absent agents count as
    the lowest report in payment tables. Each agent draws from its own stream.
    """
    sigma = allocation_rule or (rules.sigma if rules is not None else scenario.allocation_rule)
    n, T, N = scenario.n, scenario.T, int(n_paths)
    regions = _stop_regions(scenario, stopping)
    draws = np.stack([rng.random((N, T + 1)) for rng in agent_streams(seed, n)], axis=1)   # (N, n, T+1)
    shape = (N, n, T + 1)
    true_idx = np.full(shape, -1, dtype=np.int64)
    report_idx = np.full(shape, -1, dtype=np.int64)
    true_x, report_x, alloc, util, pay = (np.full(shape, np.nan) for _ in range(5))
    stopped = np.zeros(shape, dtype=bool)
    stop_time = np.full((N, n), T, dtype=np.int64)
    cur = np.stack([inverse_cdf_index(scenario.initial_dists[i], draws[:, i, 0]) for i in range(n)], axis=1)
    present = np.ones((N, n), dtype=bool)
    for t in range(T + 1):
        rep = np.empty((N, n), dtype=np.int64)
        for i in range(n):
            tab = _strategy_table(scenario, strategies, i, t)
            r = tab[cur[:, i]]
            bad = present[:, i] & (r < 0)
            if np.any(bad):
                x = scenario.points(i, t)[cur[np.flatnonzero(bad)[0], i]]
                raise ScenarioError(f"strategy table missing entry for agent {i}, period {t}, type {x}")
            rep[:, i] = np.where(present[:, i], r, 0)
        # allocation uses the absent index, payments the lowest-report proxy
        absent_idx = np.array(scenario.sizes(t))
        alloc_prof = np.where(present, rep, absent_idx[None, :])
        lev = sigma.tables[t][tuple(alloc_prof.T)]                       # (N, n)
        pay_prof = tuple(np.where(present, rep, 0).T)
        for i in range(n):
            p = present[:, i]
            ti = np.where(p, cur[:, i], -1)
            true_idx[:, i, t] = ti
            report_idx[:, i, t] = np.where(p, rep[:, i], -1)
            grid = scenario.points(i, t)
            true_x[p, i, t] = grid[cur[p, i]]
            report_x[p, i, t] = grid[rep[p, i]]
            alloc[p, i, t] = sigma.levels[lev[p, i]]
            util[p, i, t] = scenario.utilities[i].tables[t][cur[p, i], lev[p, i]]
            stop_now = p & regions[i][t][cur[:, i]]
            stopped[:, i, t] = stop_now
            if rules is not None:
                cont_pay = rules.rho[i][t][pay_prof]
                stop_pay = rules.gamma[i][t][pay_prof] + rules.beta[i, t]
                pay[p, i, t] = np.where(stop_now, stop_pay, cont_pay)[p]
            else:
                pay[p, i, t] = 0.0
            stop_time[stop_now, i] = t
        if t == T:
            break
        nxt = np.zeros_like(cur)
        for i in range(n):
            K = scenario.kernels[i][t].table
            cdf = np.cumsum(K, axis=2)[cur[:, i], lev[:, i]]             # (N, m_next)
            k = (cdf < draws[:, i, t + 1][:, None]).sum(axis=1)
            nxt[:, i] = np.minimum(k, K.shape[2] - 1)
        present = present & ~stopped[:, :, t]
        cur = np.where(present, nxt, 0)
    return Trajectory(true_idx, true_x, report_idx, report_x, alloc, util, pay, stopped, stop_time)


def sample_path(scenario: Scenario, allocation_rule: AllocationRule | None = None, reporting_strategies=None,
                stopping_rules=None, seed: int = 0, rules=None) -> Trajectory:
    """A single seeded path (a batch of one)."""
    return simulate(scenario, rules, reporting_strategies, stopping_rules, seed, 1, allocation_rule)


def update_belief(prior, own_report: int, own_allocation: int, scenario: Scenario, agent: int, t: int,
                  allocation_rule: AllocationRule | None = None) -> np.ndarray:
    """Posterior over the others' period-(t+1) type profile.

    The prior over others' period-t profiles is conditioned on the observed
    allocation level index of `agent` given its own report, then pushed through
    the others' truthful transition kernels.
    """
    sigma = allocation_rule or scenario.allocation_rule
    prior = np.asarray(prior, dtype=float)
    others = [j for j in range(scenario.n) if j != agent]
    expected = tuple(len(scenario.grids[j][t]) for j in others)
    if prior.shape != expected:
        raise ScenarioError(f"prior shape {prior.shape} does not match the others' grids {expected}")
    tab = np.take(sigma.present_table(t), own_report, axis=agent)       # (others..., n)
    like = (tab[..., agent] == own_allocation).astype(float)
    post = prior * like
    z = post.sum()
    if z <= 0:
        nxt = tuple(len(scenario.grids[j][t + 1]) for j in others) if t < scenario.T else expected
        return np.full(nxt, 1.0 / np.prod(nxt))
    post = post / z
    if t == scenario.T:
        return post
    out = np.zeros(tuple(len(scenario.grids[j][t + 1]) for j in others))
    for prof in zip(*np.nonzero(post)):
        step = np.array(1.0)
        for pos, j in enumerate(others):
            lev = tab[prof][j]
            step = np.multiply.outer(step, scenario.kernels[j][t].table[prof[pos], lev])
        out += post[prof] * step
    return out / out.sum()
