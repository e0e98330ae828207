"""Mechanism rules: an allocation rule plus the three payment tables."""
from __future__ import annotations

import json
import numbers
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenario import AllocationRule, Scenario, ScenarioError


class RulesError(ScenarioError):
    """Malformed mechanism rules or rules bundle."""


def _ro(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MechanismRules:
    """sigma plus payments.

    rho[i][t] and gamma[i][t] are indexed by the full-presence joint report
    profile of period t (one axis per agent). beta has shape (n, T + 1) and
    holds the posted price paid when agent i stops at period t; it never
    depends on reports.
    """

    sigma: AllocationRule
    rho: tuple
    gamma: tuple
    beta: np.ndarray

    def __post_init__(self):
        rho = tuple(tuple(_ro(a) for a in per) for per in self.rho)
        gamma = tuple(tuple(_ro(a) for a in per) for per in self.gamma)
        beta = _ro(self.beta)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "beta", beta)
        n = self.sigma.n
        T = len(self.sigma.tables) - 1
        if beta.shape != (n, T + 1):
            raise RulesError(f"beta must have shape ({n}, {T + 1}); got {beta.shape}")
        for name, tab in (("rho", rho), ("gamma", gamma)):
            if len(tab) != n or any(len(per) != T + 1 for per in tab):
                raise RulesError(f"{name} must hold {T + 1} period tables for each of {n} agents")
            for i, per in enumerate(tab):
                for t, arr in enumerate(per):
                    exp = self.sigma.present_table(t).shape[:-1]
                    if arr.shape != exp:
                        raise RulesError(f"{name}[{i}][{t}] has shape {arr.shape}, expected {exp}")
                    if not np.all(np.isfinite(arr)):
                        raise RulesError(f"{name}[{i}][{t}] has non-finite entries")
        if not np.all(np.isfinite(beta)):
            raise RulesError("beta has non-finite entries")

    @property
    def n(self) -> int:
        return self.sigma.n

    @property
    def T(self) -> int:
        return len(self.sigma.tables) - 1

    def replace(self, **kw) -> "MechanismRules":
        args = dict(sigma=self.sigma, rho=self.rho, gamma=self.gamma, beta=self.beta)
        args.update(kw)
        return MechanismRules(**args)

    def __add__(self, other: "MechanismRules") -> "MechanismRules":
        return self.replace(
            rho=tuple(tuple(a + b for a, b in zip(p, q)) for p, q in zip(self.rho, other.rho)),
            gamma=tuple(tuple(a + b for a, b in zip(p, q)) for p, q in zip(self.gamma, other.gamma)),
            beta=self.beta + other.beta,
        )

    def scaled(self, c: float) -> "MechanismRules":
        return self.replace(
            rho=tuple(tuple(c * a for a in p) for p in self.rho),
            gamma=tuple(tuple(c * a for a in p) for p in self.gamma),
            beta=c * self.beta,
        )

    def with_gamma_cell(self, agent: int, t: int, profile, delta: float) -> "MechanismRules":
        """Copy with gamma[agent][t][profile] shifted by delta."""
        gamma = [list(p) for p in self.gamma]
        arr = np.array(gamma[agent][t])
        arr[tuple(profile)] += delta
        gamma[agent][t] = arr
        return self.replace(gamma=tuple(tuple(p) for p in gamma))


def zero_rules(scenario: Scenario, sigma: AllocationRule | None = None) -> MechanismRules:
    sigma = sigma or scenario.allocation_rule
    n, T = scenario.n, scenario.T
    zeros = tuple(tuple(np.zeros(scenario.sizes(t)) for t in range(T + 1)) for _ in range(n))
    return MechanismRules(sigma, zeros, zeros, np.zeros((n, T + 1)))


def constant_rules(scenario: Scenario, rho=0.0, gamma=0.0, beta=0.0) -> MechanismRules:
    n, T = scenario.n, scenario.T
    r = tuple(tuple(np.full(scenario.sizes(t), float(rho)) for t in range(T + 1)) for _ in range(n))
    g = tuple(tuple(np.full(scenario.sizes(t), float(gamma)) for t in range(T + 1)) for _ in range(n))
    return MechanismRules(scenario.allocation_rule, r, g, np.full((n, T + 1), float(beta)))


# ---------------------------------------------------------------------------
# bundle IO

def rules_to_dict(rules: MechanismRules) -> dict:
    return {
        "allocation_levels": rules.sigma.levels.tolist(),
        "allocation_name": rules.sigma.name,
        "allocation": [tab.tolist() for tab in rules.sigma.tables],
        "rho": [[a.tolist() for a in per] for per in rules.rho],
        "gamma": [[a.tolist() for a in per] for per in rules.gamma],
        "beta": rules.beta.tolist(),
    }


def rules_from_dict(doc: dict, scenario: Scenario) -> MechanismRules:
    for key in ("allocation", "rho", "gamma", "beta"):
        if key not in doc:
            raise RulesError(f"schema violation: missing field '{key}'")
    beta = doc["beta"]
    if not isinstance(beta, list) or len(beta) != scenario.n:
        raise RulesError("schema violation: field 'beta' must list one price sequence per agent")
    for i, row in enumerate(beta):
        if not isinstance(row, list) or not all(isinstance(v, numbers.Real) and not isinstance(v, bool) for v in row):
            raise RulesError(f"schema violation: field 'beta[{i}]' must be a flat list of numbers "
                             "(posted prices cannot depend on reports)")
    levels = np.asarray(doc.get("allocation_levels", scenario.levels.tolist()), dtype=float)
    try:
        sigma = AllocationRule(levels, tuple(np.asarray(t, dtype=np.int64) for t in doc["allocation"]),
                               doc.get("allocation_name", "tabulated"))
        return MechanismRules(sigma,
                              tuple(tuple(np.asarray(a, float) for a in per) for per in doc["rho"]),
                              tuple(tuple(np.asarray(a, float) for a in per) for per in doc["gamma"]),
                              np.asarray(beta, dtype=float))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, RulesError):
            raise
        raise RulesError(f"schema violation: {exc}") from exc


def save_rules(rules: MechanismRules, path) -> None:
    from .io import atomic_write_text
    atomic_write_text(Path(path), json.dumps(rules_to_dict(rules), indent=1))


def load_rules(path, scenario: Scenario) -> MechanismRules:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RulesError(f"schema violation: {path} is not valid JSON ({exc})") from exc
    return rules_from_dict(doc, scenario)
