"""Command-line front end.

Exit codes: 0 success / PASS, 1 load or schema failure, 2 internal invariant
violation, 3 incentive-compatibility failure, 4 sufficient conditions fail
while the exact audit passes.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .io import atomic_write_csv, atomic_write_json
from .mechanism import RulesError, load_rules, save_rules, zero_rules
from .planner import build_population_schedule, check_participation, exact_chain, search_allocation, write_search_csv
from .scenario import BUILTINS, ScenarioError, load_scenario, simulate
from .stopping import solve_stopping
from .synthesis import synthesize
from .verification import TOL_EXACT, OracleLimits, audit, write_audit

EXIT_OK, EXIT_LOAD, EXIT_INVARIANT, EXIT_FAIL_IC, EXIT_FAIL_SUFFICIENT = 0, 1, 2, 3, 4


class LoadError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    scenario_path: Optional[str]
    builtin: Optional[str]
    rules_path: Optional[str]
    output_dir: Path
    seed: int
    tol_ic: float
    oracle_limits: OracleLimits
    mc_samples: int
    run_oracle: bool
    runs: list

    def __post_init__(self):
        if not self.tol_ic > 0:
            raise LoadError("--tol-ic must be positive")
        if self.mc_samples < 1:
            raise LoadError("--mc-samples must be at least 1")


def _scenario(cfg: RunConfig):
    if cfg.builtin:
        if cfg.builtin not in BUILTINS:
            raise LoadError(f"unknown builtin scenario {cfg.builtin!r} (choose from {', '.join(BUILTINS)})")
        return BUILTINS[cfg.builtin]()
    if not cfg.scenario_path:
        raise LoadError("one of --scenario or --builtin is required")
    path = Path(cfg.scenario_path)
    if not path.is_file():
        raise LoadError(f"scenario file not found: {path}")
    try:
        return load_scenario(path)
    except (ScenarioError, OSError) as exc:
        raise LoadError(f"{path}: {exc}") from exc


def _rules(cfg: RunConfig, scenario, required: bool):
    if not cfg.rules_path:
        if required:
            raise LoadError("--rules is required for this command")
        return None
    path = Path(cfg.rules_path)
    if not path.is_file():
        raise LoadError(f"rules file not found: {path}")
    try:
        return load_rules(path, scenario)
    except (RulesError, ScenarioError, OSError) as exc:
        raise LoadError(f"{path}: {exc}") from exc


def _nan_to_none(a) -> list:
    return [[None if np.isnan(v) else float(v) for v in row] for row in np.asarray(a, dtype=float)]


def cmd_synthesize(cfg: RunConfig) -> int:
    sc = _scenario(cfg)
    res = synthesize(sc)
    out = cfg.output_dir
    save_rules(res.rules, out / "rules.json")
    rows = []
    for i in range(sc.n):
        for t in range(sc.T + 1):
            for k, x in enumerate(sc.points(i, t)):
                rows.append((i, t, float(x), float(res.phi.phi_S[i][t][k]), float(res.phi.phi_Sbar[i][t][k])))
    atomic_write_csv(out / "characterizing.csv", ("agent", "period", "grid_point", "phi_S", "phi_Sbar"), rows)
    rows = []
    for i in range(sc.n):
        for t in range(sc.T + 1):
            for k, x in enumerate(sc.points(i, t)):
                for tau in range(t, sc.T + 1):
                    rows.append((i, t, float(x), tau, float(res.phi.h[i][t][k, tau])))
    atomic_write_csv(out / "sensitivity.csv", ("agent", "period", "grid_point", "horizon", "h"), rows)
    if not np.all(np.isfinite(res.rules.beta)):
        raise AssertionError("synthesized posted prices are not finite")
    atomic_write_json(out / "synthesize_summary.json", {
        "scenario": sc.name,
        "allocation_rule": res.rules.sigma.name,
        "target_epsilon": _nan_to_none(res.target_epsilon),
        "epsilon": _nan_to_none(res.epsilon),
        "thresholds_consistent": res.consistent,
        "beta": res.rules.beta.tolist(),
        "threshold_identity_residuals": _nan_to_none(res.identity),
        "threshold_identity_max": res.identity_max,
    })
    print(f"synthesized {sc.name}: max |beta_t - g(eps_t)| = {res.identity_max:.3g}")
    return EXIT_OK


def cmd_audit(cfg: RunConfig) -> int:
    sc = _scenario(cfg)
    rules = _rules(cfg, sc, required=True)
    rep = audit(sc, rules, None, cfg.tol_ic, cfg.oracle_limits, cfg.run_oracle)
    write_audit(rep, sc, cfg.output_dir)
    print(json.dumps(rep.summary()["verdicts"], sort_keys=True))
    if not rep.passed:
        print(f"FAIL-IC: delta_ic = {rep.delta_ic:.6g}; worst witness {rep.one_shot.witness}")
        return EXIT_FAIL_IC
    if not rep.sufficient_passed:
        print("FAIL-sufficient-only: the exact audit passes but a sufficient condition fails")
        return EXIT_FAIL_SUFFICIENT
    print(f"PASS: delta_ic = {rep.delta_ic:.3g}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    sc = _scenario(cfg)
    rules = _rules(cfg, sc, required=False) or zero_rules(sc)
    sol = solve_stopping(sc, rules)
    N = cfg.mc_samples
    tr = simulate(sc, rules, None, sol.region, cfg.seed, N)
    header = ("period", "agent", "true_x", "report", "allocation", "payment", "stopped")
    if N == 1:
        atomic_write_csv(cfg.output_dir / "trajectory.csv", header, tr.rows(0))
    else:
        rows = ((k,) + row for k in range(N) for row in tr.rows(k))
        atomic_write_csv(cfg.output_dir / "trajectory.csv", ("path",) + header, rows)
    pay = tr.total_payoff()
    st = tr.stop_time.astype(float)
    se = (lambda a: (a.std(axis=0, ddof=1) / np.sqrt(N)).tolist() if N > 1 else [None] * sc.n)
    chain = exact_chain(sc, rules, sol.region)
    atomic_write_json(cfg.output_dir / "simulate_summary.json", {
        "scenario": sc.name, "seed": cfg.seed, "paths": N,
        "payoff_mean": pay.mean(axis=0).tolist(), "payoff_stderr": se(pay),
        "tau_mean": st.mean(axis=0).tolist(), "tau_stderr": se(st),
        "payoff_exact": chain.payoff.tolist(), "tau_exact": chain.tau_star.tolist(),
    })
    print(f"simulated {N} path(s) of {sc.name} with seed {cfg.seed}")
    return EXIT_OK


def cmd_search(cfg: RunConfig) -> int:
    sc = _scenario(cfg)
    res = search_allocation(sc, tol_ic=cfg.tol_ic, oracle_limits=cfg.oracle_limits, run_oracle=cfg.run_oracle)
    write_search_csv(res, sc, cfg.output_dir / "search_results.csv")
    best = res.best
    sched = build_population_schedule(sc, best.tau_star)
    atomic_write_json(cfg.output_dir / "search_summary.json", {
        "scenario": sc.name,
        "best_candidate": best.candidate_id, "best_name": best.name,
        "best_passed": best.passed, "no_passing_candidate": res.no_pass,
        "cp_objective": best.cp_objective, "tau_star": best.tau_star.tolist(),
        "schedule_order": [list(o) for o in sched.order],
        "participation": [v.exact_passed for v in check_participation(sc, best.rules)],
    })
    save_rules(best.rules, cfg.output_dir / "best_rules.json")
    print(f"best candidate {best.candidate_id} ({best.name}), cp objective {best.cp_objective:.6g}"
          + (" [no candidate passed]" if res.no_pass else ""))
    return EXIT_FAIL_IC if res.no_pass else EXIT_OK


def _flatten(prefix: str, value, out: dict) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else k, v, out)
    elif isinstance(value, list):
        for k, v in enumerate(value):
            _flatten(f"{prefix}[{k}]", v, out)
    else:
        out[prefix] = value


def cmd_report(cfg: RunConfig) -> int:
    dirs = [Path(d) for d in cfg.runs] or [cfg.output_dir]
    rows, merged = [], {}
    for d in dirs:
        files = sorted(d.glob("*_summary.json"))
        if not files:
            raise LoadError(f"no run summaries found in {d}")
        for f in files:
            try:
                doc = json.loads(f.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise LoadError(f"{f}: not valid JSON ({exc})") from exc
            flat: dict = {}
            _flatten("", doc, flat)
            merged[f"{d}/{f.name}"] = doc
            for k in sorted(flat):
                v = flat[k]
                rows.append((str(d), f.stem, k, "" if v is None else v))
    atomic_write_csv(cfg.output_dir / "report.csv", ("run", "artifact", "key", "value"), rows)
    atomic_write_json(cfg.output_dir / "report.json", merged)
    print(f"merged {len(merged)} summaries into {cfg.output_dir / 'report.csv'}")
    return EXIT_OK


COMMANDS = {"synthesize": cmd_synthesize, "audit": cmd_audit, "simulate": cmd_simulate,
            "search": cmd_search, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynmech", description="Payment synthesis and honesty audits "
                                "for dynamic allocation mechanisms with optimal stopping.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--scenario", help="scenario JSON file")
        s.add_argument("--builtin", help=f"builtin scenario ({', '.join(BUILTINS)})")
        s.add_argument("--rules", help="mechanism rules bundle (JSON)")
        s.add_argument("--out", default="out", help="output directory (default: out)")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--tol-ic", type=float, default=TOL_EXACT)
        s.add_argument("--oracle-max-grid", type=int, default=OracleLimits.max_grid)
        s.add_argument("--oracle-max-T", type=int, default=OracleLimits.max_T)
        s.add_argument("--no-oracle", action="store_true", help="skip the full deviation oracle")
        s.add_argument("--mc-samples", type=int, default=1)
        if name == "report":
            s.add_argument("runs", nargs="*", help="run directories to merge (default: --out)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig(args.command, args.scenario, args.builtin, args.rules, Path(args.out), args.seed,
                        args.tol_ic, OracleLimits(max_grid=args.oracle_max_grid, max_T=args.oracle_max_T),
                        args.mc_samples, not args.no_oracle, getattr(args, "runs", []))
        return COMMANDS[args.command](cfg)
    except LoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    except (AssertionError, ValueError, ArithmeticError) as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
