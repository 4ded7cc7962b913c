"""Command-line entry point.

    fisherlc scenario run <name> [--verify]
    fisherlc solve {centralized|fixedpoint|ama|admm|admm-nh} --market m.json
    fisherlc experiment {fixedpoint|admm-vs-ama|nonhomogeneous}
    fisherlc verify --market m.json --price p.csv

Exit codes: 0 success, 1 solver did not converge, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adm import ADMM, ADMM_NH, AMA, AdmConfig, ConvergenceTrace, ama_beta_bound, run_adm
from .bpsop import FixedPointResult, existence_test_homogeneous, fixed_point, solve_bpsop
from .iop import demand_sweep, solve_iop_auto
from .kernels import SolverError
from .market import COBB_DOUGLAS, LINEAR, SCENARIOS, Market, MarketError, load_scenario, random_market
from .verify import check_equilibrium, refute_equilibrium_grid

log = logging.getLogger("fisherlc")

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_USAGE = 0, 1, 2

SOLVE_VARIANTS = {"ama": AMA, "admm": ADMM, "admm-nh": ADMM_NH}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: list
    parameters: dict
    market_hash: str | None = None
    artifacts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# --- output helpers ------------------------------------------------------------------

def export_trace(trace, fmt: str, path: str | Path | None = None) -> str:
    """Serialize a trace (ADM or fixed-point) as CSV or JSON; write it if ``path`` is given."""
    if fmt not in ("csv", "json"):
        raise ValueError("format must be csv or json")
    if isinstance(trace, FixedPointResult):
        text = trace.residual_csv() if fmt == "csv" else trace.to_json() + "\n"
    elif isinstance(trace, ConvergenceTrace):
        text = trace.to_csv() if fmt == "csv" else json.dumps(trace.to_dict(), indent=2) + "\n"
    else:
        raise TypeError(f"cannot export {type(trace).__name__}")
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror or exc}") from None
    return text


def _emit(payload: dict, out: str | None, artifacts: list) -> None:
    text = json.dumps(payload, indent=2, default=_jsonable) + "\n"
    if out:
        Path(out).write_text(text)
        artifacts.append(str(out))
    else:
        sys.stdout.write(text)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    raise TypeError(f"not serializable: {type(v).__name__}")


def _sibling(out: str, tag: str) -> Path:
    p = Path(out)
    return p.with_name(f"{p.stem}-{tag}{p.suffix}")


def _manifest_path(out: str) -> Path:
    p = Path(out)
    return p.with_name(p.stem + ".manifest.json")


def _write_manifest(manifest: RunManifest, out: str | None) -> None:
    if out:
        path = _manifest_path(out)
        manifest.artifacts.append(str(path))
        path.write_text(manifest.to_json() + "\n")
    else:
        sys.stderr.write(manifest.to_json() + "\n")


def _load_market(path: str | None) -> Market:
    if not path:
        raise UsageError("--market is required")
    try:
        return Market.from_json(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read market file {path}: {exc.strerror or exc}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"market file {path} is invalid: {exc}") from None


def _load_price(text: str | None) -> np.ndarray:
    if not text:
        raise UsageError("--price is required")
    path = Path(text)
    try:
        raw = path.read_text() if path.exists() else text
    except OSError as exc:
        raise UsageError(f"cannot read price file {text}: {exc.strerror or exc}") from None
    try:
        return np.array([float(v) for v in raw.replace("\n", ",").split(",") if v.strip()])
    except ValueError:
        raise UsageError(f"price must be comma-separated numbers, got {raw!r}") from None


# --- commands ------------------------------------------------------------------------

def _fixed_point_payload(res: FixedPointResult) -> dict:
    return {"converged": res.converged, "iterations": res.iterations, "final_residual": res.residuals[-1],
            "lambda": res.lam, "prices": res.solution.p, "allocation": res.solution.x}


def cmd_scenario(args, manifest: RunManifest) -> int:
    if args.action != "run":
        raise UsageError("scenario supports only 'run'")
    try:
        market, exp = load_scenario(args.name)
    except MarketError as exc:
        raise UsageError(str(exc)) from None
    manifest.market_hash = market.digest()
    report: dict = {"scenario": exp.name, "description": exp.description}
    code = EXIT_OK
    if exp.name == "nonexist-homog":
        test = existence_test_homogeneous(market)
        report["existence_test"] = {"exists": test.exists, "capacity_slack": test.slack}
    elif exp.name == "nonexist-knapsack":
        grid = refute_equilibrium_grid(market, (0.1, 20.0), 20, args.tol or 1e-6)
        report["grid_refutation"] = grid.to_dict()
    elif exp.name == "giffen":
        agent = market.agents[0]
        good = exp.notes["good"]
        sweep = demand_sweep(agent, exp.probe_prices[0], good, [exp.probe_prices[0][good], exp.probe_prices[1][good]])
        report["sweep"] = {"prices": sweep.prices, "demand": sweep.demand, "giffen": sweep.giffen}
    elif exp.name.startswith("vp-example"):
        sol = solve_iop_auto(market.agents[0], exp.probe_prices[0])
        report["bundle"] = sol.x
        report["method"] = sol.method
    else:
        res = fixed_point(market, tol=args.tol or 1e-5, max_iter=args.max_iter or 500)
        report["fixed_point"] = _fixed_point_payload(res)
        if not res.converged:
            code = EXIT_NOT_CONVERGED
    if args.verify:
        # documented prices are exact; fixed-point prices are only as accurate as the iteration
        targets = [(p, 1e-6) for p in exp.equilibria]
        if "fixed_point" in report:
            targets.append((np.asarray(report["fixed_point"]["prices"]), 10 * (args.tol or 1e-5)))
        prices = [p for p, _ in targets]
        checks = [check_equilibrium(market, p, tol).to_dict() for p, tol in targets]
        for p in exp.non_equilibria:
            checks.append(check_equilibrium(market, p, 1e-6).to_dict())
        report["verification"] = checks
        if checks:
            report["is_equilibrium"] = all(c["is_equilibrium"] for c in checks[:len(prices)])
    _emit(report, args.out, manifest.artifacts)
    return code


def cmd_solve(args, manifest: RunManifest) -> int:
    market = _load_market(args.market)
    manifest.market_hash = market.digest()
    if args.method == "centralized":
        sol = solve_bpsop(market, tol=args.tol or 1e-9)
        _emit(sol.to_dict(), args.out, manifest.artifacts)
        return EXIT_OK
    if args.method == "fixedpoint":
        res = fixed_point(market, tol=args.tol or 1e-5, max_iter=args.max_iter or 500)
        _write_trace_or_report(res, _fixed_point_payload(res), args, manifest)
        return EXIT_OK if res.converged else EXIT_NOT_CONVERGED
    cfg = AdmConfig(SOLVE_VARIANTS[args.method], args.beta or 1.0, args.tol or 1e-4, args.max_iter or 5000)
    try:
        trace, state = run_adm(market, cfg)
    except MarketError as exc:
        raise UsageError(str(exc)) from None
    summary = {"converged": trace.converged, "iterations": trace.iterations, "prices": state.p,
               "allocation": state.x, "message": trace.message}
    _write_trace_or_report(trace, summary, args, manifest)
    return EXIT_OK if trace.converged else EXIT_NOT_CONVERGED


def _write_trace_or_report(trace, summary: dict, args, manifest: RunManifest) -> None:
    if args.out:
        export_trace(trace, args.format, args.out)
        manifest.artifacts.append(str(args.out))
        sys.stdout.write(json.dumps(summary, indent=2, default=_jsonable) + "\n")
    else:
        sys.stdout.write(export_trace(trace, args.format))


def cmd_experiment(args, manifest: RunManifest) -> int:
    seed = 0 if args.seed is None else args.seed
    manifest.parameters["seed"] = seed
    if args.name == "fixedpoint":
        market = random_market(seed, 200, 6, [[0, 1], [2, 3], [4, 5]], 100.0)
        tol = args.tol or 1e-3
        max_iter = args.max_iter or 60
        manifest.parameters.update(tol=tol, max_iter=max_iter)
        manifest.market_hash = market.digest()
        t = time.perf_counter()
        res = fixed_point(market, tol=tol, max_iter=max_iter)
        manifest.timings["fixed_point_s"] = time.perf_counter() - t
        _write_trace_or_report(res, _fixed_point_payload(res), args, manifest)
        return EXIT_OK if res.converged else EXIT_NOT_CONVERGED
    if args.name == "admm-vs-ama":
        utility = COBB_DOUGLAS if args.utility == "cobb-douglas" else LINEAR
        market = random_market(seed, 10, 10, capacity=1.0, utility=utility)
        manifest.market_hash = market.digest()
        tol = args.tol or 1e-3
        max_iter = args.max_iter or 2000
        beta = args.beta or 1.0
        if args.ama_beta is not None:
            ama_beta = args.ama_beta
        elif utility == LINEAR:
            ama_beta = 0.1
        else:
            ama_beta = 0.5 * ama_beta_bound(market).beta_max
        manifest.parameters.update(tol=tol, max_iter=max_iter, beta=beta, ama_beta=ama_beta, utility=utility)
        runs = {}
        code = EXIT_OK
        for tag, variant, b in (("admm", ADMM, beta), ("ama", AMA, ama_beta)):
            t = time.perf_counter()
            trace, state = run_adm(market, AdmConfig(variant, b, tol, max_iter))
            manifest.timings[f"{tag}_s"] = time.perf_counter() - t
            runs[tag] = {"converged": trace.converged, "diverged": trace.diverged, "iterations": trace.iterations,
                         "final_max_residual": trace.max_residual() if trace.iterations else None,
                         "prices": state.p}
            if args.out:
                path = _sibling(args.out, tag)
                export_trace(trace, args.format, path)
                manifest.artifacts.append(str(path))
            if tag == "admm" and not trace.converged:
                code = EXIT_NOT_CONVERGED
        sys.stdout.write(json.dumps(runs, indent=2, default=_jsonable) + "\n")
        return code
    if args.name == "nonhomogeneous":
        market = random_market(seed, 10, 20, [list(range(10)), list(range(10, 20))], 0.5)
        manifest.market_hash = market.digest()
        cfg = AdmConfig(ADMM_NH, args.beta or 1.0, args.tol or 1e-3, args.max_iter or 300)
        manifest.parameters.update(tol=cfg.tol, max_iter=cfg.max_iter, beta=cfg.beta)
        t = time.perf_counter()
        trace, state = run_adm(market, cfg)
        manifest.timings["admm_nh_s"] = time.perf_counter() - t
        summary = {"converged": trace.converged, "iterations": trace.iterations, "prices": state.p,
                   "lambda": trace.lambdas[-1] if trace.lambdas else None}
        _write_trace_or_report(trace, summary, args, manifest)
        return EXIT_OK if trace.converged else EXIT_NOT_CONVERGED
    raise UsageError(f"unknown experiment {args.name!r}")


def cmd_verify(args, manifest: RunManifest) -> int:
    market = _load_market(args.market)
    manifest.market_hash = market.digest()
    p = _load_price(args.price)
    if p.shape != (market.m,):
        raise UsageError(f"price has {p.size} entries but the market has {market.m} goods")
    report = check_equilibrium(market, p, args.tol or 1e-6)
    _emit(report.to_dict(), args.out, manifest.artifacts)
    return EXIT_OK


# --- parser --------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"), default="csv")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fisherlc", description="Fisher markets with per-agent linear constraints")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sc = sub.add_parser("scenario", help="run a named example market")
    sc.add_argument("action", choices=("run",))
    sc.add_argument("name", choices=sorted(SCENARIOS))
    sc.add_argument("--verify", action="store_true")
    _common(sc)

    so = sub.add_parser("solve", help="solve a market given as JSON")
    so.add_argument("method", choices=("centralized", "fixedpoint", *SOLVE_VARIANTS))
    so.add_argument("--market", required=True)
    _common(so)

    ex = sub.add_parser("experiment", help="reproduce a convergence experiment")
    ex.add_argument("name", choices=("fixedpoint", "admm-vs-ama", "nonhomogeneous"))
    ex.add_argument("--utility", choices=("linear", "cobb-douglas"), default="linear")
    ex.add_argument("--ama-beta", type=float, dest="ama_beta")
    _common(ex)

    ve = sub.add_parser("verify", help="check whether a price vector is an equilibrium")
    ve.add_argument("--market", required=True)
    ve.add_argument("--price", required=True, help="comma-separated prices or a file holding them")
    _common(ve)
    return parser


COMMANDS = {"scenario": cmd_scenario, "solve": cmd_solve, "experiment": cmd_experiment, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
    except UsageError as exc:
        sys.stderr.write(f"fisherlc: {exc}\n\n{parser.format_help()}")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    params = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    manifest = RunManifest(command=argv, parameters=params)
    t = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, manifest)
    except UsageError as exc:
        sys.stderr.write(f"fisherlc: {exc}\n")
        return EXIT_USAGE
    except OSError as exc:
        sys.stderr.write(f"fisherlc: {exc}\n")
        return EXIT_USAGE
    except (SolverError, MarketError) as exc:
        sys.stderr.write(f"fisherlc: solver failed: {exc}\n")
        return EXIT_NOT_CONVERGED
    manifest.timings["total_s"] = time.perf_counter() - t
    if args.command == "experiment" or args.out:
        _write_manifest(manifest, args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
