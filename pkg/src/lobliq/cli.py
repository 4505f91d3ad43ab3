"""Command-line front end: ``lobliq estimate|solve|simulate|validate-kernel|policy-export``.

Exit codes: 0 success, 2 bad input data, 3 non-convergence, 4 failed
validation, 5 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, MaxIterations, NonConvergence, NonTermination
from .model import ModelParams, SystemState
from .presets import yhoo_params

log = logging.getLogger("lobliq")

EXIT_OK, EXIT_DATA, EXIT_CONVERGENCE, EXIT_VALIDATION, EXIT_USAGE = 0, 2, 3, 4, 5

DEFAULTS = {
    "estimate": dict(latency=0.0, n_vol=25, tick=100.0, no_window=False, rounding="ceil",
                     rho=1.0, v_bar=9),
    "solve": dict(preset="yhoo", chi=2, horizon=10.0, tol=1e-3, gamma=1.0, n_lambda=101,
                  substeps=20, m_max=None, l_max=None, sweep="ordered", seed=0, no_monotone=False,
                  save_tables=False, max_updates=None),
    "simulate": dict(episodes=100_000, seed=7, lambda0=None, state="1,5,5,50,0,2",
                     baseline=None, trace=None),
    "validate-kernel": dict(preset="yhoo", tables=None, keys=20, draws=100_000, seed=0,
                            m_max=2, l_max=2, horizon=10.0, n_lambda=101, times="1,5,20"),
    "policy-export": dict(j=[1], y=[2], lam=[10.0]),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


OUTPUT_KEYS = ("out", "trace", "save_tables")


def provenance(config: dict, params: ModelParams | None = None) -> dict:
    """Version plus hashes of the settings that determine the result."""
    settings = {k: v for k, v in config.items() if k not in OUTPUT_KEYS}
    out = {"lobliq_version": __version__, "config_hash": _hash(settings)}
    if params is not None:
        out["params_hash"] = _hash(params.to_dict())
    return out


def _load_params(cfg: dict) -> ModelParams:
    if cfg.get("params"):
        path = Path(cfg["params"])
        if not path.exists():
            raise FileNotFoundError(path)
        try:
            return ModelParams.from_json(path)
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: invalid parameters: {exc}") from None
    preset = cfg.get("preset") or "yhoo"
    if preset == "yhoo":
        return yhoo_params(0)
    if preset == "yhoo-1ms":
        return yhoo_params(1)
    raise UsageError(f"unknown preset {preset!r}")


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=float) + "\n")


# --------------------------------------------------------------------------
# Subcommands


def cmd_estimate(cfg: dict) -> int:
    from .estimation import TRADING_WINDOW, estimate_params

    msgs, books = list(cfg.get("messages") or []), list(cfg.get("orderbooks") or [])
    if cfg.get("data_dir"):
        d = Path(cfg["data_dir"])
        if not d.is_dir():
            raise FileNotFoundError(d)
        msgs += sorted(str(p) for p in d.glob("*message*.csv"))
        books += sorted(str(p) for p in d.glob("*orderbook*.csv"))
    if not msgs or len(msgs) != len(books):
        raise UsageError("need matching message and order-book files")
    window = None if cfg["no_window"] else TRADING_WINDOW
    params, report = estimate_params(msgs, books, latency=cfg["latency"], N=cfg["n_vol"],
                                     tick=cfg["tick"], window=window, rho=cfg["rho"],
                                     v_bar=cfg["v_bar"], rounding=cfg["rounding"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    doc = params.to_dict()
    doc["provenance"] = provenance(cfg)
    _write_json(out / "params.json", doc)
    report["provenance"] = provenance(cfg, params)
    _write_json(out / "report.json", report)
    return EXIT_OK


def _tables_for(cfg: dict, params: ModelParams, m_max: int, l_max: int):
    from .kernel import GridSpec, KernelTables, build_tables

    if cfg.get("tables"):
        path = Path(cfg["tables"])
        if not path.exists():
            raise FileNotFoundError(path)
        try:
            return KernelTables.load(path, params)
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from None
    grid = GridSpec(horizon=cfg["horizon"], n_lambda=cfg["n_lambda"],
                    substeps=cfg.get("substeps", 20))
    return build_tables(params, m_max, l_max, grid, keep_cache=False)


def cmd_solve(cfg: dict) -> int:
    from .solver import value_iteration

    params = _load_params(cfg)
    chi = cfg["chi"]
    m_max = chi if cfg["m_max"] is None else cfg["m_max"]
    l_max = chi if cfg["l_max"] is None else cfg["l_max"]
    tables = _tables_for(cfg, params, m_max, l_max)
    extra = {} if cfg["max_updates"] is None else {"max_point_updates": cfg["max_updates"]}
    try:
        sol = value_iteration(params, tables, chi, tol=cfg["tol"], gamma=cfg["gamma"],
                              sweep=cfg["sweep"], m_max=m_max, l_max=l_max, seed=cfg["seed"],
                              monotone=not cfg["no_monotone"], **extra)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    sol.save(out, provenance(cfg, params))
    if cfg["save_tables"]:
        tables.save(out / "tables.npz")
    log.info("residual %.3g after %d sweeps", sol.meta["residual"], sol.meta["sweeps"])
    return EXIT_OK


def _parse_state(text: str) -> SystemState:
    try:
        j, vb, va, p, z, y = (int(x) for x in text.split(","))
    except ValueError:
        raise UsageError("state must be j,v_b,v_a,p,z,y") from None
    return SystemState(j, vb, va, p, z, y)


def cmd_simulate(cfg: dict) -> int:
    from .simulator import TRACE_FIELDS, simulate_episode, simulate_episodes
    from .solver import Solution, baseline_policy

    sol = Solution.load(cfg["policy"])
    params = sol.params
    state = _parse_state(cfg["state"])
    if state.y > sol.chi:
        raise UsageError("initial inventory exceeds the solved chi")
    lam0 = float(sol.lambda_grid[-1] if cfg["lambda0"] is None else cfg["lambda0"])
    policy = sol
    if cfg["baseline"]:
        policy = baseline_policy(cfg["baseline"], sol.m_max, sol.l_max)
    batch = simulate_episodes(policy, state, lam0, params, sol.chi, cfg["episodes"], cfg["seed"],
                              lam_grid=sol.lambda_grid)
    stats = {
        "episodes": int(batch.wealth.size),
        "mean_wealth": batch.mean,
        "stderr": batch.stderr,
        "mean_epochs": float(batch.n_epochs.mean()),
        "max_epochs": int(batch.n_epochs.max()),
        "initial_state": cfg["state"],
        "lambda0": lam0,
        "policy": cfg["baseline"] or "optimal",
        "provenance": provenance(cfg, params),
    }
    if cfg["baseline"] is None:
        stats["value_at_start"] = sol.value_at(state, lam0)
    _write_json(Path(cfg["out"]), stats)
    if cfg["trace"]:
        ep = simulate_episode(policy, state, lam0, params, sol.chi, cfg["seed"],
                              lam_grid=sol.lambda_grid, trace=True)
        lines = [",".join(TRACE_FIELDS)]
        lines += [",".join(str(row[f]) for f in TRACE_FIELDS) for row in ep.trace]
        Path(cfg["trace"]).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_validate_kernel(cfg: dict) -> int:
    from .simulator import check_kernel_tables

    params = _load_params(cfg)
    tables = _tables_for(cfg, params, cfg["m_max"], cfg["l_max"])
    try:
        times = tuple(float(x) for x in str(cfg["times"]).split(","))
        report = check_kernel_tables(tables, n_keys=cfg["keys"], draws=cfg["draws"], seed=cfg["seed"],
                                     times=times, m_max=cfg["m_max"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report["provenance"] = provenance(cfg, params)
    _write_json(Path(cfg["out"]), report)
    if not report["passed"]:
        for r in report["failed"]:
            print(f"kernel mismatch at key {tuple(r['key'])}, t={r['t']}, outcome ({r['jt']},{r['zt']}):"
                  f" z={r['z']:.2f}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def action_codes(m_max: int, l_max: int) -> dict[tuple[int, int], int]:
    pairs = [(m, l) for m in range(m_max + 1) for l in range(l_max + 1)]
    return {a: i for i, a in enumerate(pairs)}


def cmd_policy_export(cfg: dict) -> int:
    from .solver import Solution

    sol = Solution.load(cfg["solution"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    grid = sol.lambda_grid
    codes = action_codes(sol.m_max, sol.l_max)
    head = "".join(f"# {k}: {v}\n" for k, v in sorted(provenance(cfg, sol.params).items()))
    (out / "legend.csv").write_text(head + "code,m,l\n" + "".join(
        f"{c},{m},{l}\n" for (m, l), c in codes.items()))
    N = sol.params.N
    slices = {}
    for j in cfg["j"]:
        for y in cfg["y"]:
            if j not in (1, -1) or not 0 <= y <= sol.chi:
                raise UsageError(f"slice j={j}, y={y} is outside the solved grid")
            for lam in cfg["lam"]:
                k = int(np.argmin(np.abs(grid - lam)))
                if abs(grid[k] - lam) > 1e-9 * max(1.0, lam):
                    raise UsageError(f"lambda={lam} is not a decision-grid node")
                dj = 0 if j == 1 else 1
                m = sol.m[dj, :, :, y, k]
                l = sol.l[dj, :, :, y, k]
                code = np.vectorize(lambda a, b: codes[(int(a), int(b))])(m, l)
                slices[(j, y, lam)] = m
                lines = ["v_b\\v_a," + ",".join(str(v) for v in range(1, N + 1))]
                lines += [f"{vb}," + ",".join(str(c) for c in code[vb - 1]) for vb in range(1, N + 1)]
                name = f"policy_j{'+' if j == 1 else '-'}1_y{y}_lam{lam:g}.csv"
                (out / name).write_text(head + "\n".join(lines) + "\n")
    comparison = []
    for (j, y, lam_a), m_a in slices.items():
        for (j2, y2, lam_b), m_b in slices.items():
            if (j, y) == (j2, y2) and lam_a < lam_b:
                comparison.append(dict(j=j, y=y, lam_short=lam_a, lam_long=lam_b,
                                       share_m_not_smaller=float(np.mean(m_a >= m_b)),
                                       share_m_larger=float(np.mean(m_a > m_b))))
    if comparison:
        _write_json(out / "aggressiveness.json", {"pairs": comparison})
    return EXIT_OK


COMMANDS = {
    "estimate": cmd_estimate,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "validate-kernel": cmd_validate_kernel,
    "policy-export": cmd_policy_export,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lobliq", description="Optimal liquidation in a Level-I limit order book.")
    p.add_argument("--version", action="store_true", help="print the version and exit")
    p.add_argument("--json", action="store_true", help="with --version, print machine-readable JSON")
    p.add_argument("--threads", type=int, help="cap on numba worker threads")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON file with option values; flags take precedence")
        sp.add_argument("--out", help=out_help)

    e = sub.add_parser("estimate", help="calibrate parameters from message/order-book files")
    common(e, "output directory for params.json and report.json")
    e.add_argument("--messages", nargs="+", help="message files")
    e.add_argument("--orderbooks", nargs="+", help="order-book files, same order as --messages")
    e.add_argument("--data-dir", help="directory with *message*.csv and *orderbook*.csv pairs")
    e.add_argument("--latency", type=float, help="seconds cut from the start of each race (default 0)")
    e.add_argument("--n-vol", type=int, help="volume truncation N (default 25)")
    e.add_argument("--tick", type=float, help="price units per tick (default 100)")
    e.add_argument("--no-window", action="store_true", default=None,
                   help="keep the first and last twenty minutes of trading")
    e.add_argument("--rounding", choices=("ceil", "half_up"), help="share-to-unit rounding (default ceil)")
    e.add_argument("--rho", type=float, help="contract multiplier written to params (default 1)")
    e.add_argument("--v-bar", type=int, help="terminal impact depth written to params (default 9)")

    s = sub.add_parser("solve", help="compute the optimal value and policy")
    common(s, "output directory for solution.json, params.json and policy.csv")
    s.add_argument("--params", help="ModelParams JSON (default: --preset)")
    s.add_argument("--preset", choices=("yhoo", "yhoo-1ms"), help="built-in parameters (default yhoo)")
    s.add_argument("--chi", type=int, help="initial inventory in unit size (default 2)")
    s.add_argument("--horizon", type=float, help="maturity T in seconds (default 10)")
    s.add_argument("--tol", type=float, help="sweep-change tolerance (default 1e-3)")
    s.add_argument("--gamma", type=float, help="relaxation weight in (0, 1] (default 1)")
    s.add_argument("--n-lambda", type=int, help="decision-grid points (default 101)")
    s.add_argument("--substeps", type=int, help="quadrature steps per decision step (default 20)")
    s.add_argument("--m-max", type=int, help="largest market order (default chi)")
    s.add_argument("--l-max", type=int, help="largest limit order (default chi)")
    s.add_argument("--sweep", choices=("ordered", "random"), help="update order (default ordered)")
    s.add_argument("--seed", type=int, help="seed for random sweeps (default 0)")
    s.add_argument("--no-monotone", action="store_true", default=None,
                   help="skip the monotone projection in time to maturity")
    s.add_argument("--max-updates", type=int, help="cap on point updates before giving up")
    s.add_argument("--tables", help="reuse kernel tables saved by --save-tables")
    s.add_argument("--save-tables", action="store_true", default=None,
                   help="also write tables.npz")

    m = sub.add_parser("simulate", help="Monte Carlo episodes under a solved or baseline policy")
    common(m, "output JSON with wealth statistics")
    m.add_argument("--policy", help="solution directory written by solve")
    m.add_argument("--episodes", type=int, help="number of episodes (default 100000)")
    m.add_argument("--seed", type=int, help="base seed (default 7)")
    m.add_argument("--lambda0", type=float, help="initial time to maturity (default horizon)")
    m.add_argument("--state", help="initial state j,v_b,v_a,p,z,y (default 1,5,5,50,0,2)")
    m.add_argument("--baseline", choices=("do_nothing", "max_market", "max_limit"),
                   help="simulate a reference rule instead of the solved policy")
    m.add_argument("--trace", help="CSV path for the trace of the first episode")

    v = sub.add_parser("validate-kernel", help="compare kernel tables with simulated races")
    common(v, "output JSON report")
    v.add_argument("--params", help="ModelParams JSON (default: --preset)")
    v.add_argument("--preset", choices=("yhoo", "yhoo-1ms"), help="built-in parameters (default yhoo)")
    v.add_argument("--tables", help="kernel tables saved by solve --save-tables")
    v.add_argument("--keys", type=int, help="number of random race keys (default 20)")
    v.add_argument("--draws", type=int, help="simulated races per key (default 100000)")
    v.add_argument("--seed", type=int, help="seed (default 0)")
    v.add_argument("--m-max", type=int, help="largest market order (default 2)")
    v.add_argument("--l-max", type=int, help="largest limit order (default 2)")
    v.add_argument("--horizon", type=float, help="maturity for freshly built tables (default 10)")
    v.add_argument("--n-lambda", type=int, help="decision-grid points (default 101)")
    v.add_argument("--times", help="comma-separated check times (default 1,5,20)")

    x = sub.add_parser("policy-export", help="write policy slices as v_b x v_a grids of action codes")
    common(x, "output directory")
    x.add_argument("--solution", help="solution directory written by solve")
    x.add_argument("--j", type=int, nargs="+", help="directions to export (default 1)")
    x.add_argument("--y", type=int, nargs="+", help="inventories to export (default 2)")
    x.add_argument("--lam", type=float, nargs="+", help="times to maturity (default 10)")
    return p


REQUIRED = {
    "estimate": ("out",),
    "solve": ("out",),
    "simulate": ("policy", "out"),
    "validate-kernel": ("out",),
    "policy-export": ("solution", "out"),
}


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the optional JSON config and explicit flags (flags win)."""
    given = {k: v for k, v in vars(args).items()
             if k not in ("command", "version", "json", "threads", "verbose", "config") and v is not None}
    cfg = dict(DEFAULTS[command])
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(path)
        doc = json.loads(path.read_text())
        known = set(DEFAULTS[command]) | {k for k in vars(args) if k not in ("command", "config")}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update({k.replace("-", "_"): v for k, v in doc.items()})
    cfg.update(given)
    for k in vars(args):
        cfg.setdefault(k, None)
    for k in ("command", "version", "json", "threads", "verbose", "config"):
        cfg.pop(k, None)
    missing = [k for k in REQUIRED[command] if not cfg.get(k)]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k for k in missing)}")
    return cfg


def version_info() -> dict:
    import numba
    import scipy

    return {"name": "lobliq", "version": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        info = version_info()
        print(json.dumps(info) if args.json else f"lobliq {info['version']}")
        return EXIT_OK
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads is not None:
        import numba

        if args.threads < 1:
            print("lobliq: error: --threads must be positive", file=sys.stderr)
            return EXIT_USAGE
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"lobliq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"lobliq: error: no such file: {exc.filename or exc.args[0]}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"lobliq: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (MaxIterations, NonConvergence) as exc:
        print(f"lobliq: error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except NonTermination as exc:
        print(f"lobliq: error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
