"""``lobmm`` command line: calibrate, simulate, solve, backtest, report.

Every option can also come from a flat JSON file given with ``--config``
(keys are the option names with dashes replaced by underscores); flags on
the command line win. A manifest listing the resolved configuration, library
versions and the hashes of every input and output is written next to the
main output, and can itself be passed back as ``--config`` to rerun.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import warnings
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .order_flow import ConfigError

MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- helpers -----------------------------------------------------------------------------

def threads() -> int:
    raw = os.environ.get("LOBMM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LOBMM_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"LOBMM_THREADS must be a positive integer, got {raw!r}")
    return n


def parse_seeds(text: str) -> List[int]:
    """``"0..4"`` (inclusive) or ``"1,5,9"``."""
    text = str(text).strip()
    try:
        if ".." in text:
            a, b = text.split("..")
            a, b = int(a), int(b)
            if b < a:
                raise ValueError
            return list(range(a, b + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}; use A..B or a comma list")


def parse_int_list(text: str, what: str) -> List[int]:
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad {what} list {text!r}")


def _inputs(pattern: str) -> List[Path]:
    from .eventio import expand_inputs
    paths: List[Path] = []
    for part in str(pattern).split(","):
        part = part.strip()
        if not part:
            continue
        if any(ch in part for ch in "*?["):
            try:
                paths += expand_inputs(part)
            except FileNotFoundError:
                raise FileNotFoundError(f"no input files match {part}")
        else:
            p = Path(part)
            if not p.exists():
                raise FileNotFoundError(f"{p}: no such file")
            paths.append(p)
    if not paths:
        raise FileNotFoundError(f"no input files match {pattern!r}")
    return paths


def load_model(ref: str, q_max: Optional[int] = None):
    """A calibration file, or a built-in synthetic model by name."""
    from .calibration import CalibrationSet
    from .synthetic import BUILTIN
    if ref in BUILTIN:
        return BUILTIN[ref](q_max or 20)
    p = Path(ref)
    if not p.exists():
        raise FileNotFoundError(f"{p}: no such model file")
    return CalibrationSet.load(p)


def _versions() -> Dict[str, str]:
    import scipy
    return {"lobmm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(path: Path, command: str, config: dict, inputs: Sequence[Path], outputs: Sequence[Path]) -> Path:
    from .reports import sha256_of
    man = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": config,
        "versions": _versions(),
        "inputs": {str(p): sha256_of(p) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): sha256_of(p) for p in outputs},
    }
    path.write_text(json.dumps(man, indent=1, sort_keys=True))
    return path


# --- commands ----------------------------------------------------------------------------

def cmd_calibrate(a) -> int:
    from .calibration import calibrate, diagnostics, write_tables
    paths = _inputs(a.input)
    cal, st = calibrate(paths, q_max=a.q_max, min_count=a.min_count, threads=threads())
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cal.save(out)
    outputs = [out]
    if a.diagnostics:
        outputs += write_tables(diagnostics(st), a.diagnostics)
    print(f"calibrated {st.records} records from {len(paths)} file(s) -> {out}")
    return _finish(a, out, paths, outputs)


def _simulate_one(job):
    from .simulator import run, to_records
    spec, seed, horizon, events_path, price_base = job
    res = run(spec.with_seed(seed), horizon, record=events_path is not None)
    if events_path is not None:
        from .eventio import write_events
        write_events(events_path, to_records(res.path, price_offset=price_base))
    return res.stats


def _derive(seed: int, purpose: str) -> int:
    from .rng import substream
    return int(substream(seed, purpose).integers(2**62))


def cmd_simulate(a) -> int:
    from .simulator import ModelSpec, format_stats, stats_rows
    cal = load_model(a.model, a.q_max)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        spec = ModelSpec.from_calibration(cal, a.variant, q_max=a.q_max)
    seeds = parse_seeds(a.seeds)
    ev_dir = Path(a.events) if a.events else None
    if ev_dir:
        ev_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, _derive(a.seed, f"simulate:{s}"), a.horizon,
             ev_dir / f"sim_{a.variant}_seed{s}.csv" if ev_dir else None, a.price_base) for s in seeds]
    n = min(threads(), len(jobs))
    if n > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=n) as ex:
            stats = list(ex.map(_simulate_one, jobs))
    else:
        stats = [_simulate_one(j) for j in jobs]
    rows = [r for s, st in zip(seeds, stats) for r in stats_rows(s, st)]
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_stats(rows))
    outputs = [out] + [j[3] for j in jobs if j[3] is not None]
    print(f"simulated {len(seeds)} run(s) of Model {a.variant} for {a.horizon:g} s -> {out}")
    inputs = [Path(a.model)] if Path(a.model).is_file() else []
    return _finish(a, out, inputs, outputs)


def cmd_solve(a) -> int:
    from .mdp.kernel import SideKernel
    from .mdp.problems import solve_one_unit, solve_pair
    from .mdp.store import read_values, save_model
    from .mdp.surfaces import write_surfaces
    from .simulator import ModelSpec
    cal = load_model(a.model, a.q_max)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        spec = ModelSpec.from_calibration(cal, a.variant, q_max=a.q_max)
    if a.problem == "pair-ext" and a.q_max > 8:
        raise UsageError("pair-ext enumerates states explicitly; use --q-max 8 or less")
    kernel = SideKernel.from_spec(spec, Q=a.q_max)
    kw = {"max_sweeps": a.max_sweeps}
    if a.problem == "buy-one":
        model = solve_one_unit(kernel, a.stop + 1, a.tol, **kw)
    elif a.problem == "pair":
        model = solve_pair(kernel, S=a.stop, tol=a.tol, **kw)
    else:
        from .mdp.extended import solve_pair_extended
        model = solve_pair_extended(kernel, S=a.stop, G=a.grid, tol=a.tol, **kw)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {"variant": a.variant, "tol": a.tol, "model": str(a.model)}
    outputs = list(save_model(out, model, extra))
    if a.surfaces:
        V, meta = read_values(out)
        outputs += write_surfaces(V, meta, a.surfaces)
    sol = model.solution
    print(f"solved {a.problem} (Q={a.q_max}, {model.problem.n_states} states) in {sol.sweeps} sweeps, "
          f"residual {sol.residual:.3g} -> {out}")
    inputs = [Path(a.model)] if Path(a.model).is_file() else []
    return _finish(a, out, inputs, outputs)


def cmd_backtest(a) -> int:
    from .backtester import (BacktestConfig, PairTable, mc_config, monte_carlo_eval, run_strategy_suite,
                             suite_configs, z_score)
    from .eventio import read_events
    from .lob_core import LOT_CONTRACTS
    if a.max_inv < LOT_CONTRACTS:
        raise UsageError(f"--max-inv is in contracts and must be at least one lot ({LOT_CONTRACTS})")
    thresholds = parse_int_list(a.naive_qmin, "threshold")
    table = PairTable.load(a.values) if a.values else None
    inputs: List[Path] = [Path(a.values)] if a.values else []
    base = BacktestConfig(latency_rt=a.latency_us * 1e-6, max_inventory=a.max_inv // LOT_CONTRACTS,
                          cancel_law_rate=a.cancel_rate, tick_value=a.tick_value, seed=_derive(a.seed, "backtest"),
                          check_accounting=True)
    configs = suite_configs(base, thresholds, with_optimal=table is not None)
    report: dict = {"config": {"latency_us": a.latency_us, "max_inv": a.max_inv, "cancel_rate": a.cancel_rate,
                               "tick_value": a.tick_value, "naive_qmin": thresholds}}
    if a.data:
        paths = _inputs(a.data)
        inputs += paths
        days = [(p.name, read_events(p)) for p in paths]
        report.update(run_strategy_suite(days, configs, table))
    if a.mc_runs:
        from .simulator import ModelSpec
        if not a.model:
            raise UsageError("--mc-runs needs --model")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cal = load_model(a.model, table.Q if table else None)
            spec = ModelSpec.from_calibration(cal, a.variant, q_max=table.Q if table else cal.q_max)
        mc_seed = _derive(a.seed, "monte-carlo")
        stats = [monte_carlo_eval(spec, mc_config("naive", q, latency_rt=base.latency_rt), a.mc_runs, seed=mc_seed)
                 for q in thresholds]
        if table is not None:
            lo = monte_carlo_eval(spec, mc_config("locally_optimal", latency_rt=base.latency_rt), a.mc_runs, table,
                                  seed=mc_seed)
            report["monte_carlo_z"] = {s.label: z_score(lo, s) for s in stats}
            stats = [lo] + stats
        report["monte_carlo"] = [s.summary() for s in stats]
        if Path(a.model).is_file():
            inputs.append(Path(a.model))
    if not a.data and not a.mc_runs:
        raise UsageError("nothing to do: give --data and/or --mc-runs")
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1, sort_keys=True))
    outputs = [out]
    if a.curve and "curves" in report:
        from .mdp.surfaces import to_csv
        from .reports import _curve_rows
        Path(a.curve).write_text(to_csv(["strategy", "day", "t", "cum_pnl"], _curve_rows(report)))
        outputs.append(Path(a.curve))
    for row in report.get("aggregate", []):
        print(f"{row['strategy']:>16}  pnl {row['pnl_k']:10.3f} k  turnover {row['turnover_m']:10.3f} M  "
              f"profitability {row['profitability_bp']:.3f} bp")
    for row in report.get("monte_carlo", []):
        print(f"{row['strategy']:>16}  mc mean {row['mean_pnl_ticks']:9.3f} ticks (se {row['stderr']:.3f}, "
              f"{row['runs']} runs)")
    return _finish(a, out, inputs, outputs)


def cmd_report(a) -> int:
    from .reports import build_report
    data = _inputs(a.data) if a.data else []
    out = Path(a.out)
    index = build_report(a.run_dir, out, data, q_max=a.q_max)
    print(f"{len(index['files'])} report file(s) -> {out}")
    outputs = [out / e["path"] for e in index["files"]] + [out / "index.json"]
    return _finish(a, out / "index.json", data, outputs)


def _finish(a, primary: Path, inputs: Sequence[Path], outputs: Sequence[Path]) -> int:
    path = Path(a.manifest) if a.manifest else primary.with_name(primary.name + ".manifest.json")
    write_manifest(path, a.command, _resolved(a), inputs, outputs)
    return 0


# --- parser ------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option values (flags override it)")
    p.add_argument("--seed", type=int, default=0, help="global seed; every random stream derives from it")
    p.add_argument("--manifest", help="manifest path (default: next to the main output)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lobmm", description="Queue-reactive order book models and market making.")
    parser.add_argument("--version", action="version", version=f"lobmm {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("calibrate", help="fit a model from event-stream files")
    _common(p)
    p.add_argument("--input", help="event CSV path or glob (comma separated for several)")
    p.add_argument("--out", default="model.v1.json")
    p.add_argument("--min-count", type=int, default=200, help="events needed per size fit")
    p.add_argument("--q-max", type=int, default=50, help="largest queue bin in lots")
    p.add_argument("--diagnostics", help="directory for diagnostic tables")
    p.set_defaults(func=cmd_calibrate, required=["input"])

    p = sub.add_parser("simulate", help="run the queue-reactive simulator")
    _common(p)
    p.add_argument("--model", default="desk-futures", help="model file or built-in name")
    p.add_argument("--variant", choices=["0", "I", "II"], default="II")
    p.add_argument("--horizon", type=float, default=3600.0, help="seconds per run")
    p.add_argument("--seeds", default="0..0", help="run ids, A..B or a comma list")
    p.add_argument("--q-max", type=int, default=20)
    p.add_argument("--out", default="stats.csv")
    p.add_argument("--events", help="directory for the simulated event streams")
    p.add_argument("--price-base", type=int, default=5000, help="price (ticks) of the initial best bid")
    p.set_defaults(func=cmd_simulate, required=[])

    p = sub.add_parser("solve", help="solve a market-making problem")
    _common(p)
    p.add_argument("--model", default="desk-futures", help="model file or built-in name")
    p.add_argument("--variant", choices=["0", "I", "II"], default="II")
    p.add_argument("--problem", choices=["buy-one", "pair", "pair-ext"], default="pair")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--q-max", type=int, default=20, help="largest queue in lots")
    p.add_argument("--stop", type=int, default=2, help="stop distance S in ticks (buy-one uses D = S + 1)")
    p.add_argument("--grid", type=int, default=1, help="pair-ext: price levels behind the best")
    p.add_argument("--max-sweeps", type=int, default=10**6)
    p.add_argument("--out", default="values.bin")
    p.add_argument("--surfaces", help="directory for value-surface CSVs")
    p.set_defaults(func=cmd_solve, required=[])

    p = sub.add_parser("backtest", help="replay strategies on event data or inside the simulator")
    _common(p)
    p.add_argument("--data", help="event CSV path or glob, one file per day")
    p.add_argument("--values", help="pair value table (enables the locally-optimal strategy)")
    p.add_argument("--latency-us", type=float, default=200.0, help="round-trip latency in microseconds")
    p.add_argument("--max-inv", type=int, default=80, help="inventory cap in contracts")
    p.add_argument("--naive-qmin", default="0,250,400", help="naive thresholds in contracts")
    p.add_argument("--cancel-rate", type=float, default=0.1, help="cancel depth law rate per lot")
    p.add_argument("--tick-value", type=float, default=10.0, help="currency per tick and contract")
    p.add_argument("--mc-runs", type=int, default=0, help="simulated sessions per strategy")
    p.add_argument("--model", help="model for --mc-runs")
    p.add_argument("--variant", choices=["0", "I", "II"], default="II")
    p.add_argument("--out", default="report.json")
    p.add_argument("--curve", help="cumulative P&L CSV")
    p.set_defaults(func=cmd_backtest, required=[])

    p = sub.add_parser("report", help="figure data from a run directory")
    _common(p)
    p.add_argument("--run-dir", default=".")
    p.add_argument("--data", help="event data for empirical histograms")
    p.add_argument("--q-max", type=int, default=50)
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report, required=[])
    return parser


_INTERNAL = {"func", "required", "config", "manifest", "command"}


def _option_keys(sp: argparse.ArgumentParser) -> Dict[str, argparse.Action]:
    return {act.dest: act for act in sp._actions if act.dest not in ("help",) + tuple(_INTERNAL)}


def _load_config(path: str, sp: argparse.ArgumentParser, command: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p}: no such config file")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{p}: not valid JSON ({e})")
    if isinstance(cfg, dict) and "manifest_version" in cfg:
        if cfg.get("command") != command:
            raise UsageError(f"{p}: manifest is for {cfg.get('command')!r}, not {command!r}")
        cfg = cfg["config"]
    if not isinstance(cfg, dict):
        raise UsageError(f"{p}: config must be a JSON object")
    known = _option_keys(sp)
    unknown = sorted(set(cfg) - set(known))
    if unknown:
        raise UsageError(f"{p}: unknown key(s) {', '.join(unknown)}")
    out = {}
    for k, v in cfg.items():
        act = known[k]
        if v is not None and act.type is not None and not isinstance(v, bool):
            try:
                v = act.type(v)
            except (TypeError, ValueError):
                raise UsageError(f"{p}: bad value for {k}: {v!r}")
        if act.choices is not None and v not in act.choices:
            raise UsageError(f"{p}: {k} must be one of {list(act.choices)}")
        out[k] = v
    return out


def _resolved(a) -> dict:
    return {k: v for k, v in sorted(vars(a).items()) if k not in _INTERNAL}


def parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = parser.parse_args(argv)
    if pre.command is None:
        raise UsageError("lobmm: a command is required (calibrate, simulate, solve, backtest, report)")
    if pre.config:
        sp = parser._subparsers._group_actions[0].choices[pre.command]
        sp.set_defaults(**_load_config(pre.config, sp, pre.command))
        pre = parser.parse_args(argv)
    for k in pre.required:
        if getattr(pre, k) in (None, ""):
            raise UsageError(f"lobmm {pre.command}: --{k.replace('_', '-')} is required")
    return pre


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .eventio import DataError
    from .mdp.core import MdpError
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        a = parse(argv)
        return a.func(a)
    except SystemExit as e:  # --help and --version
        return int(e.code or 0)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        msg = str(e) if not e.filename else f"{e.filename}: {e.strerror}"
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except (DataError, MdpError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
