"""Command line: ``securenvm {run,crashtest,model,validate,sweep}``.

Exit codes: 0 ok, 2 configuration or trace error, 3 property violation
(crash test failures), 4 integrity violation during a run.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .analytics import emit_report, model_rows, parse_tier, report_row
from .config import load_config
from .controller import PersistPolicy
from .core import format_size, parse_ratio, parse_size
from .errors import ConfigError, IntegrityViolation, SimulationError
from .merkle import dump_tree
from .recovery import crash_test, run_with_crash
from .workload import BUNDLED, bundled, format_trace, generate, load_trace, replay, validate_trace

EXIT_OK, EXIT_CONFIG, EXIT_PROPERTY, EXIT_INTEGRITY = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="INI file; flags override its values")
    p.add_argument("--policy", metavar="MODE", help="strict, triad:P or none (default triad:1)")
    p.add_argument("--capacity", metavar="SIZE", help="physical memory size, e.g. 64MB (default 64MB)")
    p.add_argument("--ratio", metavar="P:N", help="persistent:non-persistent eighths (default 4:4)")
    p.add_argument("--seed", metavar="N", help="master seed for keys and synthetic traces (default 0)")
    p.add_argument("--attack-demo", action="store_true", default=None,
                   help="never rotate the volatile key, exposing pad reuse across crashes")
    p.add_argument("--out", metavar="DIR", help="write report files into DIR instead of stdout")


def _trace_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--trace", metavar="FILE", help="trace file (R <addr> / W <addr> <seed> lines)")
    src.add_argument("--workload", metavar="NAME", choices=sorted(BUNDLED),
                     help="bundled synthetic workload: " + ", ".join(sorted(BUNDLED)))
    p.add_argument("--ops", type=int, default=0, metavar="N", help="synthetic op count override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="securenvm",
                                     description="Secure NVM metadata persistence and recovery simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="replay a trace and report write accounting")
    _common(p)
    _trace_args(p)
    p.add_argument("--crash-at", metavar="EVENT",
                   help="crash after event id EVENT, recover, and finish the trace")
    p.add_argument("--format", choices=("text", "csv"), default="text", help="report format")

    p = sub.add_parser("crashtest", help="crash at event boundaries and check recovery")
    _common(p)
    _trace_args(p)
    p.add_argument("--crash-at", metavar="MODE", default="exhaustive",
                   help="exhaustive (default), random:N, or a single event id")

    p = sub.add_parser("model", help="analytic recovery times")
    p.add_argument("--capacity", metavar="SIZES", default="1TB",
                   help="comma-separated capacities (default 1TB)")
    p.add_argument("--tiers", metavar="TIERS", default="data,counters,L1,L2",
                   help="comma-separated lowest trusted tiers (data, counters, L1, L2, ...)")
    p.add_argument("--ratio", metavar="P:N", help="count only the persistent region of this ratio")
    p.add_argument("--t-block", type=float, default=100e-9, metavar="S", help="seconds per block (100e-9)")
    p.add_argument("--out", metavar="DIR", help="write model.csv into DIR instead of stdout")

    p = sub.add_parser("validate", help="check a trace against a configuration")
    _common(p)
    p.add_argument("--trace", metavar="FILE", required=True, help="trace file to check")

    p = sub.add_parser("sweep", help="run every (policy, capacity, workload) cell")
    _common(p)
    p.add_argument("--policies", default="strict,triad:0,triad:1,triad:2,none", metavar="LIST",
                   help="comma-separated policies")
    p.add_argument("--capacities", metavar="LIST", help="comma-separated capacities (default --capacity)")
    p.add_argument("--workloads", default=",".join(BUNDLED), metavar="LIST",
                   help="comma-separated bundled workloads")
    p.add_argument("--ops", type=int, default=0, metavar="N", help="synthetic op count override")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")
    return parser


def _config(args, **extra):
    return load_config(args.config, capacity=args.capacity, ratio=args.ratio, mode=args.policy,
                       seed=args.seed, attack_demo=args.attack_demo, **extra)


def _ops(args, cfg):
    if getattr(args, "trace", None):
        ops, name = load_trace(args.trace), os.path.basename(args.trace)
    else:
        name = getattr(args, "workload", None) or "stride-128-r2"
        ops = generate(bundled(name, cfg.seed, args.ops), cfg.region_map)
    problems = validate_trace(ops, cfg.region_map)
    if problems:
        raise ConfigError("trace does not fit the configuration: " + problems[0])
    return ops, name


def _emit(args, files: dict) -> None:
    """``files`` maps file name to text; without --out the first one goes to stdout."""
    if not args.out:
        sys.stdout.write(next(iter(files.values())))
        return
    os.makedirs(args.out, exist_ok=True)
    for name, text in files.items():
        mode = "wb" if isinstance(text, bytes) else "w"
        with open(os.path.join(args.out, name), mode) as fh:
            fh.write(text)


def simulate(cfg, ops, workload: str, crash_at=None):
    """Run ``ops``; returns (report row, controller, recovery report or None)."""
    if crash_at is None:
        ctrl = cfg.build()
        replay(ops, ctrl)
        recovery = None
    else:
        ctrl, recovery = run_with_crash(ops, cfg, crash_at)
    ctrl.device.drain()
    stats = ctrl.stats
    info = {
        "policy": cfg.policy.label, "capacity": format_size(cfg.capacity),
        "ratio": f"{cfg.persistent_eighths}:{8 - cfg.persistent_eighths}", "workload": workload,
        "ops": len(ops),
        "counter_hits": ctrl.device.counter_cache.hits, "counter_misses": ctrl.device.counter_cache.misses,
        "mt_hits": ctrl.device.mt_cache.hits, "mt_misses": ctrl.device.mt_cache.misses,
        "pads": len(ctrl.ledger), "pad_duplicates": len(ctrl.ledger.duplicates),
        "state_hash": ctrl.device.durable_hash(),
    }
    return report_row(stats, info), ctrl, recovery


def cmd_run(args) -> int:
    cfg = _config(args)
    ops, name = _ops(args, cfg)
    crash_at = None
    if args.crash_at is not None:
        try:
            crash_at = int(args.crash_at, 0)
        except ValueError:
            raise ConfigError("run --crash-at takes an event id; use crashtest for exhaustive/random") from None
    row, ctrl, recovery = simulate(cfg, ops, name, crash_at)
    files = {f"report.{'csv' if args.format == 'csv' else 'txt'}":
             emit_report(row, args.format, cfg.echo())}
    if recovery is not None:
        files["recovery.txt"] = recovery.to_text()
        if not args.out:
            files = {"report": next(iter(files.values())) + "\n# recovery\n" + recovery.to_text()}
    if args.out:
        files["state.hash"] = row["state_hash"] + "\n"
        g = ctrl.geometry
        nvm = ctrl.device.nvm
        files["tree.bin"] = dump_tree(g, lambda k: nvm.read((2, k[0], k[1]))[0], ctrl.device.regs.root)
        files["trace.txt"] = format_trace(ops)
    _emit(args, files)
    return EXIT_OK


def cmd_crashtest(args) -> int:
    cfg = _config(args)
    ops, _ = _ops(args, cfg)
    mode = args.crash_at.strip().lower()
    if mode == "exhaustive":
        summary = crash_test(ops, cfg)
    elif mode.startswith("random:"):
        try:
            n = int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad --crash-at {args.crash_at!r}") from None
        summary = crash_test(ops, cfg, "random", samples=n, seed=cfg.seed)
    else:
        try:
            event = int(mode, 0)
        except ValueError:
            raise ConfigError(f"--crash-at must be exhaustive, random:N or an event id, not {args.crash_at!r}") from None
        summary = crash_test(ops, cfg, event)
    header = "".join(f"# {k} = {v}\n" for k, v in cfg.echo().items())
    _emit(args, {"crashtest.txt": header + summary.to_text()})
    return EXIT_OK if summary.ok else EXIT_PROPERTY


def cmd_model(args) -> int:
    caps = [parse_size(c) for c in args.capacity.split(",") if c.strip()]
    tiers = [parse_tier(t) for t in args.tiers.split(",") if t.strip()]
    ratio = parse_ratio(args.ratio) if args.ratio else None
    rows = model_rows(caps, tiers, ratio, args.t_block)
    lines = ["capacity,capacity_bytes,tier,blocks,seconds"]
    for row in rows:
        lines.append(f"{format_size(row['capacity_bytes'])},{row['capacity_bytes']},"
                     f"{row['tier']},{row['blocks']},{row['seconds']}")
    _emit(args, {"model.csv": "\n".join(lines) + "\n"})
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _config(args)
    ops = load_trace(args.trace)
    problems = validate_trace(ops, cfg.region_map)
    writes = sum(op.kind == "W" for op in ops)
    persistent = sum(cfg.region_map.is_persistent(op.addr) for op in ops if op.addr < cfg.capacity)
    lines = [f"ops {len(ops)}", f"writes {writes}", f"reads {len(ops) - writes}",
             f"persistent_ops {persistent}", f"problems {len(problems)}"]
    lines.extend(f"  {p}" for p in problems)
    lines.append("OK" if not problems else "INVALID")
    _emit(args, {"validate.txt": "\n".join(lines) + "\n"})
    return EXIT_OK if not problems else EXIT_CONFIG


def _sweep_cell(cell):
    cfg, workload, ops_override = cell
    ops = generate(bundled(workload, cfg.seed, ops_override), cfg.region_map)
    row, _, _ = simulate(cfg, ops, workload)
    return row


def cmd_sweep(args) -> int:
    base = _config(args)
    caps = [parse_size(c) for c in args.capacities.split(",")] if args.capacities else [base.capacity]
    workloads = [w.strip() for w in args.workloads.split(",") if w.strip()]
    for w in workloads:
        bundled(w)
    cells = []
    for cap in caps:
        for pol in args.policies.split(","):
            cfg = base.replace(capacity=cap, policy=PersistPolicy.parse(pol))
            cells.extend((cfg, w, args.ops) for w in workloads)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if args.jobs == 1:
        rows = [_sweep_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    _emit(args, {"sweep.csv": emit_report(rows, "csv")})
    return EXIT_OK


COMMANDS = {"run": cmd_run, "crashtest": cmd_crashtest, "model": cmd_model,
            "validate": cmd_validate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"securenvm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityViolation as exc:
        print(f"securenvm: integrity violation: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except SimulationError as exc:
        print(f"securenvm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PROPERTY


if __name__ == "__main__":
    sys.exit(main())
