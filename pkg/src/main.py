"""Main CLI entry point for the SDN WLAN simulator and controller."""

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import metrics, network, run_log, scenario
from .config import CMI_HOST, CMI_PORT, LOG_LEVEL, OUTPUT_DIR
from .engine import InvariantViolation

DEFAULT_LOADS = "0,0.25,0.5,0.75,0.9,1.2"
MODES = [m.value for m in network.Mode]

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_INVALID = 2
EXIT_INVARIANT = 3


def _error(message: str) -> None:
    print(f"Error: {message}", file=sys.stderr)


def _load(path: Path) -> scenario.Scenario | None:
    """Parse a scenario, printing every diagnostic on failure."""
    try:
        return scenario.parse_scenario(path)
    except FileNotFoundError:
        _error(f"scenario file {path} not found")
    except scenario.ParseError as exc:
        _error(f"{path}: {exc}")
    except scenario.ValidationError as exc:
        _error(f"{path}: {len(exc.errors)} validation error(s)")
        for message in exc.errors:
            print(f"  - {message}", file=sys.stderr)
    return None


def _parse_loads(text: str) -> list[float]:
    try:
        loads = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad load list {text!r}")
    if not loads or any(load < 0 for load in loads):
        raise argparse.ArgumentTypeError("loads must be non-negative numbers")
    return loads


def cmd_validate(args) -> int:
    parsed = _load(args.scenario)
    if parsed is None:
        return EXIT_INVALID
    print(f"✓ {parsed.name}: {len(parsed.topology.aps)} AP(s), {len(parsed.ues)} UE(s), "
          f"{len(parsed.slices)} slice(s), {len(parsed.directives)} directive(s)")
    return EXIT_OK


def cmd_run(args) -> int:
    parsed = _load(args.scenario)
    if parsed is None:
        return EXIT_INVALID

    print(f"Running '{parsed.name}' in {args.mode} mode...")
    started = time.monotonic()
    try:
        report = network.run(parsed, args.mode, args.seed, trace_path=args.trace, check_invariants=args.check_invariants)
    except InvariantViolation as exc:
        _error(f"invariant violated: {exc}")
        return EXIT_INVARIANT
    elapsed = time.monotonic() - started
    print(f"✓ Simulated {parsed.duration_us / 1e6:.3f} s in {elapsed:.2f} s ({report.trace_events:,} events)")

    json_path, csv_path = metrics.write_reports(report, args.out)
    run_log.log_run(report, "run", wall_seconds=elapsed)
    rtt = report.control_rtt_us
    if rtt["samples"]:
        print(f"  Control RTT: mean {rtt['mean']:.1f} us, p95 {rtt['p95']:.1f} us ({rtt['samples']} samples)")
    print(f"  Handovers: {report.handover_count}")
    print(f"  Digest: {report.digest}")
    print(f"\n✓ Report saved to: {json_path}")
    print(f"✓ Metrics saved to: {csv_path}")
    if args.trace:
        print(f"✓ Trace saved to: {args.trace}")
    return EXIT_OK


def run_point(doc: dict, mode: str, load: float, seed: int, check_invariants: bool = False) -> dict:
    """One sweep point; module-level so it can run in a worker process."""
    parsed = scenario.scale_load(scenario.scenario_from_dict(doc), load)
    started = time.monotonic()
    report = network.run(parsed, mode, seed, check_invariants=check_invariants)
    return {"report": report, "load": load, "wall_seconds": time.monotonic() - started}


def cmd_sweep(args) -> int:
    parsed = _load(args.scenario)
    if parsed is None:
        return EXIT_INVALID

    modes = MODES if args.mode == "both" else [args.mode]
    base_seed = parsed.seed if args.seed is None else args.seed
    doc = scenario.scenario_to_dict(parsed)
    points = [
        (mode, load, base_seed ^ index)
        for index, load in enumerate(args.loads)
        for mode in modes
    ]
    print(f"Sweeping '{parsed.name}': {len(args.loads)} load point(s) x {len(modes)} mode(s)...")

    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                futures = [pool.submit(run_point, doc, m, l, s, args.check_invariants) for m, l, s in points]
                results = [f.result() for f in futures]
        else:
            results = []
            for m, l, s in points:
                results.append(run_point(doc, m, l, s, args.check_invariants))
                print(f"  ✓ {m} @ {l:g}")
    except InvariantViolation as exc:
        _error(f"invariant violated: {exc}")
        return EXIT_INVARIANT

    rows = []
    for result in results:
        report = result["report"]
        rows.append(metrics.sweep_row(report, result["load"]))
        run_log.log_run(report, "sweep", load=result["load"], wall_seconds=result["wall_seconds"])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_json(out_dir / "sweep.json", {"schema": 1, "scenario": parsed.name, "rows": rows})
    metrics.write_table(out_dir / "sweep.csv", rows)

    print(f"\n{'load':>6} {'mode':>9} {'rtt mean us':>12} {'rtt p95 us':>11} {'Mbps':>9} {'drops':>6}")
    for row in rows:
        mean = "n/a" if row["rtt_mean_us"] is None else f"{row['rtt_mean_us']:.1f}"
        p95 = "n/a" if row["rtt_p95_us"] is None else f"{row['rtt_p95_us']:.1f}"
        print(f"{row['load']:>6g} {row['mode']:>9} {mean:>12} {p95:>11} {row['throughput_mbps']:>9.2f} {row['data_drops']:>6}")
    print(f"\n✓ Sweep saved to: {out_dir / 'sweep.json'}")
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-execute the run a trace came from and compare determinism digests."""
    try:
        with open(args.trace, "r", encoding="utf-8") as f:
            header = json.loads(f.readline())
        parsed = scenario.scenario_from_dict(header["scenario"])
    except (OSError, ValueError, KeyError) as exc:
        _error(f"cannot read trace header from {args.trace}: {exc}")
        return EXIT_INVALID
    except scenario.ValidationError as exc:
        _error(f"trace carries an invalid scenario: {exc}")
        return EXIT_INVALID

    print(f"Replaying '{parsed.name}' ({header['mode']}, seed {header['seed']})...")
    try:
        report = network.run(parsed, header["mode"], header["seed"])
    except InvariantViolation as exc:
        _error(f"invariant violated: {exc}")
        return EXIT_INVARIANT
    if report.digest != header["digest"]:
        _error(f"digest mismatch: trace {header['digest']}, replay {report.digest}")
        return EXIT_MISMATCH
    print(f"✓ Digest matches: {report.digest}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from . import service

    print(f"Serving CMI on {args.host}:{args.port} (Ctrl-C to stop)...")
    try:
        service.serve(args.host, args.port)
    except KeyboardInterrupt:
        print("\nStopped.")
    return EXIT_OK


def cmd_history(args) -> int:
    if args.clear_history:
        run_log.clear_logs()
        print("✓ Run history cleared")
        return EXIT_OK
    run_log.print_run_report()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="SDN WLAN RAN controller with a deterministic PROPOSED vs SPLITMAC simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_arg(p):
        p.add_argument("--scenario", type=Path, required=True, help="Scenario JSON document")

    def common(p, modes):
        scenario_arg(p)
        p.add_argument("--mode", choices=modes, default=modes[0], help=f"Topology mode (default: {modes[0]})")
        p.add_argument("--seed", type=int, help="Override the scenario seed")
        p.add_argument("--out", type=Path, default=OUTPUT_DIR, help=f"Output directory (default: {OUTPUT_DIR})")
        p.add_argument("--check-invariants", action="store_true", help="Check runtime invariants after every event")

    p = sub.add_parser("run", help="Simulate one scenario in one mode")
    common(p, MODES)
    p.add_argument("--trace", type=Path, help="Write the event trace (JSON lines) to this file")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("sweep", help="Latency-versus-load sweep")
    common(p, ["both", *MODES])
    p.add_argument("--loads", type=_parse_loads, default=_parse_loads(DEFAULT_LOADS), help=f"Load multipliers (default: {DEFAULT_LOADS})")
    p.add_argument("--jobs", type=int, default=1, help="Parallel worker processes (default: 1)")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("validate", help="Parse and validate a scenario")
    scenario_arg(p)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("replay", help="Rerun a traced run and compare digests")
    p.add_argument("--trace", type=Path, required=True, help="Trace file written by run --trace")
    p.set_defaults(handler=cmd_replay)

    p = sub.add_parser("serve", help="Run the controller as a CMI TCP endpoint")
    p.add_argument("--host", default=CMI_HOST, help=f"Listen address (default: {CMI_HOST})")
    p.add_argument("--port", type=int, default=CMI_PORT, help=f"Listen port (default: {CMI_PORT})")
    p.set_defaults(handler=cmd_serve)

    p = sub.add_parser("history", help="Show the run history")
    p.add_argument("--clear-history", action="store_true", help="Delete the run history")
    p.set_defaults(handler=cmd_history)
    return parser


def main(argv: list[str] | None = None):
    logging.basicConfig(level=LOG_LEVEL, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    sys.exit(args.handler(args))


if __name__ == "__main__":
    main()
