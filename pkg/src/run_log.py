"""Run history: one JSON line per completed simulation run."""

import json
from datetime import datetime

from .config import LOGS_DIR

RUNS_LOG_FILE = LOGS_DIR / "runs.jsonl"


def _ensure_log_dir():
    """Ensure the logs directory exists."""
    RUNS_LOG_FILE.parent.mkdir(parents=True, exist_ok=True)


def log_run(report, command: str = "run", load: float | None = None, wall_seconds: float | None = None) -> dict:
    """
    Append a summary of a finished run to the history file.

    Args:
        report: The run's MetricsReport.
        command: CLI command that produced the run ("run", "sweep", ...).
        load: Load factor for sweep points.
        wall_seconds: Wall-clock time the run took.

    Returns:
        The logged entry.
    """
    _ensure_log_dir()

    entry = {
        "timestamp": datetime.now().isoformat(),
        "command": command,
        "scenario": report.scenario,
        "mode": report.mode,
        "seed": report.seed,
        "load": load,
        "digest": report.digest,
        "rtt_mean_us": report.control_rtt_us.get("mean"),
        "handovers": report.handover_count,
        "controller_data_bytes": report.controller_data_bytes,
        "events": report.trace_events,
        "wall_seconds": None if wall_seconds is None else round(wall_seconds, 3),
    }

    with open(RUNS_LOG_FILE, "a") as f:
        f.write(json.dumps(entry) + "\n")

    return entry


def _entries():
    if not RUNS_LOG_FILE.exists():
        return
    with open(RUNS_LOG_FILE, "r") as f:
        for line in f:
            if not line.strip():
                continue
            yield json.loads(line)


def get_run_summary(scenario: str | None = None) -> dict:
    """
    Summarize the run history per mode.

    Args:
        scenario: Only count runs of this scenario. None for all.

    Returns:
        {"runs": n, "modes": {mode: {"runs", "mean_rtt_us", "handovers"}}}
    """
    modes: dict[str, dict] = {}
    total = 0
    for entry in _entries():
        if scenario and entry.get("scenario") != scenario:
            continue
        total += 1
        stats = modes.setdefault(entry["mode"], {"runs": 0, "rtt_sum": 0.0, "rtt_runs": 0, "handovers": 0})
        stats["runs"] += 1
        stats["handovers"] += entry.get("handovers", 0)
        if entry.get("rtt_mean_us") is not None:
            stats["rtt_sum"] += entry["rtt_mean_us"]
            stats["rtt_runs"] += 1

    summary = {}
    for mode, stats in modes.items():
        summary[mode] = {
            "runs": stats["runs"],
            "mean_rtt_us": round(stats["rtt_sum"] / stats["rtt_runs"], 3) if stats["rtt_runs"] else None,
            "handovers": stats["handovers"],
        }
    return {"runs": total, "modes": summary}


def get_runs_by_scenario() -> dict:
    """Number of logged runs per scenario name."""
    counts: dict[str, int] = {}
    for entry in _entries():
        name = entry.get("scenario") or "unknown"
        counts[name] = counts.get(name, 0) + 1
    return counts


def clear_logs():
    """Clear the run history."""
    if RUNS_LOG_FILE.exists():
        RUNS_LOG_FILE.unlink()


def print_run_report():
    """Print a formatted run history report to console."""
    summary = get_run_summary()

    print("\n" + "=" * 50)
    print("RUN HISTORY")
    print("=" * 50)

    print(f"\n📊 Total runs: {summary['runs']}")
    for mode, stats in sorted(summary["modes"].items()):
        rtt = f"{stats['mean_rtt_us']:.1f} us" if stats["mean_rtt_us"] is not None else "n/a"
        print(f"  {mode}: {stats['runs']} run(s), mean control RTT {rtt}, {stats['handovers']} handover(s)")

    scenarios = get_runs_by_scenario()
    if scenarios:
        print("\n📝 By Scenario:")
        for name, count in sorted(scenarios.items(), key=lambda x: x[1], reverse=True):
            print(f"  {name}: {count}")

    print("\n" + "=" * 50)
