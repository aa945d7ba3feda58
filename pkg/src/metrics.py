"""Run metrics: per-flow receivers, the report object and its JSON/CSV files."""

import csv
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import SERIES_BIN_US
from .domain import Direction, ue_id
from .engine import Packet


@dataclass
class FlowStats:
    """Receiver-side accounting for one (ue, traffic class, direction) flow."""

    ue: int
    traffic_class: str
    direction: Direction
    offered_packets: int = 0
    first_offered_us: int | None = None
    received_packets: int = 0
    received_bytes: int = 0
    last_seq: int = 0
    gaps: int = 0
    out_of_order: int = 0
    latency_sum_us: int = 0

    def offered(self, pkt: Packet) -> None:
        self.offered_packets += 1
        if self.first_offered_us is None:
            self.first_offered_us = pkt.created_us

    def received(self, pkt: Packet, now_us: int) -> None:
        self.received_packets += 1
        self.received_bytes += pkt.size_bytes
        self.latency_sum_us += now_us - pkt.created_us
        if pkt.seq_no <= self.last_seq:
            self.out_of_order += 1
            return
        if pkt.seq_no > self.last_seq + 1:
            self.gaps += pkt.seq_no - self.last_seq - 1
        self.last_seq = pkt.seq_no

    def throughput_mbps(self, end_us: int) -> float:
        if self.first_offered_us is None or end_us <= self.first_offered_us:
            return 0.0
        return self.received_bytes * 8 / (end_us - self.first_offered_us)

    def to_dict(self, end_us: int) -> dict:
        return {
            "ue": self.ue,
            "traffic_class": self.traffic_class,
            "direction": self.direction.value,
            "offered_packets": self.offered_packets,
            "received_packets": self.received_packets,
            "received_bytes": self.received_bytes,
            "throughput_mbps": round(self.throughput_mbps(end_us), 6),
            "gaps": self.gaps,
            "out_of_order": self.out_of_order,
            "mean_latency_us": round(self.latency_sum_us / self.received_packets, 3) if self.received_packets else None,
        }


def rtt_summary(samples: list[int]) -> dict:
    if not samples:
        return {"samples": 0, "mean": None, "p50": None, "p95": None, "p99": None}
    values = np.asarray(samples, dtype=float)
    p50, p95, p99 = np.percentile(values, [50, 95, 99])
    return {
        "samples": int(values.size),
        "mean": round(float(values.mean()), 3),
        "p50": round(float(p50), 3),
        "p95": round(float(p95), 3),
        "p99": round(float(p99), 3),
    }


@dataclass
class MetricsReport:
    scenario: str
    mode: str
    seed: int
    duration_us: int
    digest: str
    trace_events: int
    control_rtt_us: dict
    flows: list[dict] = field(default_factory=list)
    slices: dict[str, dict] = field(default_factory=dict)
    handover_count: int = 0
    association_churn: int = 0
    links: dict[str, dict] = field(default_factory=dict)
    channel_conflicts: list[list[int]] = field(default_factory=list)
    ues: dict[str, dict] = field(default_factory=dict)
    aps: dict[str, dict] = field(default_factory=dict)
    controller_data_bytes: int = 0
    control_messages: dict[str, int] = field(default_factory=dict)
    counters: dict[str, dict] = field(default_factory=dict)
    directive_failures: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def flow(self, ue: int, direction: str = "up", traffic_class: str = "default") -> dict | None:
        return next(
            (
                f
                for f in self.flows
                if f["ue"] == ue and f["direction"] == direction and f["traffic_class"] == traffic_class
            ),
            None,
        )


def build_report(net) -> MetricsReport:
    """Collect a finished network's state into a report."""
    duration = net.scenario.duration_us
    bins = duration // SERIES_BIN_US + 1
    slices = {}
    for slice_id, counts in sorted(net.slice_bins.items()):
        total = sum(counts.values())
        slices[slice_id] = {
            "bytes": total,
            "throughput_mbps": round(total * 8 / duration, 6),
            "series_mbps": [round(counts.get(i, 0) * 8 / SERIES_BIN_US, 6) for i in range(bins)],
        }

    ues = {}
    for node, agent in sorted(net.ues.items()):
        ues[str(node.index)] = {
            "final_state": agent.ctx.state.value,
            "reached_session": agent.reached_session,
            "flow_adds": net.controller.flow_adds.get(ue_id(node.index), 0),
            "n3_bytes": net.n3_bytes.get(node.index, 0),
            "anchors": sorted([str(wae), tunnel] for wae, tunnel in agent.anchors),
            "scans": agent.counters["scans"],
        }

    return MetricsReport(
        scenario=net.scenario.name,
        mode=net.mode.value,
        seed=net.seed,
        duration_us=duration,
        digest=net.sim.digest,
        trace_events=net.sim.trace_events,
        control_rtt_us=rtt_summary(net.controller.rtt_samples),
        flows=[f.to_dict(duration) for _, f in sorted(net.flows.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2].value))],
        slices=slices,
        handover_count=net.controller.handover_count,
        association_churn=net.counters["association_denials"] + net.counters["disassociations"],
        links={name: pair.summary() for name, pair in sorted(net.all_links().items())},
        channel_conflicts=[[t, n] for t, n in net.conflict_series],
        ues=ues,
        aps={
            str(ap.index): {
                "load": node.ap.state.load,
                "channel": node.ap.state.channel,
                "tx_power_dbm": node.ap.state.tx_power_dbm,
            }
            for ap, node in sorted(net.ap_nodes.items())
        },
        controller_data_bytes=net.controller_data_bytes,
        control_messages={t.name: n for t, n in sorted(net.controller.sent.items())},
        counters={
            "network": dict(net.counters),
            "controller": dict(net.controller.counters),
            "wae": dict(net.wae.counters),
            "amf": dict(net.amf.counters),
        },
        directive_failures=list(net.directive_failures),
    )


def flatten(doc, prefix: str = "") -> list[tuple[str, object]]:
    """Dotted key/value rows for CSV output; lists are indexed."""
    rows: list[tuple[str, object]] = []
    if isinstance(doc, dict):
        for key, value in doc.items():
            rows.extend(flatten(value, f"{prefix}.{key}" if prefix else str(key)))
    elif isinstance(doc, list):
        for i, value in enumerate(doc):
            rows.extend(flatten(value, f"{prefix}[{i}]"))
    else:
        rows.append((prefix, doc))
    return rows


def _stage(path: Path, write) -> str:
    """Write into a temporary file beside path and return its name."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            write(f)
    except BaseException:
        os.unlink(tmp)
        raise
    return tmp


def _atomic_write(path: Path, write) -> None:
    tmp = _stage(path, write)
    try:
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _write_rows(f, rows: list[tuple[str, object]]) -> None:
    writer = csv.writer(f)
    writer.writerow(["key", "value"])
    writer.writerows(rows)


def write_rows(path: Path, rows: list[tuple[str, object]]) -> None:
    _atomic_write(path, lambda f: _write_rows(f, rows))


def write_json(path: Path, doc) -> None:
    _atomic_write(path, lambda f: json.dump(doc, f, indent=2, sort_keys=True))


def write_reports(report: MetricsReport, out_dir: Path) -> tuple[Path, Path]:
    """
    Write report.json and metrics.csv into out_dir.

    Both files are staged under temporary names and only renamed into place
    once both are complete, so a failed run leaves neither behind.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    json_path = out_dir / "report.json"
    csv_path = out_dir / "metrics.csv"
    staged: list[str] = []
    try:
        staged.append(_stage(json_path, lambda f: json.dump(doc, f, indent=2, sort_keys=True)))
        staged.append(_stage(csv_path, lambda f: _write_rows(f, flatten(doc))))
    except BaseException:
        for tmp in staged:
            os.unlink(tmp)
        raise
    os.replace(staged[0], json_path)
    os.replace(staged[1], csv_path)
    return json_path, csv_path


def write_table(path: Path, rows: list[dict]) -> None:
    """CSV with one column per key of the first row."""
    def write(f):
        writer = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else [])
        writer.writeheader()
        writer.writerows(rows)

    _atomic_write(path, write)


def sweep_row(report: MetricsReport, load: float) -> dict:
    """One line of the latency-versus-load table."""
    data_drops = sum(link["DATA"]["dropped"] for link in report.links.values())
    return {
        "load": load,
        "mode": report.mode,
        "seed": report.seed,
        "rtt_mean_us": report.control_rtt_us["mean"],
        "rtt_p95_us": report.control_rtt_us["p95"],
        "rtt_samples": report.control_rtt_us["samples"],
        "throughput_mbps": round(sum(f["throughput_mbps"] for f in report.flows), 6),
        "data_drops": data_drops,
        "controller_data_bytes": report.controller_data_bytes,
        "digest": report.digest,
    }
