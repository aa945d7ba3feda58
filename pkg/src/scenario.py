"""Scenario documents: parsing, validation (all errors at once), emission and load scaling."""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .apps import APP_TYPES, AppError, build_app
from .config import CHANNELS, DEFAULT_LINKS, DEFAULT_SLICE, DEFAULT_TX_POWER_DBM, MAX_ASSOCIATED, WIRELESS_CAPACITY_MBPS
from .domain import Direction, QosProfile, SliceFilter, SliceTemplate
from .traffic import BadSpec, TrafficKind, TrafficSpec, validate_spec

SCHEMA_VERSION = 1
DIRECTIVE_OPS = ("slice_create", "slice_update", "slice_delete", "set_param", "push_config")


class ScenarioError(Exception):
    """Base class for scenario errors."""


class ParseError(ScenarioError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class ValidationError(ScenarioError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ApSpec:
    index: int
    position: tuple[float, float]
    channel: int = CHANNELS[0]
    tx_power_dbm: float = DEFAULT_TX_POWER_DBM
    max_associated: int = MAX_ASSOCIATED
    radio_capacity_mbps: float = WIRELESS_CAPACITY_MBPS


@dataclass(frozen=True)
class LinkSpec:
    capacity_mbps: float
    prop_delay_us: int


@dataclass(frozen=True)
class Topology:
    aps: tuple[ApSpec, ...]
    wae: int = 0
    links: dict[str, LinkSpec] = field(default_factory=dict)

    def link(self, name: str) -> LinkSpec:
        if name in self.links:
            return self.links[name]
        return LinkSpec(*DEFAULT_LINKS[name])


@dataclass(frozen=True)
class SubscriberSpec:
    ue: int
    key: bytes
    qos: QosProfile = field(default_factory=QosProfile)
    traffic_class: str = "default"


@dataclass(frozen=True)
class UeSpec:
    ue: int
    waypoints: tuple[tuple[int, float, float], ...]
    arrive_us: int = 0
    traffic: tuple[TrafficSpec, ...] = ()
    key: bytes | None = None
    rssi_bias_db: dict[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Directive:
    time_us: int
    op: str
    args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    duration_us: int
    topology: Topology
    subscribers: tuple[SubscriberSpec, ...] = ()
    ues: tuple[UeSpec, ...] = ()
    apps: dict[str, dict] = field(default_factory=dict)
    slices: tuple[SliceTemplate, ...] = ()
    directives: tuple[Directive, ...] = ()

    def subscriber(self, ue: int) -> SubscriberSpec | None:
        return next((s for s in self.subscribers if s.ue == ue), None)


def parse_scenario(path: Path | str) -> Scenario:
    """
    Read and validate a scenario file.

    Raises:
        FileNotFoundError: The file does not exist.
        ParseError: The file is unreadable or not valid UTF-8 JSON (with the offending line).
        ValidationError: Every problem found in the document.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    except UnicodeDecodeError as exc:
        raise ParseError(0, f"not UTF-8: {exc.reason}") from None
    except OSError as exc:
        raise ParseError(0, str(exc)) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None
    return scenario_from_dict(doc)


class _Collector:
    def __init__(self):
        self.errors: list[str] = []

    def add(self, message: str) -> None:
        self.errors.append(message)


def _number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _integer(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _list(raw: dict, key: str, where: str, errors: _Collector) -> list:
    """An optional array member; anything else is reported and treated as empty."""
    value = raw.get(key)
    if value is None:
        return []
    if not isinstance(value, list):
        errors.add(f"{where}{key} must be an array")
        return []
    return value


def _object(raw: dict, key: str, where: str, errors: _Collector) -> dict:
    """An optional object member; anything else is reported and treated as empty."""
    value = raw.get(key)
    if value is None:
        return {}
    if not isinstance(value, dict):
        errors.add(f"{where}{key} must be an object")
        return {}
    return value


def _parse_qos(raw, where: str, errors: _Collector) -> QosProfile:
    if raw is None:
        return QosProfile()
    try:
        return QosProfile(
            rate_mbps=raw.get("rate_mbps", QosProfile.rate_mbps),
            priority=raw.get("priority", QosProfile.priority),
            latency_budget_us=raw.get("latency_budget_us", QosProfile.latency_budget_us),
        )
    except (AttributeError, TypeError, ValueError) as exc:
        errors.add(f"{where}: bad qos ({exc})")
        return QosProfile()


def _parse_key(raw, where: str, errors: _Collector) -> bytes | None:
    try:
        key = bytes.fromhex(raw)
    except (TypeError, ValueError):
        errors.add(f"{where}: key must be 32 hex characters")
        return None
    if len(key) != 16:
        errors.add(f"{where}: key must be 16 bytes")
        return None
    return key


def _parse_traffic(raw, where: str, errors: _Collector) -> TrafficSpec | None:
    try:
        spec = TrafficSpec(
            kind=TrafficKind(raw.get("kind", "CBR")),
            rate_mbps=raw["rate_mbps"],
            pkt_bytes=raw.get("pkt_bytes", 1500),
            start_us=raw.get("start_us", 0),
            stop_us=raw.get("stop_us"),
            mean_on_us=raw.get("mean_on_us", 100_000),
            mean_off_us=raw.get("mean_off_us", 100_000),
            direction=Direction(raw.get("direction", "up")),
            traffic_class=raw.get("traffic_class", "default"),
        )
        validate_spec(spec)
        return spec
    except (AttributeError, KeyError, TypeError, ValueError, BadSpec) as exc:
        errors.add(f"{where}: bad traffic spec ({exc})")
        return None


def _parse_slice(raw, where: str, errors: _Collector) -> SliceTemplate | None:
    try:
        return SliceTemplate(
            slice_id=raw["slice_id"],
            filter=SliceFilter(
                ues=frozenset(raw.get("ues") or ()),
                traffic_classes=frozenset(raw.get("traffic_classes") or ()),
            ),
            weight=raw.get("weight", 1),
            rate_cap_mbps=raw.get("rate_cap_mbps"),
        )
    except (AttributeError, KeyError, TypeError, ValueError) as exc:
        errors.add(f"{where}: bad slice template ({exc})")
        return None


def scenario_from_dict(doc) -> Scenario:
    """Validate a decoded scenario document; raises ValidationError listing every problem."""
    errors = _Collector()
    if not isinstance(doc, dict):
        raise ValidationError(["scenario must be a JSON object"])
    if doc.get("schema") != SCHEMA_VERSION:
        errors.add(f"schema must be {SCHEMA_VERSION}")
    name = doc.get("name", "scenario")
    seed = doc.get("seed", 0)
    if not _integer(seed) or seed < 0:
        errors.add("seed must be a non-negative integer")
        seed = 0
    duration = doc.get("duration_us")
    if not _integer(duration) or duration <= 0:
        errors.add("duration_us must be a positive integer")
        duration = 1

    topology = _parse_topology(doc.get("topology"), errors)
    ap_indices = {ap.index for ap in topology.aps}

    subscribers = []
    for i, raw in enumerate(_list(doc, "subscribers", "", errors)):
        where = f"subscribers[{i}]"
        if not isinstance(raw, dict) or not _integer(raw.get("ue")) or raw["ue"] < 0:
            errors.add(f"{where}: ue must be a non-negative integer")
            continue
        key = _parse_key(raw.get("key"), where, errors)
        if key is None:
            continue
        subscribers.append(
            SubscriberSpec(raw["ue"], key, _parse_qos(raw.get("qos"), where, errors), raw.get("traffic_class", "default"))
        )
    seen = [s.ue for s in subscribers]
    for ue in sorted({u for u in seen if seen.count(u) > 1}):
        errors.add(f"duplicate subscriber ue {ue}")

    ues = [u for i, raw in enumerate(_list(doc, "ues", "", errors)) if (u := _parse_ue(raw, i, ap_indices, duration, errors))]
    seen = [u.ue for u in ues]
    for ue in sorted({u for u in seen if seen.count(u) > 1}):
        errors.add(f"duplicate ue {ue}")

    apps = {}
    raw_apps = doc.get("apps") or {}
    if not isinstance(raw_apps, dict):
        errors.add("apps must be an object")
        raw_apps = {}
    for app_name, params in raw_apps.items():
        if app_name not in APP_TYPES:
            errors.add(f"unknown app {app_name!r}")
            continue
        params = params or {}
        try:
            build_app(app_name, params)
        except (AppError, TypeError, ValueError) as exc:
            errors.add(f"app {app_name}: {exc}")
            continue
        apps[app_name] = dict(params)

    slices = []
    for i, raw in enumerate(_list(doc, "slices", "", errors)):
        template = _parse_slice(raw, f"slices[{i}]", errors)
        if template is not None:
            slices.append(template)
    ids = [s.slice_id for s in slices]
    for slice_id in sorted({s for s in ids if ids.count(s) > 1}):
        errors.add(f"duplicate slice id {slice_id!r}")
    if DEFAULT_SLICE in ids:
        errors.add(f"slice id {DEFAULT_SLICE!r} is reserved")
    for i, a in enumerate(slices):
        for b in slices[i + 1:]:
            if a.slice_id != b.slice_id and a.filter.overlaps(b.filter):
                errors.add(f"slices {a.slice_id!r} and {b.slice_id!r} have overlapping filters")

    directives = []
    for i, raw in enumerate(_list(doc, "directives", "", errors)):
        directive = _parse_directive(raw, i, ap_indices, apps, duration, errors)
        if directive is not None:
            directives.append(directive)

    if errors.errors:
        raise ValidationError(errors.errors)
    return Scenario(
        name=name,
        seed=seed,
        duration_us=duration,
        topology=topology,
        subscribers=tuple(subscribers),
        ues=tuple(ues),
        apps=apps,
        slices=tuple(slices),
        directives=tuple(sorted(directives, key=lambda d: d.time_us)),
    )


def _parse_topology(raw, errors: _Collector) -> Topology:
    if not isinstance(raw, dict):
        errors.add("topology is required")
        return Topology(aps=())
    aps = []
    for i, ap in enumerate(_list(raw, "aps", "topology.", errors)):
        where = f"topology.aps[{i}]"
        try:
            spec = ApSpec(
                index=ap.get("id", i),
                position=(float(ap["position"][0]), float(ap["position"][1])),
                channel=ap.get("channel", CHANNELS[0]),
                tx_power_dbm=ap.get("tx_power_dbm", DEFAULT_TX_POWER_DBM),
                max_associated=ap.get("max_associated", MAX_ASSOCIATED),
                radio_capacity_mbps=ap.get("radio_capacity_mbps", WIRELESS_CAPACITY_MBPS),
            )
        except (AttributeError, KeyError, IndexError, TypeError, ValueError) as exc:
            errors.add(f"{where}: bad AP ({exc})")
            continue
        if spec.channel not in CHANNELS:
            errors.add(f"{where}: channel {spec.channel} not in {CHANNELS}")
        if not _number(spec.tx_power_dbm):
            errors.add(f"{where}: tx_power_dbm must be a number")
        if not _integer(spec.max_associated) or spec.max_associated < 1:
            errors.add(f"{where}: max_associated must be a positive integer")
        if not _number(spec.radio_capacity_mbps) or spec.radio_capacity_mbps <= 0:
            errors.add(f"{where}: radio_capacity_mbps must be positive")
        aps.append(spec)
    if not aps:
        errors.add("topology needs at least one AP")
    if sorted(ap.index for ap in aps) != list(range(len(aps))):
        errors.add("AP ids must be 0..n-1 without gaps or duplicates")

    links = {}
    for name, link in _object(raw, "links", "topology.", errors).items():
        if name not in DEFAULT_LINKS:
            errors.add(f"unknown link {name!r}")
            continue
        try:
            spec = LinkSpec(link["capacity_mbps"], link["prop_delay_us"])
        except (KeyError, TypeError) as exc:
            errors.add(f"link {name}: missing {exc}")
            continue
        if not _number(spec.capacity_mbps) or spec.capacity_mbps <= 0:
            errors.add(f"link {name}: capacity_mbps must be positive")
        if not _integer(spec.prop_delay_us) or spec.prop_delay_us < 0:
            errors.add(f"link {name}: prop_delay_us must be a non-negative integer")
        links[name] = spec
    wae = raw.get("wae", 0)
    if wae != 0:
        errors.add("exactly one WAE (id 0) is supported")
    return Topology(aps=tuple(sorted(aps, key=lambda a: a.index)), wae=0, links=links)


def _parse_ue(raw, i: int, ap_indices: set[int], duration: int, errors: _Collector) -> UeSpec | None:
    where = f"ues[{i}]"
    if not isinstance(raw, dict) or not _integer(raw.get("ue")) or raw["ue"] < 0:
        errors.add(f"{where}: ue must be a non-negative integer")
        return None
    where = f"ue {raw['ue']}"
    waypoints = []
    for point in _list(raw, "waypoints", f"{where}: ", errors):
        try:
            t, x, y = point
            waypoints.append((int(t), float(x), float(y)))
        except (TypeError, ValueError):
            errors.add(f"{where}: waypoint must be [t_us, x, y]")
    if not waypoints:
        errors.add(f"{where}: at least one waypoint is required")
    elif any(b[0] < a[0] for a, b in zip(waypoints, waypoints[1:])):
        errors.add(f"{where}: waypoint times must be non-decreasing")
    arrive = raw.get("arrive_us", 0)
    if not _integer(arrive) or not 0 <= arrive <= duration:
        errors.add(f"{where}: arrive_us must be within the run")
        arrive = 0
    traffic = []
    for j, spec in enumerate(_list(raw, "traffic", f"{where}: ", errors)):
        parsed = _parse_traffic(spec, f"{where} traffic[{j}]", errors)
        if parsed is not None:
            traffic.append(parsed)
    key = None
    if raw.get("key") is not None:
        key = _parse_key(raw["key"], where, errors)
    bias = {}
    for ap, db in _object(raw, "rssi_bias_db", f"{where}: ", errors).items():
        try:
            index = int(ap)
        except ValueError:
            errors.add(f"{where}: rssi_bias_db key {ap!r} is not an AP id")
            continue
        if index not in ap_indices:
            errors.add(f"{where}: references unknown ap {index}")
            continue
        if not _number(db):
            errors.add(f"{where}: rssi_bias_db for ap {index} must be a number")
            continue
        bias[index] = float(db)
    return UeSpec(raw["ue"], tuple(waypoints), arrive, tuple(traffic), key, bias)


def _parse_directive(raw, i: int, ap_indices: set[int], apps: dict, duration: int, errors: _Collector) -> Directive | None:
    where = f"directives[{i}]"
    if not isinstance(raw, dict):
        errors.add(f"{where}: must be an object")
        return None
    time_us = raw.get("time_us")
    op = raw.get("op")
    if not _integer(time_us) or not 0 <= time_us <= duration:
        errors.add(f"{where}: time_us must be within the run")
        return None
    if op not in DIRECTIVE_OPS:
        errors.add(f"{where}: unknown op {op!r}")
        return None
    args = {k: v for k, v in raw.items() if k not in ("time_us", "op")}
    if op in ("slice_create", "slice_update"):
        if _parse_slice(args.get("template"), where, errors) is None:
            return None
    elif op == "slice_delete":
        if not isinstance(args.get("slice_id"), str):
            errors.add(f"{where}: slice_delete needs slice_id")
            return None
    elif op == "set_param":
        if args.get("app") not in apps:
            errors.add(f"{where}: set_param names app {args.get('app')!r} which is not enabled")
            return None
        if "key" not in args or "value" not in args:
            errors.add(f"{where}: set_param needs key and value")
            return None
    elif op == "push_config":
        if args.get("ap") not in ap_indices:
            errors.add(f"{where}: references unknown ap {args.get('ap')}")
            return None
        if args.get("channel") is not None and args["channel"] not in CHANNELS:
            errors.add(f"{where}: channel {args['channel']} not in {CHANNELS}")
            return None
    return Directive(time_us, op, args)


def scenario_to_dict(scenario: Scenario) -> dict:
    """Emit a scenario document; scenario_from_dict(scenario_to_dict(s)) == s."""
    return {
        "schema": SCHEMA_VERSION,
        "name": scenario.name,
        "seed": scenario.seed,
        "duration_us": scenario.duration_us,
        "topology": {
            "aps": [
                {
                    "id": ap.index,
                    "position": list(ap.position),
                    "channel": ap.channel,
                    "tx_power_dbm": ap.tx_power_dbm,
                    "max_associated": ap.max_associated,
                    "radio_capacity_mbps": ap.radio_capacity_mbps,
                }
                for ap in scenario.topology.aps
            ],
            "wae": scenario.topology.wae,
            "links": {
                name: {"capacity_mbps": link.capacity_mbps, "prop_delay_us": link.prop_delay_us}
                for name, link in scenario.topology.links.items()
            },
        },
        "subscribers": [
            {
                "ue": s.ue,
                "key": s.key.hex(),
                "qos": {
                    "rate_mbps": s.qos.rate_mbps,
                    "priority": s.qos.priority,
                    "latency_budget_us": s.qos.latency_budget_us,
                },
                "traffic_class": s.traffic_class,
            }
            for s in scenario.subscribers
        ],
        "ues": [
            {
                "ue": u.ue,
                "waypoints": [list(p) for p in u.waypoints],
                "arrive_us": u.arrive_us,
                "traffic": [t.to_dict() for t in u.traffic],
                "key": u.key.hex() if u.key is not None else None,
                "rssi_bias_db": {str(ap): db for ap, db in u.rssi_bias_db.items()},
            }
            for u in scenario.ues
        ],
        "apps": {name: dict(params) for name, params in scenario.apps.items()},
        "slices": [s.to_payload() for s in scenario.slices],
        "directives": [{"time_us": d.time_us, "op": d.op, **d.args} for d in scenario.directives],
    }


def scale_load(scenario: Scenario, factor: float) -> Scenario:
    """Multiply every traffic rate by `factor`; flows vanish at factor 0."""
    ues = tuple(
        replace(u, traffic=tuple(s for s in (t.scaled(factor) for t in u.traffic) if s is not None))
        for u in scenario.ues
    )
    return replace(scenario, ues=ues)
