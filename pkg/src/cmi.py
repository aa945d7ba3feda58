"""Control and Management Interface: frame codec, streaming decoder and session handshake.

Frame layout: 4-byte big-endian body length L, then the body:
version (1 byte) | msg_type (1 byte) | correlation_id (8 bytes, big-endian) | payload,
where the payload is UTF-8 JSON with lexicographically sorted keys.
"""

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable

from .config import CMI_VERSION, MAX_FRAME_BYTES

logger = logging.getLogger(__name__)

LENGTH_BYTES = 4
HEADER_BYTES = 10  # version + msg_type + correlation_id
MAX_CORRELATION_ID = (1 << 64) - 1


class MsgType(IntEnum):
    HELLO = 0x01
    HELLO_ACK = 0x02
    CONFIG_SET = 0x10
    CONFIG_ACK = 0x11
    CONFIG_GET = 0x12
    FLOW_ADD = 0x20
    FLOW_MOD = 0x21
    FLOW_DEL = 0x22
    FLOW_ACK = 0x23
    STATS_REPORT = 0x30
    STATS_SUBSCRIBE = 0x31
    UE_STEER = 0x40
    CHANNEL_SET = 0x41
    MGMT_POLICY_SET = 0x42
    SLICE_CREATE = 0x50
    SLICE_READ = 0x51
    SLICE_UPDATE = 0x52
    SLICE_DELETE = 0x53
    SLICE_ACK = 0x54
    SESSION_NOTIFY = 0x61
    ERROR = 0x7F


# Every CMI message is control/management traffic; nothing in this set carries user data.
CONTROL_TYPES = frozenset(MsgType)


class CmiError(Exception):
    """Base class for CMI errors."""


class SchemaViolation(CmiError):
    def __init__(self, msg_type, reason: str):
        self.msg_type = msg_type
        self.reason = reason
        name = msg_type.name if isinstance(msg_type, MsgType) else msg_type
        super().__init__(f"{name}: {reason}")


class DecodeError(CmiError):
    """A rejected frame; `consumed` bytes belong to it and must be discarded."""

    def __init__(self, reason: str, consumed: int):
        self.reason = reason
        self.consumed = consumed
        super().__init__(reason)


class BadVersion(DecodeError):
    pass


class UnknownMsgType(DecodeError):
    pass


class MalformedPayload(DecodeError):
    pass


class FrameTooLarge(DecodeError):
    pass


class HandshakeError(CmiError):
    VERSION_MISMATCH = "version mismatch"
    NOT_HELLO = "first message not HELLO"

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


@dataclass(frozen=True)
class NeedMoreBytes:
    """Returned when the buffer does not yet hold a full frame."""

    needed: int


@dataclass(frozen=True)
class CmiMessage:
    msg_type: MsgType
    correlation_id: int = 0
    payload: dict = field(default_factory=dict)
    version: int = CMI_VERSION


# Payload schemas: key -> accepted kind. Optional keys also accept null.
_INT, _NUM, _STR, _BOOL, _LIST, _DICT = "int", "number", "str", "bool", "list", "dict"

SCHEMAS: dict[MsgType, tuple[dict[str, str], dict[str, str]]] = {
    MsgType.HELLO: ({}, {"controller_id": _INT, "proto_version": _INT}),
    MsgType.HELLO_ACK: ({}, {"wae_id": _INT, "ap_count": _INT, "proto_version": _INT}),
    MsgType.CONFIG_SET: (
        {"ap": _INT},
        {"channel": _INT, "tx_power_dbm": _NUM, "mgmt_policy": _DICT},
    ),
    MsgType.CONFIG_ACK: ({}, {"ap": _INT, "rules": _LIST, "slices": _LIST, "aps": _LIST}),
    MsgType.CONFIG_GET: ({}, {"ap": _INT}),
    MsgType.FLOW_ADD: (
        {"ue": _INT, "rate_mbps": _NUM, "priority": _INT, "out": _STR},
        {
            "rule_id": _INT,
            "traffic_class": _STR,
            "direction": _STR,
            "latency_budget_us": _INT,
            "slice": _STR,
            "buffer": _BOOL,
        },
    ),
    MsgType.FLOW_MOD: (
        {"rule_id": _INT},
        {"out": _STR, "rate_mbps": _NUM, "priority": _INT, "buffer": _BOOL},
    ),
    MsgType.FLOW_DEL: ({"rule_id": _INT}, {}),
    MsgType.FLOW_ACK: ({"rule_id": _INT}, {}),
    MsgType.STATS_REPORT: ({}, {"time_us": _INT, "aps": _LIST, "ues": _LIST, "probes": _LIST}),
    MsgType.STATS_SUBSCRIBE: ({"interval_us": _INT}, {}),
    MsgType.UE_STEER: ({"ue": _INT, "to_ap": _INT}, {"from_ap": _INT}),
    MsgType.CHANNEL_SET: ({"ap": _INT, "channel": _INT}, {}),
    MsgType.MGMT_POLICY_SET: ({"ap": _INT}, {"suppress_probe_above_load": _INT, "deny_list": _LIST}),
    MsgType.SLICE_CREATE: (
        {"slice_id": _STR, "weight": _INT},
        {"ues": _LIST, "traffic_classes": _LIST, "rate_cap_mbps": _NUM},
    ),
    MsgType.SLICE_READ: ({"slice_id": _STR}, {}),
    MsgType.SLICE_UPDATE: (
        {"slice_id": _STR, "weight": _INT},
        {"ues": _LIST, "traffic_classes": _LIST, "rate_cap_mbps": _NUM},
    ),
    MsgType.SLICE_DELETE: ({"slice_id": _STR}, {"force": _BOOL}),
    MsgType.SLICE_ACK: ({"slice_id": _STR}, {"template": _DICT, "deleted": _BOOL}),
    MsgType.SESSION_NOTIFY: (
        {"ue": _INT, "tunnel_id": _INT, "rate_mbps": _NUM, "priority": _INT, "latency_budget_us": _INT},
        {"ap": _INT, "traffic_class": _STR},
    ),
    MsgType.ERROR: ({"code": _STR, "detail": _STR}, {}),
}


def _is_kind(value, kind: str) -> bool:
    if kind == _BOOL:
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    if kind == _INT:
        return isinstance(value, int)
    if kind == _NUM:
        return isinstance(value, (int, float))
    if kind == _STR:
        return isinstance(value, str)
    if kind == _LIST:
        return isinstance(value, list)
    return isinstance(value, dict)


def _check_json_value(value, depth: int = 0) -> None:
    if depth > 32:
        raise ValueError("payload nested too deeply")
    if value is None or isinstance(value, (bool, int, str)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError("non-finite number")
        return
    if isinstance(value, list):
        for item in value:
            _check_json_value(item, depth + 1)
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise ValueError(f"non-string key {key!r}")
            _check_json_value(item, depth + 1)
        return
    raise ValueError(f"unsupported payload value {type(value).__name__}")


def validate_payload(msg_type: MsgType, payload) -> None:
    """
    Check a payload against the schema for its message type.

    Raises:
        SchemaViolation: On missing/unknown keys, wrong kinds or non-JSON values.
    """
    if not isinstance(payload, dict):
        raise SchemaViolation(msg_type, "payload must be an object")
    required, optional = SCHEMAS[msg_type]
    for key, kind in required.items():
        if key not in payload:
            raise SchemaViolation(msg_type, f"missing key {key!r}")
        if not _is_kind(payload[key], kind):
            raise SchemaViolation(msg_type, f"{key!r} must be {kind}")
    for key, value in payload.items():
        if key in required:
            continue
        if key not in optional:
            raise SchemaViolation(msg_type, f"unknown key {key!r}")
        if value is not None and not _is_kind(value, optional[key]):
            raise SchemaViolation(msg_type, f"{key!r} must be {optional[key]}")
    try:
        _check_json_value(payload)
    except ValueError as exc:
        raise SchemaViolation(msg_type, str(exc)) from exc


def encode_frame(msg: CmiMessage) -> bytes:
    """
    Encode a message into a length-prefixed frame.

    Raises:
        SchemaViolation: If the message breaks an invariant or its payload schema.
    """
    if msg.version != CMI_VERSION:
        raise SchemaViolation(msg.msg_type, f"version must be {CMI_VERSION}")
    if not isinstance(msg.msg_type, MsgType):
        raise SchemaViolation(msg.msg_type, "unknown message type")
    if not 0 <= msg.correlation_id <= MAX_CORRELATION_ID:
        raise SchemaViolation(msg.msg_type, "correlation_id must fit in 64 bits")
    validate_payload(msg.msg_type, msg.payload)

    text = json.dumps(msg.payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    body = (
        bytes((msg.version, int(msg.msg_type)))
        + msg.correlation_id.to_bytes(8, "big")
        + text.encode("utf-8")
    )
    if len(body) > MAX_FRAME_BYTES:
        raise SchemaViolation(msg.msg_type, "frame exceeds size cap")
    return len(body).to_bytes(LENGTH_BYTES, "big") + body


def _reject_constant(name: str):
    raise ValueError(f"JSON constant {name} not allowed")


def _finite_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"number {text} out of range")
    return value


def decode_frame(buf: bytes | bytearray) -> tuple[CmiMessage, int] | NeedMoreBytes:
    """
    Decode one frame from the start of `buf`.

    Returns:
        (message, bytes consumed), or NeedMoreBytes without consuming anything.

    Raises:
        DecodeError: BadVersion, UnknownMsgType, MalformedPayload or FrameTooLarge;
            `consumed` tells how many bytes the rejected frame occupies.
    """
    if len(buf) < LENGTH_BYTES:
        return NeedMoreBytes(LENGTH_BYTES)
    length = int.from_bytes(buf[:LENGTH_BYTES], "big")
    total = LENGTH_BYTES + length
    if length > MAX_FRAME_BYTES:
        raise FrameTooLarge(f"frame body of {length} bytes exceeds {MAX_FRAME_BYTES}", total)
    if len(buf) < total:
        return NeedMoreBytes(total)

    body = bytes(buf[LENGTH_BYTES:total])
    if length < HEADER_BYTES:
        raise MalformedPayload(f"frame body of {length} bytes is shorter than the header", total)
    if body[0] != CMI_VERSION:
        raise BadVersion(f"version {body[0]} not supported", total)
    try:
        msg_type = MsgType(body[1])
    except ValueError:
        raise UnknownMsgType(f"unknown message type 0x{body[1]:02X}", total) from None
    correlation_id = int.from_bytes(body[2:HEADER_BYTES], "big")

    try:
        payload = json.loads(
            body[HEADER_BYTES:].decode("utf-8"),
            parse_constant=_reject_constant,
            parse_float=_finite_float,
        )
        validate_payload(msg_type, payload)
    except (UnicodeDecodeError, ValueError, RecursionError, SchemaViolation) as exc:
        raise MalformedPayload(f"bad {msg_type.name} payload: {exc}", total) from None

    return CmiMessage(msg_type, correlation_id, payload, body[0]), total


class StreamDecoder:
    """
    Incremental decoder over a byte stream.

    Every fed byte ends up consumed (in a message), discarded (in a rejected
    frame) or buffered: fed == consumed + discarded + buffered.
    """

    def __init__(self):
        self._buf = bytearray()
        self._skip = 0
        self.fed = 0
        self.consumed = 0
        self.discarded = 0
        self.errors: Counter[str] = Counter()

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> list[CmiMessage | DecodeError]:
        self.fed += len(data)
        if self._skip:
            take = min(self._skip, len(data))
            self._skip -= take
            self.discarded += take
            data = data[take:]
        self._buf += data

        out: list[CmiMessage | DecodeError] = []
        while not self._skip:
            try:
                result = decode_frame(self._buf)
            except DecodeError as exc:
                drop = min(exc.consumed, len(self._buf))
                del self._buf[:drop]
                self.discarded += drop
                self._skip = exc.consumed - drop
                self.errors[type(exc).__name__] += 1
                out.append(exc)
                continue
            if isinstance(result, NeedMoreBytes):
                break
            msg, used = result
            del self._buf[:used]
            self.consumed += used
            out.append(msg)
        return out


def error_message(correlation_id: int, code: str, detail: str) -> CmiMessage:
    return CmiMessage(MsgType.ERROR, correlation_id, {"code": code, "detail": detail})


class Role(str, Enum):
    CONTROLLER = "CONTROLLER"
    WAE = "WAE"


class SessionState(str, Enum):
    NEW = "NEW"
    HELLO_SENT = "HELLO_SENT"
    ESTABLISHED = "ESTABLISHED"
    FAILED = "FAILED"


@dataclass(frozen=True)
class SessionEstablished:
    role: Role
    peer_id: int | None
    ap_count: int
    sent: tuple[CmiMessage, ...] = ()


class CmiSession:
    """Single-owner CMI session; handles the HELLO/HELLO_ACK bootstrap."""

    def __init__(self, role: Role, local_id: int = 0, ap_count: int = 0, hello_correlation: int = 1):
        self.role = role
        self.local_id = local_id
        self.ap_count = ap_count
        self.state = SessionState.NEW
        self.peer_id: int | None = None
        self._hello_correlation = hello_correlation

    @property
    def established(self) -> bool:
        return self.state is SessionState.ESTABLISHED

    def open(self) -> CmiMessage | None:
        """Start the session; the controller side returns the HELLO to send."""
        if self.role is not Role.CONTROLLER or self.state is not SessionState.NEW:
            return None
        self.state = SessionState.HELLO_SENT
        return CmiMessage(
            MsgType.HELLO,
            self._hello_correlation,
            {"controller_id": self.local_id, "proto_version": CMI_VERSION},
        )

    def _fail(self, reason: str) -> HandshakeError:
        self.state = SessionState.FAILED
        logger.warning("CMI handshake failed (%s): %s", self.role.value, reason)
        return HandshakeError(reason)

    def handle(self, msg: CmiMessage) -> list[CmiMessage]:
        """
        Process a message received before establishment.

        Returns:
            Replies to send (the WAE's HELLO_ACK).

        Raises:
            HandshakeError: On out-of-order messages or a version mismatch.
        """
        if self.state is SessionState.FAILED:
            raise HandshakeError("session failed")
        if self.established:
            return []

        if self.role is Role.WAE:
            if msg.msg_type is not MsgType.HELLO:
                raise self._fail(HandshakeError.NOT_HELLO)
            if msg.payload.get("proto_version", CMI_VERSION) != CMI_VERSION:
                raise self._fail(HandshakeError.VERSION_MISMATCH)
            self.peer_id = msg.payload.get("controller_id")
            self.state = SessionState.ESTABLISHED
            return [
                CmiMessage(
                    MsgType.HELLO_ACK,
                    msg.correlation_id,
                    {"wae_id": self.local_id, "ap_count": self.ap_count},
                )
            ]

        if self.state is not SessionState.HELLO_SENT or msg.msg_type is not MsgType.HELLO_ACK:
            raise self._fail(HandshakeError.NOT_HELLO)
        if msg.payload.get("proto_version", CMI_VERSION) != CMI_VERSION:
            raise self._fail(HandshakeError.VERSION_MISMATCH)
        self.peer_id = msg.payload.get("wae_id")
        self.ap_count = msg.payload.get("ap_count") or 0
        self.state = SessionState.ESTABLISHED
        return []


def handshake(
    role: Role,
    peer_msgs: Iterable[CmiMessage],
    *,
    local_id: int = 0,
    ap_count: int = 0,
) -> SessionEstablished:
    """
    Run the session bootstrap against a stream of peer messages.

    Raises:
        HandshakeError: If the peer breaks the ordering rule, the versions
            differ, or the stream ends before establishment.
    """
    session = CmiSession(role, local_id, ap_count)
    sent: list[CmiMessage] = []
    hello = session.open()
    if hello is not None:
        sent.append(hello)
    for msg in peer_msgs:
        sent.extend(session.handle(msg))
        if session.established:
            return SessionEstablished(role, session.peer_id, session.ap_count, tuple(sent))
    raise HandshakeError("peer stream ended before establishment")
