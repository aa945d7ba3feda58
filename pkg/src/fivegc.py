"""Minimal 5G core stubs: AMF (NAS registration with challenge-response) and UPF (N3 sessions)."""

import hashlib
import hmac
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .config import N2_ENVELOPE_BYTES, N3_HEADER_BYTES
from .domain import NodeId, QosProfile, ue_id

logger = logging.getLogger(__name__)

NONCE_BYTES = 16
RESPONSE_BYTES = 16


class CoreError(Exception):
    """Base class for 5G core stub errors."""


class UnknownSubscriber(CoreError):
    pass


class UnknownTunnel(CoreError):
    pass


class NasType(str, Enum):
    REGISTRATION_REQUEST = "REGISTRATION_REQUEST"
    AUTH_CHALLENGE = "AUTH_CHALLENGE"
    AUTH_RESPONSE = "AUTH_RESPONSE"
    REGISTRATION_ACCEPT = "REGISTRATION_ACCEPT"
    REGISTRATION_REJECT = "REGISTRATION_REJECT"


def encode_nas(nas_type: NasType, ue: NodeId, **fields) -> bytes:
    return json.dumps({"type": nas_type.value, "ue": ue.index, **fields}, sort_keys=True).encode("utf-8")


def decode_nas(data: bytes) -> dict:
    return json.loads(data.decode("utf-8"))


def auth_response(key: bytes, nonce: bytes) -> bytes:
    """Expected challenge response: first 16 bytes of SHA-256(key || nonce)."""
    return hashlib.sha256(key + nonce).digest()[:RESPONSE_BYTES]


@dataclass(frozen=True)
class Subscriber:
    key: bytes
    qos: QosProfile = field(default_factory=QosProfile)
    traffic_class: str = "default"


class AmfState(str, Enum):
    NONE = "NONE"
    CHALLENGED = "CHALLENGED"
    REGISTERED = "REGISTERED"


@dataclass
class AmfUeRecord:
    ue: NodeId
    key: bytes
    nonce: bytes | None = None
    state: AmfState = AmfState.NONE


@dataclass
class UpfSession:
    ue: NodeId
    tunnel_id: int
    qos: QosProfile
    bytes_up: int = 0
    bytes_down: int = 0


@dataclass(frozen=True)
class N2Message:
    """NAS carried over N2; `session` is set on the accept that sets up a PDU session."""

    ue: NodeId
    nas: bytes
    session: UpfSession | None = None
    traffic_class: str = "default"

    @property
    def size_bytes(self) -> int:
        return N2_ENVELOPE_BYTES + len(self.nas)


@dataclass(frozen=True)
class VerifyResult:
    accepted: bool
    session: UpfSession | None = None
    reason: str = ""


class Upf:
    """User plane function: tunnel allocation and N3 termination."""

    def __init__(self):
        self.sessions: dict[NodeId, UpfSession] = {}
        self._by_tunnel: dict[int, UpfSession] = {}
        self._next_tunnel = 1
        self.counters: Counter[str] = Counter()

    def upf_create_session(self, ue: NodeId, qos: QosProfile) -> UpfSession:
        """Create (or return the existing) session for a UE."""
        existing = self.sessions.get(ue)
        if existing is not None:
            self.counters["duplicate_sessions"] += 1
            return existing
        session = UpfSession(ue, self._next_tunnel, qos)
        self._next_tunnel += 1
        self.sessions[ue] = session
        self._by_tunnel[session.tunnel_id] = session
        logger.debug("UPF session %s tunnel %d", ue, session.tunnel_id)
        return session

    def session_for_tunnel(self, tunnel_id: int) -> UpfSession | None:
        return self._by_tunnel.get(tunnel_id)

    def upf_terminate(self, tunnel_id: int, size_bytes: int) -> int:
        """
        Decapsulate an uplink N3 packet for delivery to the data network.

        Returns:
            The inner packet size.

        Raises:
            UnknownTunnel: The tunnel id belongs to no session (drop counted).
        """
        session = self._by_tunnel.get(tunnel_id)
        if session is None:
            self.counters["unknown_tunnel_drops"] += 1
            raise UnknownTunnel(f"no session for tunnel {tunnel_id}")
        inner = size_bytes - N3_HEADER_BYTES
        session.bytes_up += inner
        return inner

    def encapsulate_downlink(self, ue: NodeId, size_bytes: int) -> tuple[int, int]:
        """Returns (tunnel_id, N3 size) for a DN packet toward the UE."""
        session = self.sessions.get(ue)
        if session is None:
            self.counters["no_session_drops"] += 1
            raise UnknownTunnel(f"no session for {ue}")
        session.bytes_down += size_bytes
        return session.tunnel_id, size_bytes + N3_HEADER_BYTES


class Amf:
    """Access and mobility function: subscriber table, NAS registration, session trigger."""

    def __init__(self, subscribers: dict[NodeId, Subscriber], rng: np.random.Generator, upf: Upf):
        self.subscribers = dict(subscribers)
        self.rng = rng
        self.upf = upf
        self.records: dict[NodeId, AmfUeRecord] = {}
        self.counters: Counter[str] = Counter()

    def amf_register(self, ue: NodeId) -> bytes:
        """
        Start registration; returns the NAS challenge with a fresh nonce.

        Raises:
            UnknownSubscriber: The UE is not provisioned (no record is created).
        """
        subscriber = self.subscribers.get(ue)
        if subscriber is None:
            self.counters["unknown_subscriber"] += 1
            raise UnknownSubscriber(str(ue))
        nonce = self.rng.bytes(NONCE_BYTES)
        record = self.records.setdefault(ue, AmfUeRecord(ue, subscriber.key))
        record.nonce = nonce
        record.state = AmfState.CHALLENGED
        return encode_nas(NasType.AUTH_CHALLENGE, ue, nonce=nonce.hex())

    def amf_verify(self, ue: NodeId, response: bytes) -> VerifyResult:
        """Check a challenge response; on accept, create the UPF session."""
        record = self.records.get(ue)
        if record is None or record.state is not AmfState.CHALLENGED:
            self.counters["verify_without_challenge"] += 1
            return VerifyResult(False, reason="no outstanding challenge")
        if not hmac.compare_digest(response, auth_response(record.key, record.nonce)):
            record.state = AmfState.NONE
            record.nonce = None
            self.counters["auth_rejects"] += 1
            logger.info("authentication rejected for %s", ue)
            return VerifyResult(False, reason="bad response")
        record.state = AmfState.REGISTERED
        self.counters["auth_accepts"] += 1
        session = self.upf.upf_create_session(ue, self.subscribers[ue].qos)
        return VerifyResult(True, session)

    def handle_uplink_nas(self, ue: NodeId, nas: bytes) -> N2Message:
        """Process one uplink NAS message and build the downlink N2 reply."""
        try:
            message = decode_nas(nas)
            nas_type = NasType(message["type"])
        except (ValueError, KeyError, UnicodeDecodeError):
            self.counters["malformed_nas"] += 1
            return N2Message(ue, encode_nas(NasType.REGISTRATION_REJECT, ue, cause="malformed"))

        if nas_type is NasType.REGISTRATION_REQUEST:
            try:
                return N2Message(ue, self.amf_register(ue))
            except UnknownSubscriber:
                return N2Message(ue, encode_nas(NasType.REGISTRATION_REJECT, ue, cause="unknown subscriber"))

        if nas_type is NasType.AUTH_RESPONSE:
            try:
                response = bytes.fromhex(message.get("res", ""))
            except ValueError:
                response = b""
            result = self.amf_verify(ue, response)
            if not result.accepted:
                return N2Message(ue, encode_nas(NasType.REGISTRATION_REJECT, ue, cause=result.reason))
            session = result.session
            accept = encode_nas(NasType.REGISTRATION_ACCEPT, ue, tunnel_id=session.tunnel_id)
            return N2Message(ue, accept, session, self.subscribers[ue].traffic_class)

        self.counters["unexpected_nas"] += 1
        return N2Message(ue, encode_nas(NasType.REGISTRATION_REJECT, ue, cause="unexpected message"))

    def registered(self, ue: NodeId) -> bool:
        record = self.records.get(ue)
        return record is not None and record.state is AmfState.REGISTERED


def sessions_without_authentication(amf: Amf, upf: Upf) -> list[NodeId]:
    """UEs holding a UPF session whose AMF record is not REGISTERED."""
    return [ue for ue in upf.sessions if not amf.registered(ue)]


def ue_from_nas(data: bytes) -> NodeId:
    return ue_id(decode_nas(data)["ue"])
