"""FEDA wire protocol and its carriers: a deterministic lossy in-process network or TCP.

Frame layout (little-endian)::

    0   4s   magic "FEDA"
    4   u8   protocol version (1)
    5   u8   message type
    6   u32  round
    10  u32  payload length L
    14  L    payload
    14+L u32 CRC-32 (IEEE) of the payload

Payloads (``str`` = u16 byte length + UTF-8; weights = u32 count + float32s)::

    HELLO         str client_id, u64 arch digest, u32 sample capacity
    GLOBAL_MODEL  u64 digest, u32 version, weights
    LOCAL_UPDATE  str client_id, u32 sample_count, u64 digest, u32 version, weights
    ROUND_COMMIT, ROUND_ABORT, ERROR
                  empty, or u16 code + str text
"""
from __future__ import annotations

import enum
import socket
import struct
import threading
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ProtocolError

MAGIC = b"FEDA"
VERSION = 1
HEADER = struct.Struct("<4sBBII")
HEADER_SIZE = HEADER.size  # 14
CRC_SIZE = 4
MAX_PAYLOAD = 64 * 1024 * 1024


class MsgType(enum.IntEnum):
    HELLO = 1
    GLOBAL_MODEL = 2
    LOCAL_UPDATE = 3
    ROUND_COMMIT = 4
    ROUND_ABORT = 5
    ERROR = 6


class DecodeError(FormatError):
    """Typed decoding failure. ``kind`` is one of :data:`DECODE_ERRORS`."""

    def __init__(self, kind: str, message: str, offset: int):
        super().__init__(f"{kind}: {message}", offset)
        self.kind = kind


DECODE_ERRORS = ("bad_magic", "bad_version", "bad_type", "oversize", "truncated", "trailing", "bad_crc", "bad_payload")


class EncodeError(ProtocolError):
    pass


@dataclass(eq=False)
class RoundMessage:
    msg_type: MsgType
    round: int
    client_id: str = ""
    digest: int = 0
    capacity: int = 0
    sample_count: int = 0
    version: int = 0
    weights: np.ndarray | None = None
    code: int | None = None
    text: str = ""

    def __eq__(self, other):
        if not isinstance(other, RoundMessage):
            return NotImplemented
        wa = None if self.weights is None else np.asarray(self.weights, "<f4").tobytes()
        wb = None if other.weights is None else np.asarray(other.weights, "<f4").tobytes()
        return (
            self.msg_type == other.msg_type
            and self.round == other.round
            and self.client_id == other.client_id
            and self.digest == other.digest
            and self.capacity == other.capacity
            and self.sample_count == other.sample_count
            and self.version == other.version
            and wa == wb
            and self.code == other.code
            and self.text == other.text
        )


def hello(client_id: str, digest: int, capacity: int, rnd: int = 0) -> RoundMessage:
    return RoundMessage(MsgType.HELLO, rnd, client_id=client_id, digest=digest, capacity=capacity)


def global_model(rnd: int, mp) -> RoundMessage:
    return RoundMessage(MsgType.GLOBAL_MODEL, rnd, digest=mp.arch.digest, version=mp.version, weights=mp.weights)


def local_update(u) -> RoundMessage:
    return RoundMessage(
        MsgType.LOCAL_UPDATE,
        u.round,
        client_id=u.client_id,
        sample_count=u.sample_count,
        digest=u.params.arch.digest,
        version=u.params.version,
        weights=u.params.weights,
    )


def control(msg_type: MsgType, rnd: int, code: int | None = None, text: str = "") -> RoundMessage:
    return RoundMessage(MsgType(msg_type), rnd, code=code, text=text)


def to_model_params(m: RoundMessage):
    """Rebuild ModelParams; an unknown digest raises IncompatibleArchitectureError."""
    from .models import ModelParams, arch_by_digest

    return ModelParams(arch_by_digest(m.digest), m.version, m.weights)


def to_client_update(m: RoundMessage):
    from .federation import ClientUpdate

    return ClientUpdate(m.client_id, m.round, m.sample_count, to_model_params(m))


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise EncodeError("string field longer than 65535 bytes")
    return struct.pack("<H", len(b)) + b


def _pack_weights(w) -> bytes:
    w = np.ascontiguousarray(w, dtype="<f4")
    if w.ndim != 1:
        raise EncodeError("weights must be a flat vector")
    return struct.pack("<I", w.size) + w.tobytes()


def _payload(m: RoundMessage) -> bytes:
    t = m.msg_type
    if t == MsgType.HELLO:
        return _pack_str(m.client_id) + struct.pack("<QI", m.digest, m.capacity)
    if t == MsgType.GLOBAL_MODEL:
        if m.weights is None:
            raise EncodeError("GLOBAL_MODEL needs weights")
        return struct.pack("<QI", m.digest, m.version) + _pack_weights(m.weights)
    if t == MsgType.LOCAL_UPDATE:
        if m.weights is None:
            raise EncodeError("LOCAL_UPDATE needs weights")
        return (
            _pack_str(m.client_id)
            + struct.pack("<IQI", m.sample_count, m.digest, m.version)
            + _pack_weights(m.weights)
        )
    if m.code is None:
        if m.text:
            raise EncodeError("text without a code")
        return b""
    return struct.pack("<H", m.code) + _pack_str(m.text)


def encode(m: RoundMessage) -> bytes:
    try:
        t = MsgType(m.msg_type)
        payload = _payload(m)
        if len(payload) > MAX_PAYLOAD:
            raise EncodeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
        head = HEADER.pack(MAGIC, VERSION, t, m.round, len(payload))
    except (struct.error, ValueError, OverflowError) as exc:
        raise EncodeError(f"malformed message: {exc}") from exc
    return head + payload + struct.pack("<I", zlib.crc32(payload))


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------


class _Body:
    """Bounds-checked cursor over a payload; offsets are frame-absolute."""

    def __init__(self, buf: memoryview, base: int):
        self.buf = buf
        self.pos = 0
        self.base = base

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise DecodeError("bad_payload", f"field needs {n} bytes, {len(self.buf) - self.pos} left", self.base + self.pos)
        v = self.buf[self.pos : self.pos + n]
        self.pos += n
        return v

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        at = self.base + self.pos
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError("bad_payload", "invalid UTF-8 string", at) from None

    def weights(self) -> np.ndarray:
        (n,) = self.unpack("<I")
        at = self.base + self.pos
        if n * 4 > len(self.buf) - self.pos:
            raise DecodeError("bad_payload", f"weight count {n} exceeds payload", at - 4)
        w = np.frombuffer(self.take(n * 4), dtype="<f4").astype(np.float32)
        if not np.isfinite(w).all():
            raise DecodeError("bad_payload", "non-finite weight", at + 4 * int(np.flatnonzero(~np.isfinite(w))[0]))
        return w

    def done(self):
        if self.pos != len(self.buf):
            raise DecodeError("bad_payload", "unparsed bytes at end of payload", self.base + self.pos)


def frame_length(buf) -> int | None:
    """Total frame length announced by a header prefix, or None if incomplete.

    Raises DecodeError as soon as the header prefix is known to be invalid.
    """
    n = len(buf)
    m = bytes(buf[: min(n, 4)])
    if m != MAGIC[: len(m)]:
        bad = next(i for i in range(len(m)) if m[i] != MAGIC[i])
        raise DecodeError("bad_magic", "frame does not start with FEDA", bad)
    if n >= 5 and buf[4] != VERSION:
        raise DecodeError("bad_version", f"protocol version {buf[4]}", 4)
    if n >= 6 and buf[5] not in MsgType._value2member_map_:
        raise DecodeError("bad_type", f"message type {buf[5]}", 5)
    if n < HEADER_SIZE:
        return None
    (plen,) = struct.unpack_from("<I", buf, 10)
    if plen > MAX_PAYLOAD:
        raise DecodeError("oversize", f"payload length {plen}", 10)
    return HEADER_SIZE + plen + CRC_SIZE


def decode(data) -> RoundMessage:
    """Parse exactly one frame. Every failure is a :class:`DecodeError`."""
    buf = memoryview(bytes(data))
    total = frame_length(buf)
    if total is None:
        raise DecodeError("truncated", "incomplete header", len(buf))
    if len(buf) < total:
        raise DecodeError("truncated", f"frame needs {total} bytes, got {len(buf)}", len(buf))
    if len(buf) > total:
        raise DecodeError("trailing", "bytes after the CRC", total)
    _, _, mtype, rnd, plen = HEADER.unpack_from(buf)
    payload = buf[HEADER_SIZE : HEADER_SIZE + plen]
    (crc,) = struct.unpack_from("<I", buf, HEADER_SIZE + plen)
    if zlib.crc32(payload) != crc:
        raise DecodeError("bad_crc", "payload checksum mismatch", HEADER_SIZE + plen)
    t = MsgType(mtype)
    b = _Body(payload, HEADER_SIZE)
    if t == MsgType.HELLO:
        cid = b.string()
        digest, cap = b.unpack("<QI")
        m = RoundMessage(t, rnd, client_id=cid, digest=digest, capacity=cap)
    elif t == MsgType.GLOBAL_MODEL:
        digest, version = b.unpack("<QI")
        m = RoundMessage(t, rnd, digest=digest, version=version, weights=b.weights())
    elif t == MsgType.LOCAL_UPDATE:
        cid = b.string()
        count, digest, version = b.unpack("<IQI")
        m = RoundMessage(t, rnd, client_id=cid, sample_count=count, digest=digest, version=version, weights=b.weights())
    elif plen == 0:
        m = RoundMessage(t, rnd)
    else:
        (code,) = b.unpack("<H")
        m = RoundMessage(t, rnd, code=code, text=b.string())
    b.done()
    return m


class FrameReader:
    """Reassembles frames from an arbitrary chunking of a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[RoundMessage]:
        self._buf.extend(chunk)
        out = []
        while True:
            total = frame_length(self._buf)
            if total is None or len(self._buf) < total:
                return out
            frame = bytes(self._buf[:total])
            del self._buf[:total]
            out.append(decode(frame))


# ---------------------------------------------------------------------------
# simulated network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetConditions:
    drop_prob: float = 0.0
    dup_prob: float = 0.0
    max_reorder_window: int = 0
    latency: tuple = (1.0, 1.0)  # ms, uniform
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.drop_prob <= 1.0 and 0.0 <= self.dup_prob <= 1.0):
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.max_reorder_window < 0:
            raise ConfigError("reorder window must be >= 0")
        lo, hi = self.latency
        if lo < 0 or hi < lo:
            raise ConfigError("latency range must satisfy 0 <= lo <= hi")


PERFECT = NetConditions()


@dataclass
class _Pending:
    ready_at: float
    frame: bytes
    seq: int


class SimLink:
    """One-way lossy link.

    Per :meth:`send`, random draws happen in this fixed order: drop test,
    duplicate test, then for each copy a latency and a reorder offset. A copy is
    inserted ``offset`` places before the tail of the pending queue; delivery
    pops from the head once its time is reached.
    """

    def __init__(self, conds: NetConditions, stream: tuple = ()):
        self.conds = conds
        self.rng = np.random.default_rng([int(conds.seed) & 0xFFFFFFFFFFFFFFFF, *stream])
        self.pending: list[_Pending] = []
        self._seq = 0
        self.sent = self.dropped = self.duplicated = 0

    def send(self, frame: bytes, now: float = 0.0) -> None:
        c = self.conds
        self.sent += 1
        if self.rng.random() < c.drop_prob:
            self.dropped += 1
            return
        copies = 2 if self.rng.random() < c.dup_prob else 1
        self.duplicated += copies - 1
        for _ in range(copies):
            lat = self.rng.uniform(c.latency[0], c.latency[1])
            off = int(self.rng.integers(0, c.max_reorder_window + 1))
            pos = max(0, len(self.pending) - off)
            self.pending.insert(pos, _Pending(now + lat, bytes(frame), self._seq))
            self._seq += 1

    def next_ready(self) -> float | None:
        return self.pending[0].ready_at if self.pending else None

    def recv(self, now: float = float("inf")) -> list[bytes]:
        out = []
        while self.pending and self.pending[0].ready_at <= now:
            out.append(self.pending.pop(0).frame)
        return out


class SimEndpoint:
    def __init__(self, out_link: SimLink, in_link: SimLink):
        self.out_link = out_link
        self.in_link = in_link

    def send(self, m: RoundMessage | bytes, now: float = 0.0) -> None:
        self.out_link.send(m if isinstance(m, (bytes, bytearray)) else encode(m), now)

    def recv(self, now: float = float("inf")) -> list[bytes]:
        return self.in_link.recv(now)

    def next_ready(self):
        return self.in_link.next_ready()


@dataclass
class SimChannel:
    """Bidirectional channel: ``a`` and ``b`` endpoints over two independent links."""

    conds: NetConditions
    stream: tuple = ()
    a: SimEndpoint = field(init=False)
    b: SimEndpoint = field(init=False)

    def __post_init__(self):
        ab = SimLink(self.conds, (*self.stream, 0))
        ba = SimLink(self.conds, (*self.stream, 1))
        self.a = SimEndpoint(ab, ba)
        self.b = SimEndpoint(ba, ab)


def sim_channel(conds: NetConditions, stream: tuple = ()) -> SimChannel:
    return SimChannel(conds, tuple(stream))


# ---------------------------------------------------------------------------
# TCP carrier
# ---------------------------------------------------------------------------


class TcpConnection:
    """Framed message socket; writes are serialized by a lock."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.reader = FrameReader()
        self._wlock = threading.Lock()
        self.closed = False

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> "TcpConnection":
        return cls(socket.create_connection((host, port), timeout=timeout))

    def send(self, m: RoundMessage) -> None:
        frame = encode(m)
        with self._wlock:
            self.sock.sendall(frame)

    def recv(self, timeout: float | None = None) -> list[RoundMessage]:
        """Block up to ``timeout`` seconds for at least one frame; [] on timeout.

        Raises ConnectionError when the peer closes.
        """
        self.sock.settimeout(timeout)
        try:
            chunk = self.sock.recv(1 << 16)
        except socket.timeout:
            return []
        if not chunk:
            self.closed = True
            raise ConnectionError("peer closed the connection")
        return self.reader.feed(chunk)

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.close()
        except OSError:  # pragma: no cover
            pass
