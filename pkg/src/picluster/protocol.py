"""Binary wire protocol between the master and worker daemons.

Every message travels in one self-delimiting frame::

    offset  size  field
    0       4     magic, ASCII "PCB1"
    4       1     version (1)
    5       1     message type
    6       4     payload length, unsigned big-endian
    10      n     payload

All integers are big-endian; floats are IEEE-754 binary64, big-endian.
See docs/protocol.md for the payload layout of each message type.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, Union

import numpy as np

MAGIC = b"PCB1"
VERSION = 1
HEADER = struct.Struct(">4sBBI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 2**31

_F64 = np.dtype(">f8")
_U32_MAX = 2**32 - 1
_U64_MAX = 2**64 - 1


class MsgType(IntEnum):
    PING = 0x01
    PONG = 0x02
    WARMUP = 0x03
    WARMUP_DONE = 0x04
    MATVEC_REQUEST = 0x10
    MATVEC_RESPONSE = 0x11
    PI_REQUEST = 0x20
    PI_RESPONSE = 0x21
    ERROR_REPLY = 0x7F


class ErrorCode(IntEnum):
    INVALID_ARGUMENT = 1
    UNSUPPORTED = 2
    INTERNAL = 3


class ProtocolError(Exception):
    """Malformed or unexpected bytes on the wire. The connection should be closed."""


class BadMagic(ProtocolError):
    pass


class UnsupportedVersion(ProtocolError):
    pass


class UnknownMessageType(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class PayloadTooLarge(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class EncodeError(ValueError):
    pass


def _f64_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.flags.writeable = False
    return arr


def _same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class Ping:
    pass


@dataclass(frozen=True)
class Pong:
    pass


@dataclass(frozen=True)
class Warmup:
    pass


@dataclass(frozen=True)
class WarmupDone:
    pass


@dataclass(frozen=True, eq=False)
class MatvecRequest:
    start_row: int
    rows: int
    cols: int
    row_data: np.ndarray
    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "row_data", _f64_array(self.row_data))
        object.__setattr__(self, "vector", _f64_array(self.vector))

    def block(self) -> np.ndarray:
        return self.row_data.reshape(self.rows, self.cols)

    def __eq__(self, other):
        if not isinstance(other, MatvecRequest):
            return NotImplemented
        return (
            (self.start_row, self.rows, self.cols) == (other.start_row, other.rows, other.cols)
            and _same_bits(self.row_data, other.row_data)
            and _same_bits(self.vector, other.vector)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class MatvecResponse:
    start_row: int
    rows: int
    result: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "result", _f64_array(self.result))

    def __eq__(self, other):
        if not isinstance(other, MatvecResponse):
            return NotImplemented
        return (self.start_row, self.rows) == (other.start_row, other.rows) and _same_bits(
            self.result, other.result
        )

    __hash__ = None


@dataclass(frozen=True)
class PiRequest:
    samples: int
    threads: int
    base_seed: int
    stream_base: int


@dataclass(frozen=True, eq=False)
class PiResponse:
    estimate: float
    samples: int

    def __eq__(self, other):
        if not isinstance(other, PiResponse):
            return NotImplemented
        # bit pattern comparison so NaN payloads round-trip as equal
        return self.samples == other.samples and struct.pack(">d", self.estimate) == struct.pack(
            ">d", other.estimate
        )

    __hash__ = None


@dataclass(frozen=True)
class ErrorReply:
    code: int
    message: str


Message = Union[
    Ping, Pong, Warmup, WarmupDone, MatvecRequest, MatvecResponse, PiRequest, PiResponse, ErrorReply
]

_EMPTY = {Ping: MsgType.PING, Pong: MsgType.PONG, Warmup: MsgType.WARMUP, WarmupDone: MsgType.WARMUP_DONE}
_EMPTY_BY_TYPE = {v: k for k, v in _EMPTY.items()}

_MATVEC_REQ_HEAD = struct.Struct(">III")
_MATVEC_RESP_HEAD = struct.Struct(">II")
_PI_REQ = struct.Struct(">QIQQ")
_PI_RESP = struct.Struct(">dQ")
_ERR_HEAD = struct.Struct(">H")


def _check_uint(name: str, value: int, limit: int):
    if not isinstance(value, (int, np.integer)) or not 0 <= value <= limit:
        raise EncodeError(f"{name}={value!r} does not fit the wire field")


def _payload(msg: Message) -> tuple[MsgType, bytes]:
    kind = type(msg)
    if kind in _EMPTY:
        return _EMPTY[kind], b""
    if kind is MatvecRequest:
        for name in ("start_row", "rows", "cols"):
            _check_uint(name, getattr(msg, name), _U32_MAX)
        if msg.row_data.size != msg.rows * msg.cols:
            raise EncodeError(f"row_data has {msg.row_data.size} values, expected {msg.rows * msg.cols}")
        if msg.vector.size != msg.cols:
            raise EncodeError(f"vector has {msg.vector.size} values, expected {msg.cols}")
        if 8 * (msg.row_data.size + msg.vector.size) + 12 > MAX_PAYLOAD:
            raise EncodeError("matvec request exceeds the maximum payload size")
        return MsgType.MATVEC_REQUEST, b"".join(
            (
                _MATVEC_REQ_HEAD.pack(msg.start_row, msg.rows, msg.cols),
                msg.row_data.astype(_F64).tobytes(),
                msg.vector.astype(_F64).tobytes(),
            )
        )
    if kind is MatvecResponse:
        _check_uint("start_row", msg.start_row, _U32_MAX)
        _check_uint("rows", msg.rows, _U32_MAX)
        if msg.result.size != msg.rows:
            raise EncodeError(f"result has {msg.result.size} values, expected {msg.rows}")
        if 8 * msg.rows + 8 > MAX_PAYLOAD:
            raise EncodeError("matvec response exceeds the maximum payload size")
        return MsgType.MATVEC_RESPONSE, _MATVEC_RESP_HEAD.pack(
            msg.start_row, msg.rows
        ) + msg.result.astype(_F64).tobytes()
    if kind is PiRequest:
        _check_uint("samples", msg.samples, _U64_MAX)
        _check_uint("threads", msg.threads, _U32_MAX)
        _check_uint("base_seed", msg.base_seed, _U64_MAX)
        _check_uint("stream_base", msg.stream_base, _U64_MAX)
        return MsgType.PI_REQUEST, _PI_REQ.pack(msg.samples, msg.threads, msg.base_seed, msg.stream_base)
    if kind is PiResponse:
        _check_uint("samples", msg.samples, _U64_MAX)
        return MsgType.PI_RESPONSE, _PI_RESP.pack(float(msg.estimate), msg.samples)
    if kind is ErrorReply:
        _check_uint("code", msg.code, 0xFFFF)
        text = msg.message.encode("utf-8")
        if len(text) + 2 > MAX_PAYLOAD:
            raise EncodeError("error message too long")
        return MsgType.ERROR_REPLY, _ERR_HEAD.pack(msg.code) + text
    raise EncodeError(f"cannot encode {kind.__name__}")


def encode(msg: Message) -> bytes:
    msg_type, payload = _payload(msg)
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def parse_header(header: bytes, max_payload: int = MAX_PAYLOAD) -> tuple[MsgType, int]:
    """Validate a 10-byte frame header; returns ``(msg_type, payload_len)``."""
    if len(header) < HEADER_SIZE:
        raise Truncated(f"frame header needs {HEADER_SIZE} bytes, got {len(header)}")
    magic, version, raw_type, length = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported protocol version {version}")
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise UnknownMessageType(f"unknown message type 0x{raw_type:02x}") from None
    if length > max_payload:
        raise PayloadTooLarge(f"payload of {length} bytes exceeds limit {max_payload}")
    return msg_type, length


def _f64_from(payload: bytes, offset: int, count: int) -> np.ndarray:
    return np.frombuffer(payload, dtype=_F64, count=count, offset=offset).astype(np.float64)


def decode_payload(msg_type: MsgType, payload: bytes) -> Message:
    n = len(payload)
    if msg_type in _EMPTY_BY_TYPE:
        if n:
            raise LengthMismatch(f"{msg_type.name} carries no payload, got {n} bytes")
        return _EMPTY_BY_TYPE[msg_type]()
    if msg_type is MsgType.MATVEC_REQUEST:
        if n < _MATVEC_REQ_HEAD.size:
            raise LengthMismatch(f"matvec request payload too short ({n} bytes)")
        start, rows, cols = _MATVEC_REQ_HEAD.unpack_from(payload)
        expected = _MATVEC_REQ_HEAD.size + 8 * (rows * cols + cols)
        if n != expected:
            raise LengthMismatch(f"matvec request {rows}x{cols} needs {expected} bytes, got {n}")
        body = _MATVEC_REQ_HEAD.size
        return MatvecRequest(
            start,
            rows,
            cols,
            _f64_from(payload, body, rows * cols),
            _f64_from(payload, body + 8 * rows * cols, cols),
        )
    if msg_type is MsgType.MATVEC_RESPONSE:
        if n < _MATVEC_RESP_HEAD.size:
            raise LengthMismatch(f"matvec response payload too short ({n} bytes)")
        start, rows = _MATVEC_RESP_HEAD.unpack_from(payload)
        expected = _MATVEC_RESP_HEAD.size + 8 * rows
        if n != expected:
            raise LengthMismatch(f"matvec response with {rows} rows needs {expected} bytes, got {n}")
        return MatvecResponse(start, rows, _f64_from(payload, _MATVEC_RESP_HEAD.size, rows))
    if msg_type is MsgType.PI_REQUEST:
        if n != _PI_REQ.size:
            raise LengthMismatch(f"pi request needs {_PI_REQ.size} bytes, got {n}")
        return PiRequest(*_PI_REQ.unpack(payload))
    if msg_type is MsgType.PI_RESPONSE:
        if n != _PI_RESP.size:
            raise LengthMismatch(f"pi response needs {_PI_RESP.size} bytes, got {n}")
        return PiResponse(*_PI_RESP.unpack(payload))
    if msg_type is MsgType.ERROR_REPLY:
        if n < _ERR_HEAD.size:
            raise LengthMismatch(f"error reply payload too short ({n} bytes)")
        (code,) = _ERR_HEAD.unpack_from(payload)
        try:
            text = bytes(payload[_ERR_HEAD.size :]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayload(f"error reply text is not UTF-8: {exc}") from None
        return ErrorReply(code, text)
    raise UnknownMessageType(f"unknown message type {msg_type!r}")


def decode_frame(data: bytes, offset: int = 0, max_payload: int = MAX_PAYLOAD) -> tuple[Message, int]:
    """Decode the frame starting at ``offset``; returns the message and the end offset."""
    view = memoryview(data)[offset:]
    msg_type, length = parse_header(bytes(view[:HEADER_SIZE]), max_payload)
    available = len(view) - HEADER_SIZE
    if available < length:
        raise Truncated(f"payload declares {length} bytes, only {available} present")
    payload = bytes(view[HEADER_SIZE : HEADER_SIZE + length])
    return decode_payload(msg_type, payload), offset + HEADER_SIZE + length


def decode(data: bytes, max_payload: int = MAX_PAYLOAD) -> Message:
    """Decode the single frame at the start of ``data``.

    Bytes after the first frame are ignored; use :func:`iter_frames` for a stream.
    """
    return decode_frame(data, 0, max_payload)[0]


def iter_frames(data: bytes, max_payload: int = MAX_PAYLOAD) -> Iterator[Message]:
    offset = 0
    while offset < len(data):
        msg, offset = decode_frame(data, offset, max_payload)
        yield msg


# -- socket helpers ---------------------------------------------------------

_RECV_CHUNK = 1 << 20


def _recv_exact(sock: socket.socket, n: int, allow_eof: bool = False) -> bytes | None:
    # grows with received data, so a lying length header cannot force a big allocation
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), _RECV_CHUNK))
        if not chunk:
            if allow_eof and not buf:
                return None
            raise Truncated(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def send_message(sock: socket.socket, msg: Message) -> int:
    frame = encode(msg)
    sock.sendall(frame)
    return len(frame)


def recv_message(sock: socket.socket, max_payload: int = MAX_PAYLOAD) -> Message | None:
    """Read one frame. Returns None on a clean close between frames."""
    header = _recv_exact(sock, HEADER_SIZE, allow_eof=True)
    if header is None:
        return None
    msg_type, length = parse_header(header, max_payload)
    payload = _recv_exact(sock, length) if length else b""
    return decode_payload(msg_type, payload)


# -- logical payload accounting ---------------------------------------------

MODEL_PI_REQUEST_BITS = 2 * 32
MODEL_PI_RESPONSE_BITS = 64
F64_BITS = 64


def payload_bits(kind: str, **params: int) -> int:
    """Application payload size in bits, framing excluded.

    ``model-*`` kinds use the cost-model accounting: a pi request is two 32-bit
    integers and a reply one double, per worker; the mat-vec task counts the
    whole matrix going out and an equally sized result coming back. The other
    kinds measure this package's live messages.

    ===================== =========================
    kind                  params
    ===================== =========================
    model-pi-request      workers
    model-pi-response     workers
    model-pi-round-trip   workers
    model-matvec-task     rows, cols
    pi-request            (none)
    pi-response           (none)
    matvec-request        rows, cols
    matvec-response       rows
    ===================== =========================
    """

    def need(*names):
        missing = [p for p in names if p not in params]
        if missing:
            raise ValueError(f"{kind} needs parameter(s): {', '.join(missing)}")
        values = [int(params[p]) for p in names]
        if any(v < 0 for v in values):
            raise ValueError(f"{kind} parameters must be non-negative")
        return values

    if kind == "model-pi-request":
        (workers,) = need("workers")
        return workers * MODEL_PI_REQUEST_BITS
    if kind == "model-pi-response":
        (workers,) = need("workers")
        return workers * MODEL_PI_RESPONSE_BITS
    if kind == "model-pi-round-trip":
        (workers,) = need("workers")
        return workers * (MODEL_PI_REQUEST_BITS + MODEL_PI_RESPONSE_BITS)
    if kind == "model-matvec-task":
        rows, cols = need("rows", "cols")
        return 2 * rows * cols * F64_BITS
    if kind == "pi-request":
        return 8 * _PI_REQ.size
    if kind == "pi-response":
        return 8 * _PI_RESP.size
    if kind == "matvec-request":
        rows, cols = need("rows", "cols")
        return 8 * _MATVEC_REQ_HEAD.size + F64_BITS * (rows * cols + cols)
    if kind == "matvec-response":
        (rows,) = need("rows")
        return 8 * _MATVEC_RESP_HEAD.size + F64_BITS * rows
    raise ValueError(f"unknown payload kind {kind!r}")
