"""Length-prefixed binary frames for the sync protocol.

frame := type[u8] length[u32] payload[length]   (big-endian)
"""

from __future__ import annotations

import enum
import struct
import zlib
from collections import Counter
from dataclasses import dataclass

from ..errors import ProtocolError
from ..hashstore import ID_SIZE, COMPRESS_LEVEL, ObjectId, ObjectKind, object_id

PROTO_VERSION = 1
MAX_BATCH = 64
MAX_FRAME = 1 << 30

HEADER = struct.Struct(">BI")


class FrameType(enum.IntEnum):
    HELLO = 0x01
    HEAD = 0x02
    GETOBJ = 0x03
    OBJ = 0x04
    DONE = 0x05
    ERR = 0x7F


class ErrCode(enum.IntEnum):
    UNKNOWN_OBJECT = 1
    PROTOCOL = 2
    VERSION = 3


# -- payload codecs ------------------------------------------------------------


def encode_hello(device_id: bytes, version: int = PROTO_VERSION) -> bytes:
    return struct.pack(">HH", version, len(device_id)) + device_id


def decode_hello(payload: bytes) -> tuple[int, bytes]:
    if len(payload) < 4:
        raise ProtocolError("short HELLO")
    version, n = struct.unpack_from(">HH", payload)
    if len(payload) != 4 + n:
        raise ProtocolError("HELLO length mismatch")
    return version, payload[4:]


def decode_head(payload: bytes) -> ObjectId:
    if len(payload) != ID_SIZE:
        raise ProtocolError("HEAD payload must be 32 bytes")
    return ObjectId(payload)


def encode_getobj(ids) -> bytes:
    ids = list(ids)
    if not 0 < len(ids) <= MAX_BATCH:
        raise ProtocolError(f"GETOBJ carries 1..{MAX_BATCH} ids")
    return struct.pack(">H", len(ids)) + b"".join(ids)


def decode_getobj(payload: bytes) -> list[ObjectId]:
    if len(payload) < 2:
        raise ProtocolError("short GETOBJ")
    (n,) = struct.unpack_from(">H", payload)
    if n == 0 or n > MAX_BATCH or len(payload) != 2 + n * ID_SIZE:
        raise ProtocolError("malformed GETOBJ")
    return [ObjectId(payload[2 + i * ID_SIZE : 2 + (i + 1) * ID_SIZE]) for i in range(n)]


def encode_obj(oid: ObjectId, kind: ObjectKind, payload: bytes) -> bytes:
    data = zlib.compress(payload, COMPRESS_LEVEL)
    return oid + struct.pack(">BQQ", kind, len(payload), len(data)) + data


_OBJ_HEAD = struct.Struct(">BQQ")


def decode_obj(payload: bytes) -> tuple[ObjectId, ObjectKind, bytes]:
    """Decode and verify an OBJ frame; tampering raises ProtocolError."""
    if len(payload) < ID_SIZE + _OBJ_HEAD.size:
        raise ProtocolError("short OBJ")
    oid = ObjectId(payload[:ID_SIZE])
    kind, ulen, clen = _OBJ_HEAD.unpack_from(payload, ID_SIZE)
    body = payload[ID_SIZE + _OBJ_HEAD.size :]
    if len(body) != clen:
        raise ProtocolError(f"OBJ {oid}: compressed length mismatch")
    try:
        kind = ObjectKind(kind)
        data = zlib.decompress(body)
    except (ValueError, zlib.error) as exc:
        raise ProtocolError(f"OBJ {oid}: undecodable ({exc})") from None
    if len(data) != ulen or object_id(kind, data) != oid:
        raise ProtocolError(f"OBJ {oid}: digest mismatch, object rejected")
    return oid, kind, data


def encode_err(code: int, msg: str) -> bytes:
    raw = msg.encode("utf-8")[:0xFFFF]
    return struct.pack(">HH", code, len(raw)) + raw


def decode_err(payload: bytes) -> tuple[int, str]:
    if len(payload) < 4:
        return ErrCode.PROTOCOL, "malformed ERR"
    code, n = struct.unpack_from(">HH", payload)
    return code, payload[4 : 4 + n].decode("utf-8", "replace")


# -- connection ---------------------------------------------------------------


@dataclass
class FrameStats:
    data_bytes: int = 0
    control_bytes: int = 0
    frames_sent: Counter = None
    frames_received: Counter = None

    def __post_init__(self):
        self.frames_sent = Counter()
        self.frames_received = Counter()

    def count(self, ftype: int, size: int) -> None:
        if ftype == FrameType.OBJ:
            self.data_bytes += size
        else:
            self.control_bytes += size


class FrameConn:
    """Frame reader/writer over any object with ``sendall`` and ``recv``.

    Byte counters include the 5-byte frame header: they are the
    application-layer TCP payload of the session.
    """

    def __init__(self, sock):
        self.sock = sock
        self.stats = FrameStats()
        self._buf = bytearray()

    def send(self, ftype: FrameType, payload: bytes = b"") -> None:
        frame = HEADER.pack(ftype, len(payload)) + payload
        self.sock.sendall(frame)
        self.stats.count(ftype, len(frame))
        self.stats.frames_sent[FrameType(ftype).name] += 1

    def _read_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            chunk = self.sock.recv(max(65536, n - len(self._buf)))
            if not chunk:
                raise ConnectionError("peer closed the sync session")
            self._buf += chunk
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def recv(self) -> tuple[int, bytes]:
        ftype, length = HEADER.unpack(self._read_exact(HEADER.size))
        if length > MAX_FRAME:
            raise ProtocolError(f"frame of {length} bytes exceeds limit")
        payload = self._read_exact(length) if length else b""
        self.stats.count(ftype, HEADER.size + length)
        try:
            name = FrameType(ftype).name
        except ValueError:
            name = f"0x{ftype:02x}"
        self.stats.frames_received[name] += 1
        return ftype, payload

    def expect(self, ftype: FrameType) -> bytes:
        got, payload = self.recv()
        if got == FrameType.ERR:
            code, msg = decode_err(payload)
            raise ProtocolError(f"peer error {code}: {msg}")
        if got != ftype:
            raise ProtocolError(f"expected {ftype.name}, got frame type 0x{got:02x}")
        return payload
