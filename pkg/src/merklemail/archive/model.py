"""Canonical binary forms of the archive's Merkle objects.

All integers are big-endian.  These byte layouts are digest inputs, so any
change to them changes every object id.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

from ..errors import CorruptObjectError, InvalidArgumentError
from ..hashstore import ID_SIZE, ObjectId, ObjectKind, object_id

SYSTEM_FLAGS = {
    "\\Seen": 0x01,
    "\\Answered": 0x02,
    "\\Flagged": 0x04,
    "\\Deleted": 0x08,
    "\\Draft": 0x10,
}
_SYSTEM_BY_LOWER = {name.lower(): name for name in SYSTEM_FLAGS}

META_NAME = b"meta"
UID_WIDTH = 10
SHARD_BITS = 5  # fanout of each shard level
MAX_DEVICE_ID = 64


class EntryKind(enum.IntEnum):
    RECORD = 0x01
    SUBTREE = 0x02
    META = 0x03


class _Reader:
    def __init__(self, oid, data: bytes):
        self.oid = oid
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptObjectError(self.oid, "truncated payload")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(">" + fmt)
        return s.unpack(self.take(s.size))

    def u8(self) -> int:
        return self.unpack("B")[0]

    def u16(self) -> int:
        return self.unpack("H")[0]

    def u32(self) -> int:
        return self.unpack("I")[0]

    def u64(self) -> int:
        return self.unpack("Q")[0]

    def oid_(self) -> ObjectId:
        return ObjectId(self.take(ID_SIZE))

    def done(self) -> None:
        if self.pos != len(self.data):
            raise CorruptObjectError(self.oid, "trailing bytes")


# -- flags ----------------------------------------------------------------


def normalize_flags(flags: Iterable[str]) -> frozenset[str]:
    """Canonical spelling for system flags; keywords kept verbatim."""
    out = set()
    for flag in flags:
        if isinstance(flag, bytes):
            flag = flag.decode("ascii")
        if flag.startswith("\\"):
            canon = _SYSTEM_BY_LOWER.get(flag.lower())
            if canon is None:
                if flag.lower() == "\\recent":
                    continue
                raise InvalidArgumentError(f"unknown system flag {flag}")
            out.add(canon)
        else:
            if not flag or any(c in flag for c in ' (){%*"\\]') or not flag.isascii():
                raise InvalidArgumentError(f"invalid keyword {flag!r}")
            out.add(flag)
    return frozenset(out)


def flag_bits(flags: Iterable[str]) -> int:
    return sum(SYSTEM_FLAGS[f] for f in flags if f in SYSTEM_FLAGS)


def keywords_of(flags: Iterable[str]) -> list[str]:
    return sorted(f for f in flags if not f.startswith("\\"))


def flags_from_bits(bits: int, keywords: Iterable[str] = ()) -> frozenset[str]:
    return frozenset([name for name, bit in SYSTEM_FLAGS.items() if bits & bit] + list(keywords))


def sort_flags(flags: Iterable[str]) -> list[str]:
    order = list(SYSTEM_FLAGS)
    return sorted(flags, key=lambda f: (0, order.index(f)) if f in SYSTEM_FLAGS else (1, f))


# -- trees ----------------------------------------------------------------


@dataclass(frozen=True)
class TreeEntry:
    name: bytes
    kind: EntryKind
    id: ObjectId


def encode_tree(entries: Iterable[TreeEntry]) -> bytes:
    entries = sorted(entries, key=lambda e: e.name)
    out = []
    prev = None
    for e in entries:
        if e.name == prev:
            raise InvalidArgumentError(f"duplicate tree entry {e.name!r}")
        if not e.name or len(e.name) > 0xFFFF:
            raise InvalidArgumentError("tree entry name must be 1..65535 bytes")
        out.append(struct.pack(">BH", e.kind, len(e.name)) + e.name + e.id)
        prev = e.name
    return b"".join(out)


def decode_tree(oid, payload: bytes) -> tuple[TreeEntry, ...]:
    r = _Reader(oid, payload)
    entries = []
    prev = None
    while r.pos < len(payload):
        kind, nlen = r.unpack("BH")
        name = r.take(nlen)
        try:
            kind = EntryKind(kind)
        except ValueError:
            raise CorruptObjectError(oid, f"unknown entry kind {kind}") from None
        if prev is not None and name <= prev:
            raise CorruptObjectError(oid, "tree entries not strictly sorted")
        entries.append(TreeEntry(name, kind, r.oid_()))
        prev = name
    return tuple(entries)


EMPTY_TREE_ID = object_id(ObjectKind.TREE, b"")


def uid_name(uid: int) -> bytes:
    return b"%0*d" % (UID_WIDTH, uid)


def uid_path(uid: int) -> tuple[bytes, bytes, bytes]:
    """Path of a message record below its mailbox tree.

    Two fixed shard levels keep every tree small, so a single append
    rewrites O(fanout) entries instead of the whole mailbox listing.
    """
    mask = (1 << SHARD_BITS) - 1
    return (
        b"%07d" % (uid >> (2 * SHARD_BITS)),
        b"%02d" % ((uid >> SHARD_BITS) & mask),
        uid_name(uid),
    )


# -- message records ----------------------------------------------------------


@dataclass(frozen=True)
class SegmentRef:
    blob_id: ObjectId
    offset: int
    length: int


@dataclass(frozen=True)
class MessageRecord:
    uid: int
    internal_date: int
    flags: frozenset[str]
    segments: tuple[SegmentRef, ...]
    total_length: int
    part_digests: tuple[tuple[int, ObjectId], ...] = ()

    def __post_init__(self):
        if not 0 < self.uid < 2**32:
            raise InvalidArgumentError(f"uid out of range: {self.uid}")
        if sum(s.length for s in self.segments) != self.total_length:
            raise InvalidArgumentError("segment lengths do not add up to total length")

    def encode(self) -> bytes:
        kws = [k.encode("ascii") for k in keywords_of(self.flags)]
        out = [struct.pack(">IQBH", self.uid, self.internal_date, flag_bits(self.flags), len(kws))]
        out += [struct.pack(">H", len(k)) + k for k in kws]
        out.append(struct.pack(">QH", self.total_length, len(self.segments)))
        out += [s.blob_id + struct.pack(">QQ", s.offset, s.length) for s in self.segments]
        out.append(struct.pack(">H", len(self.part_digests)))
        out += [struct.pack(">H", idx) + pid for idx, pid in self.part_digests]
        return b"".join(out)

    @classmethod
    def decode(cls, oid, payload: bytes) -> "MessageRecord":
        r = _Reader(oid, payload)
        uid, date, bits, nkw = r.unpack("IQBH")
        kws = [r.take(r.u16()).decode("ascii", "replace") for _ in range(nkw)]
        total, nseg = r.unpack("QH")
        segs = []
        for _ in range(nseg):
            bid = r.oid_()
            off, length = r.unpack("QQ")
            segs.append(SegmentRef(bid, off, length))
        parts = []
        for _ in range(r.u16()):
            idx = r.u16()
            parts.append((idx, r.oid_()))
        r.done()
        try:
            return cls(uid, date, flags_from_bits(bits, kws), tuple(segs), total, tuple(parts))
        except InvalidArgumentError as exc:
            raise CorruptObjectError(oid, str(exc)) from None

    def with_flags(self, flags) -> "MessageRecord":
        return MessageRecord(self.uid, self.internal_date, frozenset(flags), self.segments,
                             self.total_length, self.part_digests)

    def with_uid(self, uid: int) -> "MessageRecord":
        return MessageRecord(uid, self.internal_date, self.flags, self.segments,
                             self.total_length, self.part_digests)

    def same_content(self, other: "MessageRecord") -> bool:
        return self.segments == other.segments and self.total_length == other.total_length

    @property
    def blob_ids(self) -> set[ObjectId]:
        return {s.blob_id for s in self.segments}


@dataclass(frozen=True)
class MailboxMeta:
    uid_next: int
    uid_validity: int

    def encode(self) -> bytes:
        return struct.pack(">II", self.uid_next, self.uid_validity)

    @classmethod
    def decode(cls, oid, payload: bytes) -> "MailboxMeta":
        r = _Reader(oid, payload)
        meta = cls(*r.unpack("II"))
        r.done()
        return meta


# -- commits ----------------------------------------------------------------


@dataclass(frozen=True)
class Commit:
    parents: tuple[ObjectId, ...]
    root_tree: ObjectId
    device_id: bytes = b""
    timestamp: int = 0
    op_tag: bytes = b""
    _encoded: bytes = field(default=b"", repr=False, compare=False)

    def __post_init__(self):
        if len(self.parents) > 2:
            raise InvalidArgumentError("a commit has at most two parents")
        if list(self.parents) != sorted(set(self.parents)):
            object.__setattr__(self, "parents", tuple(sorted(set(self.parents))))
        if len(self.device_id) > MAX_DEVICE_ID:
            raise InvalidArgumentError("device id longer than 64 bytes")

    def encode(self) -> bytes:
        if self._encoded:
            return self._encoded
        return (
            struct.pack(">B", len(self.parents))
            + b"".join(self.parents)
            + self.root_tree
            + struct.pack(">H", len(self.device_id))
            + self.device_id
            + struct.pack(">QH", self.timestamp, len(self.op_tag))
            + self.op_tag
        )

    @cached_property
    def id(self) -> ObjectId:
        return object_id(ObjectKind.COMMIT, self.encode())

    @classmethod
    def decode(cls, oid, payload: bytes) -> "Commit":
        r = _Reader(oid, payload)
        parents = tuple(r.oid_() for _ in range(r.u8()))
        root = r.oid_()
        device = r.take(r.u16())
        ts = r.u64()
        tag = r.take(r.u16())
        r.done()
        if list(parents) != sorted(set(parents)):
            raise CorruptObjectError(oid, "parents not sorted")
        return cls(parents, root, device, ts, tag, payload)
