"""Content-addressed object store.

Objects are named by ``sha256(kind-name SP decimal-length NUL payload)`` and
kept either as zlib-compressed loose files under ``objects/xx/yyyy...`` or
consolidated into ``packs/pack-<16hex>.epak`` files.  Every read re-hashes
the object, so on-disk damage surfaces as :class:`CorruptObjectError` rather
than as wrong data.
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
import tempfile
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .errors import CorruptObjectError, InvalidArgumentError, NotFoundError, StoreError

ID_SIZE = 32
COMPRESS_LEVEL = 6
MAX_PAYLOAD = 2**32

PACK_MAGIC = b"EPAK"
PACK_VERSION = 1
_PACK_HEADER = struct.Struct(">4sII")
_PACK_ENTRY = struct.Struct(">32sQQQ")


class ObjectId(bytes):
    """A 32-byte digest. ``str()`` renders it as 64 lowercase hex chars."""

    __slots__ = ()

    def __new__(cls, raw: bytes) -> "ObjectId":
        if len(raw) != ID_SIZE:
            raise InvalidArgumentError(f"object id must be {ID_SIZE} bytes, got {len(raw)}")
        return super().__new__(cls, raw)

    @classmethod
    def from_hex(cls, text: str) -> "ObjectId":
        text = text.strip()
        if len(text) != 2 * ID_SIZE:
            raise InvalidArgumentError(f"bad object id {text!r}")
        try:
            return cls(bytes.fromhex(text))
        except ValueError as exc:
            raise InvalidArgumentError(f"bad object id {text!r}") from exc

    def __str__(self) -> str:
        return self.hex()

    def __repr__(self) -> str:
        return f"ObjectId({self.hex()[:12]})"

    def short(self) -> str:
        return self.hex()[:12]


class ObjectKind(enum.IntEnum):
    BLOB = 0x01
    TREE = 0x02
    COMMIT = 0x03

    @property
    def label(self) -> bytes:
        return self.name.lower().encode()

    @classmethod
    def from_label(cls, label: bytes) -> "ObjectKind":
        try:
            return cls[label.decode("ascii").upper()]
        except (KeyError, UnicodeDecodeError) as exc:
            raise ValueError(f"unknown object kind {label!r}") from exc


def object_header(kind: ObjectKind, length: int) -> bytes:
    return kind.label + b" " + str(length).encode() + b"\0"


def object_id(kind: ObjectKind, payload: bytes) -> ObjectId:
    """Digest an object without storing it."""
    h = hashlib.sha256(object_header(kind, len(payload)))
    h.update(payload)
    return ObjectId(h.digest())


def encode_object(kind: ObjectKind, payload: bytes) -> bytes:
    """Compressed on-disk form shared by loose files and pack entries."""
    return zlib.compress(object_header(kind, len(payload)) + payload, COMPRESS_LEVEL)


def decode_object(oid: ObjectId, data: bytes) -> tuple[ObjectKind, bytes]:
    """Inverse of :func:`encode_object`, verifying the digest against ``oid``."""
    try:
        raw = zlib.decompress(data)
    except zlib.error as exc:
        raise CorruptObjectError(oid, f"undecodable ({exc})") from exc
    nul = raw.find(b"\0")
    if nul < 0:
        raise CorruptObjectError(oid, "missing header")
    try:
        label, length = raw[:nul].split(b" ")
        kind = ObjectKind.from_label(label)
        size = int(length)
    except ValueError as exc:
        raise CorruptObjectError(oid, "malformed header") from exc
    payload = raw[nul + 1 :]
    if len(payload) != size or object_id(kind, payload) != oid:
        raise CorruptObjectError(oid)
    return kind, payload


@dataclass(frozen=True)
class PackEntry:
    id: ObjectId
    offset: int
    compressed_len: int
    uncompressed_len: int


@dataclass
class PackFile:
    path: Path
    index: list[PackEntry]

    @property
    def count(self) -> int:
        return len(self.index)


def read_pack_index(path: Path) -> PackFile:
    with open(path, "rb") as fh:
        header = fh.read(_PACK_HEADER.size)
        if len(header) != _PACK_HEADER.size:
            raise StoreError(f"{path}: truncated pack header")
        magic, version, count = _PACK_HEADER.unpack(header)
        if magic != PACK_MAGIC or version != PACK_VERSION:
            raise StoreError(f"{path}: not a version-{PACK_VERSION} pack")
        blob = fh.read(count * _PACK_ENTRY.size)
        if len(blob) != count * _PACK_ENTRY.size:
            raise StoreError(f"{path}: truncated pack index")
        size = os.fstat(fh.fileno()).st_size
    index = []
    for raw_id, offset, clen, ulen in _PACK_ENTRY.iter_unpack(blob):
        if offset + clen > size:
            raise StoreError(f"{path}: entry {raw_id.hex()} points past end of file")
        index.append(PackEntry(ObjectId(raw_id), offset, clen, ulen))
    return PackFile(path, index)


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


class HashStore:
    """Object store rooted at a directory.

    Readers may run concurrently; writes are serialized internally, but
    callers that need multi-object atomicity (the archive) hold their own
    writer lock.
    """

    def __init__(self, root: str | os.PathLike, *, durable: bool = True):
        self.root = Path(root)
        self.objects_dir = self.root / "objects"
        self.packs_dir = self.root / "packs"
        self.durable = durable
        self._lock = threading.Lock()
        self._packed: dict[ObjectId, tuple[Path, PackEntry]] = {}
        self.objects_dir.mkdir(parents=True, exist_ok=True)
        self.packs_dir.mkdir(parents=True, exist_ok=True)
        for path in sorted(self.packs_dir.glob("pack-*.epak")):
            self._register_pack(read_pack_index(path))

    def _register_pack(self, pack: PackFile) -> None:
        for entry in pack.index:
            self._packed.setdefault(entry.id, (pack.path, entry))

    def loose_path(self, oid: ObjectId) -> Path:
        h = oid.hex()
        return self.objects_dir / h[:2] / h[2:]

    # -- writes --------------------------------------------------------

    def _write_atomic(self, target: Path, data: bytes) -> None:
        target.parent.mkdir(exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                if self.durable:
                    os.fdatasync(fh.fileno())
            os.replace(tmp, target)
            if self.durable:
                _fsync_dir(target.parent)
        except OSError as exc:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise StoreError(f"cannot write {target}: {exc}") from exc

    def put(self, kind: ObjectKind, payload: bytes) -> ObjectId:
        kind = ObjectKind(kind)
        if len(payload) >= MAX_PAYLOAD:
            raise InvalidArgumentError("payload must be shorter than 2**32 bytes")
        oid = object_id(kind, payload)
        if self.contains(oid):
            return oid
        data = encode_object(kind, payload)
        with self._lock:
            if not self.loose_path(oid).exists():
                self._write_atomic(self.loose_path(oid), data)
        return oid

    # -- reads ---------------------------------------------------------

    def contains(self, oid: ObjectId) -> bool:
        return oid in self._packed or self.loose_path(oid).is_file()

    __contains__ = contains

    def read_raw(self, oid: ObjectId) -> bytes:
        """Compressed stored form of ``oid`` (not verified)."""
        loc = self._packed.get(oid)
        if loc is not None:
            path, entry = loc
            with open(path, "rb") as fh:
                fh.seek(entry.offset)
                return fh.read(entry.compressed_len)
        try:
            return self.loose_path(oid).read_bytes()
        except FileNotFoundError:
            raise NotFoundError(f"object {oid} not found") from None

    def get(self, oid: ObjectId) -> tuple[ObjectKind, bytes]:
        return decode_object(oid, self.read_raw(oid))

    def get_kind(self, oid: ObjectId, expected: ObjectKind) -> bytes:
        kind, payload = self.get(oid)
        if kind != expected:
            raise CorruptObjectError(oid, f"expected {expected.name.lower()}, found {kind.name.lower()}")
        return payload

    def iter_loose(self) -> Iterator[ObjectId]:
        for sub in sorted(self.objects_dir.iterdir()):
            if not sub.is_dir() or len(sub.name) != 2:
                continue
            for f in sorted(sub.iterdir()):
                if len(f.name) == 2 * ID_SIZE - 2 and not f.name.startswith("."):
                    yield ObjectId.from_hex(sub.name + f.name)

    def iter_ids(self) -> Iterator[ObjectId]:
        seen = set(self._packed)
        yield from sorted(seen)
        for oid in self.iter_loose():
            if oid not in seen:
                yield oid

    def count(self) -> int:
        return sum(1 for _ in self.iter_ids())

    def disk_usage(self, allocated: bool = False) -> int:
        return directory_size(self.root, allocated)

    # -- packing -------------------------------------------------------

    def pack(self, ids: Iterable[ObjectId]) -> PackFile:
        """Consolidate loose objects into one pack file, then drop the loose copies."""
        with self._lock:
            unique = sorted(set(ids))
            blobs = []
            for oid in unique:
                path = self.loose_path(oid)
                try:
                    data = path.read_bytes()
                except FileNotFoundError:
                    raise NotFoundError(f"object {oid} is not a loose object") from None
                decode_object(oid, data)
                blobs.append(data)

            offset = _PACK_HEADER.size + _PACK_ENTRY.size * len(unique)
            index = []
            for oid, data in zip(unique, blobs):
                ulen = len(zlib.decompress(data))
                index.append(PackEntry(oid, offset, len(data), ulen))
                offset += len(data)
            parts = [_PACK_HEADER.pack(PACK_MAGIC, PACK_VERSION, len(unique))]
            parts += [_PACK_ENTRY.pack(e.id, e.offset, e.compressed_len, e.uncompressed_len) for e in index]
            parts += blobs

            name = hashlib.sha256(b"".join(unique)).hexdigest()[:16]
            path = self.packs_dir / f"pack-{name}.epak"
            self._write_atomic(path, b"".join(parts))
            pack = PackFile(path, index)
            self._register_pack(pack)

            for oid in unique:
                try:
                    os.unlink(self.loose_path(oid))
                except FileNotFoundError:
                    pass
            return pack

    def pack_loose(self) -> PackFile:
        return self.pack(list(self.iter_loose()))


def directory_size(root: str | os.PathLike, allocated: bool = False) -> int:
    """Bytes used by every regular file under ``root``.

    Apparent sizes by default; ``allocated`` counts filesystem blocks
    instead, which is what per-file overhead really costs.
    """
    total = 0
    for dirpath, _dirnames, filenames in os.walk(root):
        for name in filenames:
            try:
                st = os.lstat(os.path.join(dirpath, name))
            except FileNotFoundError:
                continue
            total += st.st_blocks * 512 if allocated else st.st_size
    return total
