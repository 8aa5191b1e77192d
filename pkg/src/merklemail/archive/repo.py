"""The versioned mail archive."""

from __future__ import annotations

import hashlib
import heapq
import os
import struct
import tempfile
import threading
import time
from collections import OrderedDict, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

from .. import mimedup
from ..errors import (
    CorruptObjectError,
    InvalidArgumentError,
    NotFoundError,
    RecoveryError,
    StoreError,
)
from ..hashstore import HashStore, ObjectId, ObjectKind, PackFile, object_id
from .model import (
    EMPTY_TREE_ID,
    META_NAME,
    Commit,
    EntryKind,
    MailboxMeta,
    MessageRecord,
    SegmentRef,
    TreeEntry,
    decode_tree,
    encode_tree,
    normalize_flags,
    uid_path,
)

HEAD_FILE = "HEAD"


@dataclass(frozen=True)
class MailboxState:
    meta: MailboxMeta
    messages: Mapping[int, MessageRecord]

    @property
    def uids(self) -> list[int]:
        return sorted(self.messages)


@dataclass(frozen=True)
class Snapshot:
    commit_id: ObjectId
    mailboxes: Mapping[str, MailboxState]


class _LRU(OrderedDict):
    def __init__(self, size: int):
        super().__init__()
        self.size = size

    def put(self, key, value):
        self[key] = value
        self.move_to_end(key)
        if len(self) > self.size:
            self.popitem(last=False)


def validate_mailbox(name: str) -> str:
    if isinstance(name, bytes):
        name = name.decode("utf-8")
    if not name or len(name.encode("utf-8")) > 1024:
        raise InvalidArgumentError("mailbox name must be 1..1024 bytes")
    if any(ord(c) < 0x20 or ord(c) == 0x7F for c in name):
        raise InvalidArgumentError(f"mailbox name {name!r} contains control characters")
    if name.upper() == "INBOX":
        return "INBOX"
    return name


def genesis_commit() -> Commit:
    return Commit((), EMPTY_TREE_ID, b"", 0, b"genesis")


def _reachable(parents_of: Callable, start) -> set:
    seen = {start}
    stack = [start]
    while stack:
        for p in parents_of(stack.pop()):
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def merge_base(parents_of: Callable, a, b):
    """Lowest common ancestor of ``a`` and ``b`` in a DAG given by ``parents_of``.

    Among several lowest common ancestors the smallest id wins; ``None``
    means the two nodes share no root.
    """
    common = _reachable(parents_of, a) & _reachable(parents_of, b)
    if not common:
        return None
    # drop every common ancestor that is a proper ancestor of another one
    dominated = set()
    stack = [p for c in common for p in parents_of(c)]
    while stack:
        oid = stack.pop()
        if oid not in dominated:
            dominated.add(oid)
            stack.extend(parents_of(oid))
    return min(common - dominated)


class Archive:
    """A revision-controlled mail archive on top of a :class:`HashStore`.

    Mutations are serialized by an internal writer lock; reads work on
    immutable objects and may run from any thread.
    """

    def __init__(
        self,
        root: str | os.PathLike,
        device_id: bytes | str = b"",
        *,
        clock: Callable[[], float] | None = None,
        durable: bool = True,
        min_part_size: int = mimedup.DEFAULT_MIN_PART_SIZE,
    ):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        if isinstance(device_id, str):
            device_id = device_id.encode()
        if len(device_id) > 64:
            raise InvalidArgumentError("device id longer than 64 bytes")
        self.device_id = device_id
        self.clock = clock or time.time
        self.min_part_size = min_part_size
        self.store = HashStore(self.root, durable=durable)
        self.durable = durable
        self.lock = threading.RLock()
        self._commits: dict[ObjectId, Commit] = {}
        self._trees: _LRU = _LRU(8192)
        self._records: _LRU = _LRU(65536)
        self._head = self._load_head()

    # -- head ------------------------------------------------------------

    @property
    def head_path(self) -> Path:
        return self.root / HEAD_FILE

    def _load_head(self) -> ObjectId:
        path = self.head_path
        if not path.exists():
            genesis = genesis_commit()
            self.store.put(ObjectKind.TREE, b"")
            self._put_commit(genesis)
            self._write_head(genesis.id)
            return genesis.id
        text = path.read_text("ascii", errors="replace")
        try:
            if not text.endswith("\n") or len(text) != 65:
                raise InvalidArgumentError("wrong length")
            head = ObjectId.from_hex(text)
        except InvalidArgumentError as exc:
            raise RecoveryError(f"{path}: corrupt head file ({exc})") from None
        if not self.store.contains(head):
            raise RecoveryError(f"{path}: head {head} is not in the object store")
        return head

    def _write_head(self, oid: ObjectId) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".HEAD-")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(oid.hex() + "\n")
                fh.flush()
                if self.durable:
                    os.fdatasync(fh.fileno())
            os.replace(tmp, self.head_path)
        except OSError as exc:
            raise StoreError(f"cannot update HEAD: {exc}") from exc

    def head(self) -> ObjectId:
        return self._head

    def set_head(self, oid: ObjectId) -> None:
        """Point HEAD at an existing commit (used by sync after fetching)."""
        with self.lock:
            self.read_commit(oid)
            self._write_head(oid)
            self._head = oid

    # -- object access ---------------------------------------------------------

    def _put_commit(self, commit: Commit) -> ObjectId:
        oid = self.store.put(ObjectKind.COMMIT, commit.encode())
        self._commits[oid] = commit
        return oid

    def read_commit(self, oid: ObjectId) -> Commit:
        commit = self._commits.get(oid)
        if commit is None:
            payload = self.store.get_kind(oid, ObjectKind.COMMIT)
            commit = Commit.decode(oid, payload)
            self._commits[oid] = commit
        return commit

    def read_tree(self, oid: ObjectId) -> tuple[TreeEntry, ...]:
        entries = self._trees.get(oid)
        if entries is None:
            entries = decode_tree(oid, self.store.get_kind(oid, ObjectKind.TREE))
            self._trees.put(oid, entries)
        return entries

    def write_tree(self, entries: Iterable[TreeEntry]) -> ObjectId:
        entries = tuple(sorted(entries, key=lambda e: e.name))
        oid = self.store.put(ObjectKind.TREE, encode_tree(entries))
        self._trees.put(oid, entries)
        return oid

    def read_record(self, oid: ObjectId) -> MessageRecord:
        rec = self._records.get(oid)
        if rec is None:
            rec = MessageRecord.decode(oid, self.store.get_kind(oid, ObjectKind.BLOB))
            self._records.put(oid, rec)
        return rec

    def write_record(self, rec: MessageRecord) -> ObjectId:
        oid = self.store.put(ObjectKind.BLOB, rec.encode())
        self._records.put(oid, rec)
        return oid

    def read_meta(self, oid: ObjectId) -> MailboxMeta:
        return MailboxMeta.decode(oid, self.store.get_kind(oid, ObjectKind.BLOB))

    def write_meta(self, meta: MailboxMeta) -> ObjectId:
        return self.store.put(ObjectKind.BLOB, meta.encode())

    # -- tree navigation --------------------------------------------------

    def _mailbox_tree(self, root: ObjectId, name: str) -> ObjectId | None:
        key = name.encode("utf-8")
        for e in self.read_tree(root):
            if e.name == key:
                return e.id
        return None

    def mailbox_names(self, commit: ObjectId | None = None) -> list[str]:
        root = self.read_commit(commit or self._head).root_tree
        return [e.name.decode("utf-8") for e in self.read_tree(root)]

    def _lookup(self, tree: ObjectId, path: tuple[bytes, ...]) -> TreeEntry | None:
        entry = None
        for name in path:
            if entry is not None:
                if entry.kind != EntryKind.SUBTREE:
                    return None
                tree = entry.id
            entry = next((e for e in self.read_tree(tree) if e.name == name), None)
            if entry is None:
                return None
        return entry

    def iter_record_entries(self, mailbox_tree: ObjectId) -> Iterator[TreeEntry]:
        """Record entries of a mailbox tree in uid order."""
        for e in self.read_tree(mailbox_tree):
            if e.kind == EntryKind.SUBTREE:
                yield from self.iter_record_entries(e.id)
            elif e.kind == EntryKind.RECORD:
                yield e

    def mailbox_state(self, name: str, commit: ObjectId | None = None) -> MailboxState:
        name = validate_mailbox(name)
        root = self.read_commit(commit or self._head).root_tree
        mtree = self._mailbox_tree(root, name)
        if mtree is None:
            raise NotFoundError(f"no mailbox {name!r}")
        return self._load_mailbox(mtree)

    def mailbox_uids(self, name: str, commit: ObjectId | None = None) -> list[int]:
        """Uids present in a mailbox, read from tree entry names only."""
        root = self.read_commit(commit or self._head).root_tree
        mtree = self._mailbox_tree(root, validate_mailbox(name))
        if mtree is None:
            raise NotFoundError(f"no mailbox {name!r}")
        return [int(e.name) for e in self.iter_record_entries(mtree)]

    def _load_mailbox(self, mtree: ObjectId) -> MailboxState:
        meta_entry = self._lookup(mtree, (META_NAME,))
        if meta_entry is None:
            raise CorruptObjectError(mtree, "mailbox tree without meta entry")
        messages = {}
        for e in self.iter_record_entries(mtree):
            rec = self.read_record(e.id)
            messages[rec.uid] = rec
        return MailboxState(self.read_meta(meta_entry.id), messages)

    def has_mailbox(self, name: str) -> bool:
        root = self.read_commit(self._head).root_tree
        return self._mailbox_tree(root, validate_mailbox(name)) is not None

    def get_meta(self, name: str, commit: ObjectId | None = None) -> MailboxMeta:
        root = self.read_commit(commit or self._head).root_tree
        mtree = self._mailbox_tree(root, validate_mailbox(name))
        if mtree is None:
            raise NotFoundError(f"no mailbox {name!r}")
        return self.read_meta(self._lookup(mtree, (META_NAME,)).id)

    def get_record(self, name: str, uid: int, commit: ObjectId | None = None) -> MessageRecord:
        name = validate_mailbox(name)
        root = self.read_commit(commit or self._head).root_tree
        mtree = self._mailbox_tree(root, name)
        if mtree is None:
            raise NotFoundError(f"no mailbox {name!r}")
        entry = self._lookup(mtree, uid_path(uid)) if 0 < uid < 2**32 else None
        if entry is None:
            raise NotFoundError(f"no message {uid} in {name!r}")
        return self.read_record(entry.id)

    def checkout(self, commit: ObjectId) -> Snapshot:
        root = self.read_commit(commit).root_tree
        boxes = {e.name.decode("utf-8"): self._load_mailbox(e.id) for e in self.read_tree(root)}
        return Snapshot(commit, boxes)

    # -- tree rewriting ---------------------------------------------------

    def apply_changes(self, tree: ObjectId | None, changes: dict[tuple[bytes, ...], object]) -> ObjectId | None:
        """Rewrite ``tree`` with leaf changes keyed by path; None removes a leaf."""
        entries = {e.name: e for e in self.read_tree(tree)} if tree is not None else {}
        grouped: dict[bytes, dict] = {}
        for path, leaf in changes.items():
            if len(path) == 1:
                if leaf is None:
                    entries.pop(path[0], None)
                else:
                    kind, oid = leaf
                    entries[path[0]] = TreeEntry(path[0], kind, oid)
            else:
                grouped.setdefault(path[0], {})[path[1:]] = leaf
        for name, sub in grouped.items():
            old = entries.get(name)
            child = self.apply_changes(old.id if old is not None and old.kind == EntryKind.SUBTREE else None, sub)
            if child is None:
                entries.pop(name, None)
            else:
                entries[name] = TreeEntry(name, EntryKind.SUBTREE, child)
        if not entries:
            return None
        return self.write_tree(entries.values())

    def build_mailbox_tree(self, meta: MailboxMeta, records: Mapping[int, MessageRecord]) -> ObjectId:
        changes: dict[tuple[bytes, ...], object] = {(META_NAME,): (EntryKind.META, self.write_meta(meta))}
        for uid, rec in records.items():
            changes[uid_path(uid)] = (EntryKind.RECORD, self.write_record(rec))
        return self.apply_changes(None, changes)

    def _commit(self, root_tree: ObjectId, op_tag: bytes) -> ObjectId:
        head = self.read_commit(self._head)
        if root_tree == head.root_tree:
            return self._head
        commit = Commit((self._head,), root_tree, self.device_id, int(self.clock()), op_tag)
        oid = self._put_commit(commit)
        self._write_head(oid)
        self._head = oid
        return oid

    def _mutate(self, mailbox_changes: dict[str, dict], op_tag: bytes) -> ObjectId:
        root = self.read_commit(self._head).root_tree
        changes = {}
        for name, sub in mailbox_changes.items():
            key = name.encode("utf-8")
            for path, leaf in sub.items():
                changes[(key,) + path] = leaf
        new_root = self.apply_changes(root, changes) or self.write_tree(())
        return self._commit(new_root, op_tag)

    def _uid_validity(self, name: str) -> int:
        h = hashlib.sha256(b"uidvalidity\0" + self.device_id + b"\0" + name.encode() + self._head).digest()
        return (struct.unpack(">I", h[:4])[0] & 0x7FFFFFFF) or 1

    def _meta_or_new(self, name: str) -> MailboxMeta:
        try:
            return self.get_meta(name)
        except NotFoundError:
            return MailboxMeta(1, self._uid_validity(name))

    # -- mutations -------------------------------------------------------------

    def create_mailbox(self, name: str) -> ObjectId:
        name = validate_mailbox(name)
        with self.lock:
            if self.has_mailbox(name):
                return self._head
            meta = self._meta_or_new(name)
            return self._mutate({name: {(META_NAME,): (EntryKind.META, self.write_meta(meta))}}, b"create")

    def store_message(self, raw: bytes, uid: int, flags, internal_date: int) -> MessageRecord:
        plan = mimedup.segment(raw, self.min_part_size)
        for bid, payload in plan.blobs.items():
            self.store.put(ObjectKind.BLOB, payload)
        return MessageRecord(
            uid=uid,
            internal_date=int(internal_date),
            flags=normalize_flags(flags),
            segments=tuple(SegmentRef(s.blob_id, s.offset, s.length) for s in plan.segments),
            total_length=len(raw),
            part_digests=plan.part_digests,
        )

    def append_message(self, mailbox: str, flags=(), internal_date: int | None = None,
                       raw: bytes = b"") -> tuple[int, ObjectId]:
        mailbox = validate_mailbox(mailbox)
        if not raw:
            raise InvalidArgumentError("cannot append an empty message")
        if internal_date is None:
            internal_date = int(self.clock())
        with self.lock:
            meta = self._meta_or_new(mailbox)
            uid = meta.uid_next
            rec = self.store_message(raw, uid, flags, internal_date)
            new_meta = MailboxMeta(uid + 1, meta.uid_validity)
            commit = self._mutate(
                {mailbox: {
                    (META_NAME,): (EntryKind.META, self.write_meta(new_meta)),
                    uid_path(uid): (EntryKind.RECORD, self.write_record(rec)),
                }},
                b"append",
            )
            return uid, commit

    def fetch_message(self, mailbox: str, uid: int, commit: ObjectId | None = None) -> bytes:
        rec = self.get_record(mailbox, uid, commit)
        return self.message_bytes(rec)

    def message_bytes(self, rec: MessageRecord) -> bytes:
        return mimedup.reassemble(rec.segments, lambda bid: self.store.get_kind(bid, ObjectKind.BLOB))

    def set_flags(self, mailbox: str, uid: int, flags) -> ObjectId:
        return self.update_flags(mailbox, {uid: flags})

    def update_flags(self, mailbox: str, flags_by_uid: Mapping[int, Iterable[str]]) -> ObjectId:
        """Replace the flags of several messages in one commit."""
        mailbox = validate_mailbox(mailbox)
        with self.lock:
            changes = {}
            for uid, flags in flags_by_uid.items():
                flags = normalize_flags(flags)
                rec = self.get_record(mailbox, uid)
                if rec.flags != flags:
                    changes[uid_path(uid)] = (EntryKind.RECORD, self.write_record(rec.with_flags(flags)))
            if not changes:
                return self._head
            return self._mutate({mailbox: changes}, b"flags")

    def delete_message(self, mailbox: str, uid: int) -> ObjectId:
        return self.delete_messages(mailbox, [uid])

    def delete_messages(self, mailbox: str, uids: Iterable[int], op_tag: bytes = b"expunge") -> ObjectId:
        mailbox = validate_mailbox(mailbox)
        with self.lock:
            changes = {}
            for uid in uids:
                self.get_record(mailbox, uid)
                changes[uid_path(uid)] = None
            if not changes:
                return self._head
            return self._mutate({mailbox: changes}, op_tag)

    def move_message(self, src: str, uid: int, dst: str) -> tuple[int, ObjectId]:
        src, dst = validate_mailbox(src), validate_mailbox(dst)
        if src == dst:
            raise InvalidArgumentError("source and destination mailbox are the same")
        with self.lock:
            rec = self.get_record(src, uid)
            meta = self._meta_or_new(dst)
            new_uid = meta.uid_next
            moved = rec.with_uid(new_uid)
            commit = self._mutate(
                {
                    src: {uid_path(uid): None},
                    dst: {
                        (META_NAME,): (EntryKind.META, self.write_meta(MailboxMeta(new_uid + 1, meta.uid_validity))),
                        uid_path(new_uid): (EntryKind.RECORD, self.write_record(moved)),
                    },
                },
                b"move",
            )
            return new_uid, commit

    # -- history -------------------------------------------------------------------

    def ancestors(self, start: ObjectId) -> set[ObjectId]:
        """``start`` and every commit reachable through parent links."""
        return _reachable(lambda c: self.read_commit(c).parents, start)

    def is_ancestor(self, a: ObjectId, b: ObjectId) -> bool:
        """True if ``a`` is ``b`` or reachable from ``b``."""
        return a in self.ancestors(b)

    def log(self, start: ObjectId | None = None, limit: int | None = None) -> list[tuple[ObjectId, Commit]]:
        """Commits reachable from ``start``, children before parents."""
        start = start or self._head
        reachable = self.ancestors(start)
        children = dict.fromkeys(reachable, 0)
        for oid in reachable:
            for p in self.read_commit(oid).parents:
                children[p] += 1
        heap = [(-self.read_commit(start).timestamp, start)]
        out = []
        while heap and (limit is None or len(out) < limit):
            _, oid = heapq.heappop(heap)
            commit = self.read_commit(oid)
            out.append((oid, commit))
            for p in commit.parents:
                children[p] -= 1
                if children[p] == 0:
                    heapq.heappush(heap, (-self.read_commit(p).timestamp, p))
        return out

    def find_merge_base(self, a: ObjectId, b: ObjectId) -> ObjectId | None:
        """Lowest common ancestor of two commits; ties go to the smallest id."""
        return merge_base(lambda c: self.read_commit(c).parents, a, b)

    # -- maintenance ---------------------------------------------------------

    def pack(self) -> PackFile:
        with self.lock:
            return self.store.pack_loose()

    def disk_usage(self) -> int:
        return self.store.disk_usage()

    def commit_merge(self, parents: tuple[ObjectId, ObjectId], root_tree: ObjectId, timestamp: int) -> ObjectId:
        """Store a merge commit (not yet moving HEAD)."""
        commit = Commit(tuple(parents), root_tree, b"", timestamp, b"merge")
        return self._put_commit(commit)


def init(root: str | os.PathLike, device_id: bytes | str = b"", **kwargs) -> Archive:
    """Open the archive at ``root``, creating an empty one if needed."""
    return Archive(root, device_id, **kwargs)
