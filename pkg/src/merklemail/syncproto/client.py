"""Pull side of the sync protocol."""

from __future__ import annotations

import logging
import socket
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable

from ..archive import Archive, Commit, EntryKind, MessageRecord
from ..archive.model import decode_tree
from ..errors import IncompatibleArchiveError, IntegrityError, ProtocolError
from ..hashstore import ObjectId, ObjectKind
from .frames import (
    MAX_BATCH,
    PROTO_VERSION,
    ErrCode,
    FrameConn,
    FrameType,
    decode_err,
    decode_head,
    decode_hello,
    decode_obj,
    encode_err,
    encode_getobj,
    encode_hello,
)
from .merge import merge
from .server import socketpair_session

log = logging.getLogger(__name__)

WINDOW = 8  # GETOBJ frames in flight

UP_TO_DATE = "up-to-date"
FAST_FORWARD = "fast-forward"
FETCH_THEN_MERGE = "fetch-then-merge"


@dataclass
class SyncReport:
    direction: str = "pull"
    objects_received: Counter = field(default_factory=Counter)
    objects_sent: Counter = field(default_factory=Counter)
    data_bytes: int = 0
    control_bytes: int = 0
    old_head: ObjectId | None = None
    new_head: ObjectId | None = None
    merged: bool = False
    plan: str = ""
    requested: list[ObjectId] = field(default_factory=list, repr=False)

    @property
    def obj_frames(self) -> int:
        return sum(self.objects_received.values())

    @property
    def wire_bytes(self) -> int:
        return self.data_bytes + self.control_bytes


@dataclass
class NegotiationPlan:
    kind: str
    remote_head: ObjectId
    new_commits: dict[ObjectId, Commit]
    frontier: set[ObjectId]


class _Fetcher:
    """Pipelined GETOBJ/OBJ exchange; ``want`` may be called from handlers."""

    def __init__(self, conn: FrameConn, report: SyncReport):
        self.conn = conn
        self.report = report
        self.queue: deque[tuple[ObjectId, str]] = deque()
        self.requested: set[ObjectId] = set()

    def want(self, oid: ObjectId, role: str) -> None:
        if oid not in self.requested:
            self.requested.add(oid)
            self.queue.append((oid, role))

    def run(self, handle: Callable[[ObjectId, str, ObjectKind, bytes], None]) -> None:
        outstanding: deque[list[tuple[ObjectId, str]]] = deque()
        while self.queue or outstanding:
            while self.queue and len(outstanding) < WINDOW:
                batch = [self.queue.popleft() for _ in range(min(MAX_BATCH, len(self.queue)))]
                self.conn.send(FrameType.GETOBJ, encode_getobj(oid for oid, _ in batch))
                self.report.requested.extend(oid for oid, _ in batch)
                outstanding.append(batch)
            for oid, role in outstanding.popleft():
                ftype, payload = self.conn.recv()
                if ftype == FrameType.ERR:
                    code, msg = decode_err(payload)
                    if code == ErrCode.UNKNOWN_OBJECT:
                        raise IntegrityError(f"peer does not have object {msg}")
                    raise ProtocolError(f"peer error {code}: {msg}")
                if ftype != FrameType.OBJ:
                    raise ProtocolError(f"expected OBJ, got frame type 0x{ftype:02x}")
                got, kind, data = decode_obj(payload)
                if got != oid:
                    raise ProtocolError(f"OBJ {got} arrived where {oid} was expected")
                self.report.objects_received[kind.name.lower()] += 1
                handle(oid, role, kind, data)


def _expect_kind(oid: ObjectId, kind: ObjectKind, want: ObjectKind) -> None:
    if kind != want:
        raise ProtocolError(f"object {oid} is a {kind.name.lower()}, expected {want.name.lower()}")


def negotiate(archive: Archive, fetcher: _Fetcher, remote_head: ObjectId) -> NegotiationPlan:
    """Walk remote ancestry breadth-first, stopping at locally known commits."""
    local = archive.head()
    store = archive.store
    if store.contains(remote_head):
        kind = UP_TO_DATE if archive.is_ancestor(remote_head, local) else FETCH_THEN_MERGE
        return NegotiationPlan(kind, remote_head, {}, {remote_head})

    new: dict[ObjectId, Commit] = {}
    frontier: set[ObjectId] = set()

    def on_commit(oid, role, kind, data):
        _expect_kind(oid, kind, ObjectKind.COMMIT)
        commit = Commit.decode(oid, data)
        new[oid] = commit
        if not commit.parents:
            raise IncompatibleArchiveError(f"remote root commit {oid} is unknown here")
        for p in commit.parents:
            if store.contains(p):
                frontier.add(p)
            else:
                fetcher.want(p, "commit")

    fetcher.want(remote_head, "commit")
    fetcher.run(on_commit)

    known = set()
    for f in frontier:
        known |= archive.ancestors(f)
    kind = FAST_FORWARD if local in known else FETCH_THEN_MERGE
    return NegotiationPlan(kind, remote_head, new, frontier)


def _fetch_closure(archive: Archive, fetcher: _Fetcher, plan: NegotiationPlan) -> None:
    """Fetch every object below the new commits that is not stored locally.

    Leaf blobs are stored on arrival.  Trees, message records and commits
    are written only once their children are stored, so a stored tree always
    implies its whole closure is present; that is what lets the walk skip
    any subtree whose id is already known.
    """
    store = archive.store
    pending: dict[ObjectId, tuple[ObjectKind, bytes, list[ObjectId]]] = {}

    def missing(oid: ObjectId) -> bool:
        return not store.contains(oid)

    def on_object(oid, role, kind, data):
        if role == "leaf":
            _expect_kind(oid, kind, ObjectKind.BLOB)
            store.put(kind, data)
        elif role == "tree":
            _expect_kind(oid, kind, ObjectKind.TREE)
            entries = decode_tree(oid, data)
            for e in entries:
                if missing(e.id):
                    role_of = {EntryKind.SUBTREE: "tree", EntryKind.RECORD: "record", EntryKind.META: "leaf"}
                    fetcher.want(e.id, role_of[e.kind])
            pending[oid] = (kind, data, [e.id for e in entries])
        elif role == "record":
            _expect_kind(oid, kind, ObjectKind.BLOB)
            rec = MessageRecord.decode(oid, data)
            for bid in rec.blob_ids:
                if missing(bid):
                    fetcher.want(bid, "leaf")
            pending[oid] = (kind, data, sorted(rec.blob_ids))
        else:
            raise ProtocolError(f"unexpected object role {role}")

    for commit in plan.new_commits.values():
        if missing(commit.root_tree):
            fetcher.want(commit.root_tree, "tree")
    fetcher.run(on_object)

    written: set[ObjectId] = set()

    def write(oid: ObjectId) -> None:
        if oid in written or oid not in pending:
            return
        kind, data, children = pending[oid]
        for child in children:
            write(child)
            if missing(child):
                raise IntegrityError(f"object {oid} references missing {child}")
        store.put(kind, data)
        written.add(oid)

    # commits parents-first
    order: list[ObjectId] = []
    state: dict[ObjectId, int] = {}
    for start in plan.new_commits:
        stack = [(start, False)]
        while stack:
            oid, expanded = stack.pop()
            if oid not in plan.new_commits or state.get(oid) == 2:
                continue
            if expanded:
                state[oid] = 2
                order.append(oid)
                continue
            if state.get(oid) == 1:
                continue
            state[oid] = 1
            stack.append((oid, True))
            stack.extend((p, False) for p in plan.new_commits[oid].parents)
    for oid in order:
        commit = plan.new_commits[oid]
        write(commit.root_tree)
        for dep in (commit.root_tree, *commit.parents):
            if missing(dep):
                raise IntegrityError(f"commit {oid} references missing {dep}")
        store.put(ObjectKind.COMMIT, commit.encode())


def _connect(endpoint, timeout: float | None):
    if isinstance(endpoint, Archive):
        return socketpair_session(endpoint), True
    if hasattr(endpoint, "sendall") and hasattr(endpoint, "recv"):
        return endpoint, False
    if isinstance(endpoint, str):
        host, _, port = endpoint.rpartition(":")
        endpoint = (host or "127.0.0.1", int(port))
    sock = socket.create_connection(endpoint, timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock, True


def sync_pull(local: Archive, remote, *, timeout: float | None = 60.0) -> SyncReport:
    """Pull ``remote`` into ``local`` and fast-forward or merge HEAD.

    ``remote`` is a ``(host, port)`` pair, a ``"host:port"`` string, an
    already connected socket-like object, or an :class:`Archive` served
    in-process over a socket pair.
    """
    sock, owned = _connect(remote, timeout)
    conn = FrameConn(sock)
    report = SyncReport(old_head=local.head())
    try:
        conn.send(FrameType.HELLO, encode_hello(local.device_id))
        version, _peer = decode_hello(conn.expect(FrameType.HELLO))
        if version != PROTO_VERSION:
            raise ProtocolError(f"peer speaks protocol version {version}")
        remote_head = decode_head(conn.expect(FrameType.HEAD))
        fetcher = _Fetcher(conn, report)
        plan = negotiate(local, fetcher, remote_head)
        report.plan = plan.kind
        if plan.new_commits:
            _fetch_closure(local, fetcher, plan)
        conn.send(FrameType.DONE)
    except ProtocolError as exc:
        try:
            conn.send(FrameType.ERR, encode_err(ErrCode.PROTOCOL, str(exc)))
        except OSError:
            pass
        raise
    finally:
        report.data_bytes = conn.stats.data_bytes
        report.control_bytes = conn.stats.control_bytes
        if owned:
            sock.close()

    with local.lock:
        current = local.head()
        if remote_head == current or local.is_ancestor(remote_head, current):
            new = current
        elif local.is_ancestor(current, remote_head):
            new = remote_head
            local.set_head(new)
        else:
            new = merge(local, current, remote_head)
            local.set_head(new)
            report.merged = True
    report.new_head = new
    log.info("pull %s: %s -> %s (%d objects, %d data bytes)", plan.kind, report.old_head.short(),
             new.short(), report.obj_frames, report.data_bytes)
    return report


def sync_bidirectional(a: Archive, b, *, b_endpoint=None) -> tuple[SyncReport, SyncReport]:
    """Pull a <- b then b <- a.

    ``b`` is an :class:`Archive`; when ``b_endpoint`` is given the first pull
    goes over that endpoint instead of an in-process socket pair.
    """
    first = sync_pull(a, b_endpoint if b_endpoint is not None else b)
    second = sync_pull(b, a)
    first.direction = second.direction = "bidirectional"
    return first, second
