from __future__ import annotations

import os
import random
import shutil
import socket
import struct
import threading
import zlib

import pytest

from conftest import TickClock
from merklemail.archive import Archive, Commit, EMPTY_TREE_ID
from merklemail.errors import IncompatibleArchiveError, ProtocolError
from merklemail.hashstore import ObjectKind
from merklemail.syncproto import (
    FAST_FORWARD,
    FETCH_THEN_MERGE,
    UP_TO_DATE,
    FrameType,
    SyncServer,
    merge,
    sync_bidirectional,
    sync_pull,
)
from merklemail.syncproto.frames import (
    HEADER,
    ErrCode,
    FrameConn,
    decode_err,
    decode_hello,
    decode_obj,
    encode_getobj,
    encode_hello,
    encode_obj,
)


def _fill(archive: Archive, mailbox: str, n: int, tag: bytes) -> None:
    for i in range(n):
        archive.append_message(mailbox, raw=b"Subject: %s %d\r\n\r\n%s" % (tag, i, os.urandom(64).hex().encode()))


def _clone(src: Archive, root, device: bytes) -> Archive:
    shutil.copytree(src.root, root)
    return Archive(root, device, clock=TickClock(5_000_000), durable=False)


def _tree_closure(archive: Archive, tree) -> set:
    out = {tree}
    for e in archive.read_tree(tree):
        if e.kind == 2:
            out |= _tree_closure(archive, e.id)
        else:
            out.add(e.id)
            if e.kind == 1:
                out |= archive.read_record(e.id).blob_ids
    return out


# -- frame codecs ---------------------------------------------------------------


def test_obj_frame_rejects_tampering():
    data = b"some object payload"
    from merklemail.hashstore import object_id

    oid = object_id(ObjectKind.BLOB, data)
    frame = encode_obj(oid, ObjectKind.BLOB, data)
    assert decode_obj(frame) == (oid, ObjectKind.BLOB, data)
    forged = zlib.compress(b"Some object payload")
    bad = oid + struct.pack(">BQQ", ObjectKind.BLOB, len(data), len(forged)) + forged
    with pytest.raises(ProtocolError):
        decode_obj(bad)


def test_getobj_batch_limit():
    with pytest.raises(ProtocolError):
        encode_getobj([b"\0" * 32] * 65)
    with pytest.raises(ProtocolError):
        encode_getobj([])


# -- server behaviour -------------------------------------------------------------------


@pytest.fixture
def served(make_archive):
    archive = make_archive(b"srv")
    _fill(archive, "INBOX", 70, b"s")
    server = SyncServer(archive, ("127.0.0.1", 0)).start()
    yield archive, server
    server.stop()


def _session(server) -> FrameConn:
    conn = FrameConn(socket.create_connection(server.endpoint, timeout=10))
    conn.send(FrameType.HELLO, encode_hello(b"probe"))
    return conn


def test_server_handshake_and_genesis(served):
    archive, server = served
    conn = _session(server)
    assert decode_hello(conn.expect(FrameType.HELLO)) == (1, b"srv")
    assert conn.expect(FrameType.HEAD) == archive.head()
    genesis = archive.log()[-1][0]
    conn.send(FrameType.GETOBJ, encode_getobj([genesis]))
    oid, kind, data = decode_obj(conn.expect(FrameType.OBJ))
    assert (oid, kind) == (genesis, ObjectKind.COMMIT)
    assert Commit.decode(oid, data).parents == ()
    conn.send(FrameType.DONE)


def test_server_answers_batches_in_order(served):
    archive, server = served
    conn = _session(server)
    conn.expect(FrameType.HELLO)
    conn.expect(FrameType.HEAD)
    ids = [cid for cid, _ in archive.log()][:64]
    random.Random(0).shuffle(ids)
    conn.send(FrameType.GETOBJ, encode_getobj(ids))
    got = [decode_obj(conn.expect(FrameType.OBJ))[0] for _ in ids]
    assert got == ids


def test_server_reports_unknown_ids(served):
    _, server = served
    conn = _session(server)
    conn.expect(FrameType.HELLO)
    conn.expect(FrameType.HEAD)
    ghost = bytes(range(32))
    conn.send(FrameType.GETOBJ, encode_getobj([ghost]))
    ftype, payload = conn.recv()
    assert ftype == FrameType.ERR
    assert decode_err(payload) == (ErrCode.UNKNOWN_OBJECT, ghost.hex())


def test_server_rejects_bad_version_and_unknown_frames(served):
    _, server = served
    conn = FrameConn(socket.create_connection(server.endpoint, timeout=10))
    conn.send(FrameType.HELLO, encode_hello(b"x", version=9))
    ftype, payload = conn.recv()
    assert ftype == FrameType.ERR and decode_err(payload)[0] == ErrCode.VERSION

    conn = _session(server)
    conn.expect(FrameType.HELLO)
    conn.expect(FrameType.HEAD)
    conn.sock.sendall(HEADER.pack(0x42, 0))
    ftype, payload = conn.recv()
    assert ftype == FrameType.ERR and decode_err(payload)[0] == ErrCode.PROTOCOL


def test_concurrent_pulls_get_identical_bytes(served, make_archive):
    _, server = served
    clients = [make_archive(b"c%d" % i) for i in range(2)]
    reports = [None, None]

    def run(i):
        reports[i] = sync_pull(clients[i], server.endpoint)

    threads = [threading.Thread(target=run, args=(i,)) for i in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert reports[0].data_bytes == reports[1].data_bytes > 0
    assert clients[0].head() == clients[1].head() == served[0].head()


# -- pull semantics ----------------------------------------------------------------------------


def test_equal_heads_transfer_nothing(make_archive, tmp_path):
    a = make_archive(b"a")
    _fill(a, "INBOX", 5, b"x")
    b = _clone(a, tmp_path / "b", b"b")
    report = sync_pull(b, a)
    assert report.plan == UP_TO_DATE
    assert report.obj_frames == 0 and report.data_bytes == 0
    assert report.control_bytes <= 256
    assert report.requested == []


def test_fast_forward_requests_exactly_the_new_commits(make_archive, tmp_path):
    remote = make_archive(b"r")
    _fill(remote, "INBOX", 10, b"base")
    _fill(remote, "Big", 40, b"big")
    local = _clone(remote, tmp_path / "local", b"l")
    big_before = {e.name: e.id for e in remote.read_tree(remote.read_commit(remote.head()).root_tree)}[b"Big"]
    for depth in (1, 3, 8):
        _fill(remote, "INBOX", depth, b"new%d" % depth)
        report = sync_pull(local, remote)
        assert report.plan == FAST_FORWARD and not report.merged
        assert report.objects_received["commit"] == depth
        assert local.head() == remote.head()
        assert not set(report.requested) & _tree_closure(remote, big_before)
    assert local.checkout(local.head()) == remote.checkout(remote.head())


def test_remote_behind_leaves_head_alone(make_archive, tmp_path):
    a = make_archive(b"a")
    _fill(a, "INBOX", 3, b"x")
    b = _clone(a, tmp_path / "b", b"b")
    _fill(b, "INBOX", 2, b"y")
    head = b.head()
    report = sync_pull(b, a)
    assert report.plan == UP_TO_DATE and b.head() == head


def test_disjoint_appends_merge_and_converge(make_archive, tmp_path):
    a = make_archive(b"a")
    _fill(a, "INBOX", 4, b"base")
    b = _clone(a, tmp_path / "b", b"b")
    a.append_message("INBOX", raw=b"only on a")
    b.append_message("Sent", raw=b"only on b")
    before = a.ancestors(a.head()) | b.ancestors(b.head())
    first, second = sync_bidirectional(a, b)
    assert first.merged and first.plan == FETCH_THEN_MERGE
    assert a.head() == b.head()
    assert a.checkout(a.head()) == b.checkout(b.head())
    assert a.fetch_message("Sent", 1) == b"only on b"
    assert b.fetch_message("INBOX", 5) == b"only on a"
    assert before <= a.ancestors(a.head())
    again = sync_pull(a, b)
    assert again.obj_frames == 0 and again.control_bytes <= 256


def test_uid_collision_is_renumbered_symmetrically(make_archive, tmp_path):
    a = make_archive(b"a")
    _fill(a, "INBOX", 6, b"base")
    b = _clone(a, tmp_path / "b", b"b")
    a.append_message("INBOX", raw=b"seventh from a")
    b.append_message("INBOX", raw=b"seventh from b")
    sync_pull(a, b)
    pa, pb = a.read_commit(a.head()).parents
    assert merge(a, pa, pb) == merge(a, pb, pa) == a.head()
    snap = a.checkout(a.head()).mailboxes["INBOX"]
    bodies = sorted(a.message_bytes(r) for r in snap.messages.values())
    assert b"seventh from a" in bodies and b"seventh from b" in bodies
    assert sorted(snap.messages)[-2:] == [7, 8]
    assert snap.meta.uid_next == 9


def test_modify_beats_delete(make_archive, tmp_path):
    a = make_archive(b"a")
    _fill(a, "INBOX", 3, b"base")
    b = _clone(a, tmp_path / "b", b"b")
    a.delete_message("INBOX", 2)
    b.set_flags("INBOX", 2, ["\\Flagged", "keep"])
    sync_bidirectional(a, b)
    for side in (a, b):
        assert side.get_record("INBOX", 2).flags == {"\\Flagged", "keep"}


def test_concurrent_flag_changes_union(make_archive, tmp_path):
    a = make_archive(b"a")
    _fill(a, "INBOX", 2, b"base")
    b = _clone(a, tmp_path / "b", b"b")
    a.set_flags("INBOX", 1, ["\\Seen", "x"])
    b.set_flags("INBOX", 1, ["\\Answered", "y"])
    sync_bidirectional(a, b)
    assert a.get_record("INBOX", 1).flags == {"\\Seen", "\\Answered", "x", "y"}
    assert a.head() == b.head()


def test_merge_of_identical_heads_is_noop(make_archive):
    a = make_archive()
    _fill(a, "INBOX", 2, b"z")
    head = a.head()
    assert merge(a, head, head) == head
    assert len(a.log()) == 3


def test_unrelated_histories_are_incompatible(make_archive):
    a = make_archive(b"a")
    b = make_archive(b"b")
    foreign = b._put_commit(Commit((), EMPTY_TREE_ID, b"alien", 77, b"genesis"))
    b.set_head(foreign)
    with pytest.raises(IncompatibleArchiveError):
        sync_pull(a, b)
    assert a.head() == a.log()[-1][0]


class _FrameProxy:
    """Client-side socket wrapper that can rewrite or cut incoming frames."""

    def __init__(self, sock, tamper_obj: int | None = None, cut_after: int | None = None):
        self.sock = sock
        self.out = b""
        self.tamper_obj = tamper_obj
        self.cut_after = cut_after
        self.objs = 0
        self.frames = 0
        self.tampered = None

    def sendall(self, data):
        self.sock.sendall(data)

    def _exact(self, n):
        buf = b""
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError("closed")
            buf += chunk
        return buf

    def recv(self, n):
        while not self.out:
            if self.cut_after is not None and self.frames >= self.cut_after:
                return b""
            ftype, length = HEADER.unpack(self._exact(5))
            payload = self._exact(length)
            self.frames += 1
            if ftype == FrameType.OBJ:
                self.objs += 1
                if self.objs == self.tamper_obj:
                    oid, kind, data = decode_obj(payload)
                    forged = bytearray(data)
                    forged[len(forged) // 2] ^= 1
                    body = zlib.compress(bytes(forged))
                    payload = oid + struct.pack(">BQQ", kind, len(forged), len(body)) + body
                    self.tampered = oid
            self.out = HEADER.pack(ftype, len(payload)) + payload
        chunk, self.out = self.out[:n], self.out[n:]
        return chunk

    def close(self):
        self.sock.close()


def test_tampered_object_is_rejected(make_archive, tmp_path):
    remote = make_archive(b"r")
    _fill(remote, "INBOX", 2, b"base")
    local = _clone(remote, tmp_path / "l", b"l")
    _fill(remote, "INBOX", 5, b"more")
    head = local.head()
    with SyncServer(remote, ("127.0.0.1", 0)) as server:
        for target in (1, 4, 9):
            proxy = _FrameProxy(socket.create_connection(server.endpoint), tamper_obj=target)
            with pytest.raises(ProtocolError):
                sync_pull(local, proxy)
            proxy.close()
            assert local.head() == head
            if local.store.contains(proxy.tampered):
                assert local.store.get(proxy.tampered) == remote.store.get(proxy.tampered)
        report = sync_pull(local, server.endpoint)
    assert local.head() == remote.head() and report.plan == FAST_FORWARD


def test_transport_failure_leaves_head_untouched(make_archive, tmp_path):
    remote = make_archive(b"r")
    _fill(remote, "INBOX", 2, b"base")
    local = _clone(remote, tmp_path / "l", b"l")
    _fill(remote, "INBOX", 6, b"more")
    head = local.head()
    with SyncServer(remote, ("127.0.0.1", 0)) as server:
        for cut in (1, 3, 10, 20):
            proxy = _FrameProxy(socket.create_connection(server.endpoint), cut_after=cut)
            with pytest.raises((ProtocolError, OSError)):
                sync_pull(local, proxy)
            proxy.close()
            assert local.head() == head
        sync_pull(local, server.endpoint)
    assert local.checkout(local.head()) == remote.checkout(remote.head())


def test_wire_bytes_match_report(make_archive, tmp_path):
    from merklemail.bench.workload import CountingSocket

    remote = make_archive(b"r")
    _fill(remote, "INBOX", 3, b"base")
    local = _clone(remote, tmp_path / "l", b"l")
    _fill(remote, "INBOX", 7, b"more")
    with SyncServer(remote, ("127.0.0.1", 0)) as server:
        sock = CountingSocket(socket.create_connection(server.endpoint))
        report = sync_pull(local, sock)
        sock.close()
    assert sock.wire_bytes == report.data_bytes + report.control_bytes
