"""Benchmark workloads driven end-to-end over real sockets."""

from __future__ import annotations

import hashlib
import imaplib
import itertools
import logging
import shutil
import socket
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from ..archive import Archive
from ..errors import EndpointUnreachableError, IntegrityError, InvalidArgumentError
from ..hashstore import directory_size
from ..imapd import ImapServer
from ..syncproto import SyncServer, sync_pull
from .corpus import gen_archive, load_corpus, split_sample
from .metrics import RssSampler, RunMetrics, Stopwatch, write_csv

log = logging.getLogger(__name__)

ACTIONS = ("append", "fetch", "sync")
LOOPBACK = ("127.0.0.1", 0)


@dataclass
class WorkloadSpec:
    corpus_path: str | None
    message_counts: Sequence[int]
    seed: int
    action: str
    sync_new_messages: int = 100
    repetitions: int = 5

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise InvalidArgumentError(f"unknown action {self.action!r}")
        if not self.message_counts or any(c <= 0 for c in self.message_counts):
            raise InvalidArgumentError("message counts must be positive")
        if self.repetitions < 1:
            raise InvalidArgumentError("repetitions must be at least 1")
        if self.sync_new_messages < 0:
            raise InvalidArgumentError("sync_new_messages must not be negative")


class CountingIMAP4(imaplib.IMAP4):
    """imaplib client that counts every byte crossing the socket."""

    def __init__(self, host: str, port: int, timeout: float | None = 60):
        self.sent = self.received = 0
        super().__init__(host, port, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, data):
        self.sent += len(data)
        super().send(data)

    def read(self, size):
        data = super().read(size)
        self.received += len(data)
        return data

    def readline(self):
        line = super().readline()
        self.received += len(line)
        return line

    @property
    def wire_bytes(self) -> int:
        return self.sent + self.received

    def append_raw(self, mailbox: str, message: bytes):
        """APPEND without imaplib's line-ending rewrite, so bytes round-trip."""
        self.literal = message
        typ, data = self._simple_command("APPEND", mailbox)
        if typ != "OK":
            raise imaplib.IMAP4.error(f"APPEND failed: {data}")
        return typ, data

    def fetch_bodies(self, mailbox: str) -> list[bytes]:
        typ, data = self.select(mailbox)
        if typ != "OK":
            raise imaplib.IMAP4.error(f"SELECT failed: {data}")
        if int(data[0]) == 0:
            return []
        typ, data = self.fetch("1:*", "(BODY[])")
        if typ != "OK":
            raise imaplib.IMAP4.error(f"FETCH failed: {data}")
        return [item[1] for item in data if isinstance(item, tuple)]


class CountingSocket:
    """Socket proxy counting bytes passed through ``sendall`` and ``recv``."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sent = self.received = 0

    def sendall(self, data) -> None:
        self.sock.sendall(data)
        self.sent += len(data)

    def recv(self, n: int) -> bytes:
        data = self.sock.recv(n)
        self.received += len(data)
        return data

    def close(self) -> None:
        self.sock.close()

    @property
    def wire_bytes(self) -> int:
        return self.sent + self.received


def _digest(messages: Sequence[bytes]) -> str:
    h = hashlib.sha256()
    for m in messages:
        h.update(m)
    return h.hexdigest()


def check_endpoint(endpoint: tuple[str, int], timeout: float = 5.0) -> None:
    """Raise unless an IMAP greeting can be read from ``endpoint``."""
    try:
        with socket.create_connection(endpoint, timeout=timeout) as s:
            if not s.recv(64).startswith(b"* "):
                raise EndpointUnreachableError(f"{endpoint[0]}:{endpoint[1]} did not send an IMAP greeting")
    except OSError as exc:
        raise EndpointUnreachableError(f"cannot reach {endpoint[0]}:{endpoint[1]}: {exc}") from exc


SETUP_EPOCH = 1_000_000_000


def setup_clock(start: int = SETUP_EPOCH):
    """Ticking clock for setup archives, so repeated runs build identical objects."""
    return itertools.count(start).__next__


def populate(root: Path, messages: Sequence[bytes], device_id: bytes = b"bench", mailbox: str = "INBOX",
             clock=None) -> Archive:
    """Load messages straight through the archive API (untimed setup)."""
    archive = Archive(root, device_id, durable=False, clock=clock or setup_clock())
    archive.create_mailbox(mailbox)
    for raw in messages:
        archive.append_message(mailbox, raw=raw)
    return archive


class _Runner:
    def __init__(self, spec: WorkloadSpec, corpus: list[bytes], workdir: Path,
                 endpoint: tuple[str, int] | None, archive_path: str | None):
        self.spec = spec
        self.corpus = corpus
        self.workdir = workdir
        self.endpoint = endpoint
        self.archive_path = archive_path

    def _disk(self, local: Path | None) -> int:
        if local is not None:
            return directory_size(local)
        return directory_size(self.archive_path) if self.archive_path else 0

    def _mailbox(self, count: int, rep: int) -> str:
        if self.endpoint is None:
            return "INBOX"
        return f"bench-{self.spec.action}-{count}-{rep}-{time.time_ns()}"

    def _client(self, endpoint) -> CountingIMAP4:
        return CountingIMAP4(*endpoint)

    def append(self, count: int) -> list[RunMetrics]:
        messages = gen_archive(self.corpus, count, self.spec.seed)
        digest = _digest(messages)
        data = sum(len(m) for m in messages)
        out = []
        for rep in range(self.spec.repetitions):
            root = None
            server = None
            endpoint = self.endpoint
            if endpoint is None:
                root = self.workdir / f"append-{count}-{rep}"
                server = ImapServer(Archive(root, b"bench"), LOOPBACK).start()
                endpoint = server.endpoint
            mailbox = self._mailbox(count, rep)
            try:
                client = self._client(endpoint)
                with RssSampler() as rss, Stopwatch() as sw:
                    for raw in messages:
                        client.append_raw(mailbox, raw)
                client.logout()
            finally:
                if server is not None:
                    server.stop()
            out.append(RunMetrics("append", count, rep, sw.latency_ms, data, client.wire_bytes - data,
                                  self._disk(root), rss.delta, sw.cpu_seconds, digest, client.wire_bytes))
            if root is not None:
                shutil.rmtree(root)
        return out

    def fetch(self, count: int) -> list[RunMetrics]:
        messages = gen_archive(self.corpus, count, self.spec.seed)
        root = None
        server = None
        endpoint = self.endpoint
        if endpoint is None:
            root = self.workdir / f"fetch-{count}"
            populate(root, messages)
            server = ImapServer(Archive(root, b"bench"), LOOPBACK).start()
            endpoint = server.endpoint
        out = []
        try:
            for rep in range(self.spec.repetitions):
                mailbox = "INBOX"
                if self.endpoint is not None:
                    mailbox = self._mailbox(count, rep)
                    setup = self._client(endpoint)
                    for raw in messages:
                        setup.append_raw(mailbox, raw)
                    setup.logout()
                client = self._client(endpoint)
                with RssSampler() as rss, Stopwatch() as sw:
                    bodies = client.fetch_bodies(mailbox)
                client.logout()
                data = sum(len(b) for b in bodies)
                out.append(RunMetrics("fetch", count, rep, sw.latency_ms, data, client.wire_bytes - data,
                                      self._disk(root), rss.delta, sw.cpu_seconds, _digest(bodies),
                                      client.wire_bytes))
        finally:
            if server is not None:
                server.stop()
        if root is not None:
            shutil.rmtree(root)
        return out

    def sync(self, count: int) -> list[RunMetrics]:
        if self.endpoint is not None:
            raise InvalidArgumentError("sync workloads run against in-process replicas only")
        base, extra = split_sample(self.corpus, count, self.spec.sync_new_messages, self.spec.seed)
        base_root = self.workdir / f"sync-{count}-base"
        remote_root = self.workdir / f"sync-{count}-remote"
        populate(base_root, base)
        shutil.copytree(base_root, remote_root)
        remote = Archive(remote_root, b"bench-remote", durable=False,
                         clock=setup_clock(SETUP_EPOCH + 10 * len(base) + 10))
        for raw in extra:
            remote.append_message("INBOX", raw=raw)
        out = []
        with SyncServer(remote, LOOPBACK) as server:
            for rep in range(self.spec.repetitions):
                local_root = self.workdir / f"sync-{count}-{rep}"
                shutil.copytree(base_root, local_root)
                local = Archive(local_root, b"bench-local", clock=setup_clock(2 * SETUP_EPOCH))
                raw_sock = socket.create_connection(server.endpoint, timeout=60)
                raw_sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock = CountingSocket(raw_sock)
                try:
                    with RssSampler() as rss, Stopwatch() as sw:
                        report = sync_pull(local, sock)
                finally:
                    sock.close()
                if sock.wire_bytes != report.wire_bytes:
                    raise IntegrityError(
                        f"socket counted {sock.wire_bytes} bytes, sync report {report.wire_bytes}")
                uids = local.mailbox_uids("INBOX")[count:]
                received = [local.fetch_message("INBOX", u) for u in uids]
                out.append(RunMetrics("sync", count, rep, sw.latency_ms, report.data_bytes,
                                      report.control_bytes, directory_size(local_root), rss.delta,
                                      sw.cpu_seconds, _digest(received), sock.wire_bytes))
                shutil.rmtree(local_root)
        shutil.rmtree(base_root)
        shutil.rmtree(remote_root)
        return out


def run_benchmark(spec: WorkloadSpec, endpoint: tuple[str, int] | None = None, *,
                  corpus: Sequence[bytes] | None = None, workdir: str | None = None,
                  archive_path: str | None = None, csv_path: str | None = None) -> list[RunMetrics]:
    """Execute ``spec`` and return one :class:`RunMetrics` per run.

    Without ``endpoint`` every run gets a fresh in-process server on
    loopback.  With one, append and fetch runs talk to that server and
    ``archive_path`` (if given) is measured for disk usage.
    """
    if endpoint is not None:
        check_endpoint(endpoint)
    if corpus is None:
        if spec.corpus_path is None:
            raise InvalidArgumentError("no corpus given")
        corpus = load_corpus(spec.corpus_path)
    corpus = list(corpus)
    with tempfile.TemporaryDirectory(prefix="merklemail-bench-", dir=workdir) as tmp:
        runner = _Runner(spec, corpus, Path(tmp), endpoint, archive_path)
        runs: list[RunMetrics] = []
        for count in spec.message_counts:
            log.info("%s workload, %d messages", spec.action, count)
            runs.extend(getattr(runner, spec.action)(count))
    if csv_path is not None:
        write_csv(runs, csv_path)
    return runs
