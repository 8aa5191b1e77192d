"""Read-only sync server: answers HELLO and GETOBJ from one archive."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading

from ..archive import Archive
from ..errors import CorruptObjectError, NotFoundError, ProtocolError
from .frames import (
    PROTO_VERSION,
    ErrCode,
    FrameConn,
    FrameType,
    decode_getobj,
    decode_hello,
    encode_err,
    encode_hello,
    encode_obj,
)

log = logging.getLogger(__name__)


def serve_session(archive: Archive, sock) -> FrameConn:
    """Run one sync session on a connected socket until DONE or EOF."""
    conn = FrameConn(sock)
    try:
        ftype, payload = conn.recv()
        if ftype != FrameType.HELLO:
            conn.send(FrameType.ERR, encode_err(ErrCode.PROTOCOL, "expected HELLO"))
            return conn
        version, peer = decode_hello(payload)
        if version != PROTO_VERSION:
            conn.send(FrameType.ERR, encode_err(ErrCode.VERSION, f"unsupported version {version}"))
            return conn
        conn.send(FrameType.HELLO, encode_hello(archive.device_id))
        conn.send(FrameType.HEAD, archive.head())
        while True:
            ftype, payload = conn.recv()
            if ftype == FrameType.DONE:
                break
            if ftype != FrameType.GETOBJ:
                conn.send(FrameType.ERR, encode_err(ErrCode.PROTOCOL, f"unexpected frame 0x{ftype:02x}"))
                break
            for oid in decode_getobj(payload):
                try:
                    kind, data = archive.store.get(oid)
                except (NotFoundError, CorruptObjectError):
                    conn.send(FrameType.ERR, encode_err(ErrCode.UNKNOWN_OBJECT, oid.hex()))
                    continue
                conn.send(FrameType.OBJ, encode_obj(oid, kind, data))
    except ProtocolError as exc:
        try:
            conn.send(FrameType.ERR, encode_err(ErrCode.PROTOCOL, str(exc)))
        except OSError:
            pass
    except (ConnectionError, OSError) as exc:
        log.debug("sync session ended: %s", exc)
    return conn


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = serve_session(self.server.archive, self.request)
        log.info("sync session from %s: sent %d OBJ frames, %d data bytes",
                 self.client_address, conn.stats.frames_sent["OBJ"], conn.stats.data_bytes)


class SyncServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, archive: Archive, address: tuple[str, int]):
        self.archive = archive
        super().__init__(address, _Handler)

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "SyncServer":
        threading.Thread(target=self.serve_forever, name="sync-server", daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_sync(archive: Archive, listen: tuple[str, int]) -> SyncServer:
    """Start a background sync server and return it."""
    return SyncServer(archive, listen).start()


def socketpair_session(archive: Archive) -> socket.socket:
    """Client end of an in-process session served from ``archive`` in a thread."""
    client, server = socket.socketpair()

    def run():
        with server:
            serve_session(archive, server)

    threading.Thread(target=run, name="sync-pair", daemon=True).start()
    return client
