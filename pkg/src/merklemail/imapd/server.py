"""Minimal IMAP server over an :class:`~merklemail.archive.Archive`."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from dataclasses import dataclass, field

from ..archive import Archive, normalize_flags, validate_mailbox
from ..archive.model import sort_flags
from ..errors import InvalidArgumentError, MerkleMailError, NotFoundError
from .parser import Command, ParseError, format_date_time, literal_marker, parse_command

log = logging.getLogger(__name__)

GREETING = b"* PREAUTH merklemail ready\r\n"
CAPABILITIES = "IMAP4rev1 LITERAL+ UIDPLUS LOGINDISABLED"
MAX_LINE = 8192
MAX_LITERAL = 64 * 1024 * 1024
SYSTEM_FLAG_LIST = "(\\Answered \\Flagged \\Deleted \\Seen \\Draft)"


class _Abort(Exception):
    """Connection must be dropped."""


class _TooBig(Exception):
    def __init__(self, tag: str):
        self.tag = tag


@dataclass
class Session:
    state: str = "authenticated"  # PREAUTH skips the not-authenticated state
    mailbox: str | None = None
    uids: list[int] = field(default_factory=list)
    uid_validity: int = 0


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _flag_list(flags) -> str:
    return "(" + " ".join(sort_flags(flags)) + ")"


class ImapHandler(socketserver.StreamRequestHandler):
    server: "ImapServer"
    disable_nagle_algorithm = True
    wbufsize = 1 << 16  # responses are flushed once per command

    def setup(self):
        super().setup()
        self.archive = self.server.archive
        self.session = Session()

    # -- wire helpers ----------------------------------------------------------

    def send(self, data: bytes | str) -> None:
        if isinstance(data, str):
            data = data.encode("utf-8")
        self.wfile.write(data)

    def line(self, text: str) -> None:
        self.send(text.encode("utf-8") + b"\r\n")

    def _readline(self) -> bytes:
        raw = self.rfile.readline(MAX_LINE + 2)
        if not raw:
            raise _Abort()
        if not raw.endswith(b"\n"):
            # over-long line: drain it, then report
            while raw and not raw.endswith(b"\n"):
                raw = self.rfile.readline(MAX_LINE)
            raise ParseError("*", "line too long")
        return raw.rstrip(b"\r\n") if raw.endswith(b"\r\n") else raw[:-1]

    def read_command(self) -> tuple[bytes, list[bytes]]:
        texts, literals = [], []
        while True:
            raw = self._readline()
            texts.append(raw)
            marker = literal_marker(raw)
            if marker is None:
                return b"".join(texts), literals
            size, sync = marker
            if size > MAX_LITERAL:
                tag = b"".join(texts).split(b" ", 1)[0].decode("ascii", "replace")
                if not sync:
                    self._discard(size)
                    self._readline()
                raise _TooBig(tag)
            if sync:
                self.send(b"+ OK\r\n")
                self.wfile.flush()
            self._quickack()
            data = self.rfile.read(size)
            if len(data) != size:
                raise _Abort()
            literals.append(data)

    def _quickack(self) -> None:
        # Clients that write the literal and its closing CRLF separately with
        # Nagle on would otherwise wait out our delayed ACK on every APPEND.
        if hasattr(socket, "TCP_QUICKACK"):
            try:
                self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_QUICKACK, 1)
            except OSError:
                pass

    def _discard(self, size: int) -> None:
        while size:
            chunk = self.rfile.read(min(size, 1 << 20))
            if not chunk:
                raise _Abort()
            size -= len(chunk)

    # -- main loop ----------------------------------------------------------

    def handle(self):
        self.send(GREETING)
        self.wfile.flush()
        while True:
            try:
                text, literals = self.read_command()
            except _Abort:
                return
            except _TooBig as exc:
                self.line(f"{exc.tag} NO [TOOBIG] literal exceeds {MAX_LITERAL} bytes")
                self.wfile.flush()
                continue
            except ParseError as exc:
                self.line(f"{exc.tag} BAD {exc.reason}")
                self.wfile.flush()
                continue
            except (ConnectionError, OSError):
                return
            try:
                cmd = parse_command(text, literals)
            except ParseError as exc:
                self.line(f"{exc.tag} BAD {exc.reason}")
            else:
                try:
                    keep_going = self.dispatch(cmd)
                except NotFoundError as exc:
                    self.line(f"{cmd.tag} NO {exc}")
                    keep_going = True
                except InvalidArgumentError as exc:
                    self.line(f"{cmd.tag} NO {exc}")
                    keep_going = True
                except MerkleMailError as exc:
                    log.exception("command failed")
                    self.line(f"{cmd.tag} NO [SERVERBUG] {exc}")
                    keep_going = True
                if not keep_going:
                    self.wfile.flush()
                    return
            try:
                self.wfile.flush()
            except OSError:
                return

    def dispatch(self, cmd: Command) -> bool:
        handler = getattr(self, "do_" + cmd.name.lower())
        if cmd.name in ("FETCH", "STORE", "EXPUNGE") and self.session.mailbox is None:
            self.line(f"{cmd.tag} BAD no mailbox selected")
            return True
        return handler(cmd) is not False

    # -- commands ----------------------------------------------------------------

    def do_capability(self, cmd: Command):
        self.line(f"* CAPABILITY {CAPABILITIES}")
        self.line(f"{cmd.tag} OK CAPABILITY completed")

    def do_noop(self, cmd: Command):
        if self.session.mailbox is not None:
            self._refresh(report=True)
        self.line(f"{cmd.tag} OK NOOP completed")

    def do_logout(self, cmd: Command):
        self.line("* BYE merklemail logging out")
        self.line(f"{cmd.tag} OK LOGOUT completed")
        return False

    def do_select(self, cmd: Command):
        self.session.mailbox = None
        head = self.archive.head()
        meta = self.archive.get_meta(cmd.mailbox, head)
        s = self.session
        s.mailbox = validate_mailbox(cmd.mailbox)
        s.uids = self.archive.mailbox_uids(s.mailbox, head)
        s.uid_validity = meta.uid_validity
        self.line(f"* {len(s.uids)} EXISTS")
        self.line("* 0 RECENT")
        self.line(f"* FLAGS {SYSTEM_FLAG_LIST}")
        self.line(f"* OK [PERMANENTFLAGS {SYSTEM_FLAG_LIST[:-1]} \\*)] flags permitted")
        self.line(f"* OK [UIDVALIDITY {meta.uid_validity}] UIDs valid")
        self.line(f"* OK [UIDNEXT {meta.uid_next}] predicted next UID")
        self.line(f"{cmd.tag} OK [READ-WRITE] SELECT completed")

    def do_append(self, cmd: Command):
        if b"\0" in cmd.message:
            self.line(f"{cmd.tag} NO message contains NUL octets")
            return
        if not cmd.message:
            self.line(f"{cmd.tag} NO empty message")
            return
        uid, _ = self.archive.append_message(cmd.mailbox, cmd.flags, cmd.date, cmd.message)
        meta = self.archive.get_meta(cmd.mailbox)
        if self.session.mailbox == validate_mailbox(cmd.mailbox):
            self._refresh(report=True)
        self.line(f"{cmd.tag} OK [APPENDUID {meta.uid_validity} {uid}] APPEND completed")

    def _targets(self, cmd: Command) -> list[tuple[int, int]]:
        """(sequence number, uid) pairs addressed by the command's set."""
        uids = self.session.uids
        if cmd.uid:
            wanted = set(cmd.seqset.select(uids))
            return [(i + 1, u) for i, u in enumerate(uids) if u in wanted]
        return [(n, uids[n - 1]) for n in cmd.seqset.resolve(len(uids))]

    def do_fetch(self, cmd: Command):
        head = self.archive.head()
        items = list(cmd.items)
        if cmd.uid and "UID" not in items:
            items.insert(0, "UID")
        for seq, uid in self._targets(cmd):
            try:
                rec = self.archive.get_record(self.session.mailbox, uid, head)
            except NotFoundError:
                continue
            parts: list[bytes] = []
            for item in items:
                if item == "UID":
                    parts.append(b"UID %d" % uid)
                elif item == "FLAGS":
                    parts.append(b"FLAGS " + _flag_list(rec.flags).encode())
                elif item == "RFC822.SIZE":
                    parts.append(b"RFC822.SIZE %d" % rec.total_length)
                elif item == "INTERNALDATE":
                    parts.append(b"INTERNALDATE " + _quote(format_date_time(rec.internal_date)).encode())
                elif item in ("BODY[]", "BODY.PEEK[]", "RFC822"):
                    body = self.archive.message_bytes(rec)
                    label = b"RFC822" if item == "RFC822" else b"BODY[]"
                    parts.append(label + b" {%d}\r\n" % len(body) + body)
            self.send(b"* %d FETCH (" % seq + b" ".join(parts) + b")\r\n")
        self.line(f"{cmd.tag} OK {'UID ' if cmd.uid else ''}FETCH completed")

    def do_store(self, cmd: Command):
        mailbox = self.session.mailbox
        targets = self._targets(cmd)
        updates, current = {}, {}
        for _seq, uid in targets:
            try:
                flags = self.archive.get_record(mailbox, uid).flags
            except NotFoundError:
                continue
            wanted = set(normalize_flags(cmd.flags))
            if cmd.store_mode == "+":
                new = flags | wanted
            elif cmd.store_mode == "-":
                new = flags - wanted
            else:
                new = wanted
            updates[uid] = new
            current[uid] = frozenset(new)
        self.archive.update_flags(mailbox, updates)
        if not cmd.silent:
            for seq, uid in targets:
                if uid in current:
                    uid_part = f"UID {uid} " if cmd.uid else ""
                    self.line(f"* {seq} FETCH ({uid_part}FLAGS {_flag_list(current[uid])})")
        self.line(f"{cmd.tag} OK {'UID ' if cmd.uid else ''}STORE completed")

    def do_expunge(self, cmd: Command):
        mailbox = self.session.mailbox
        state = self.archive.mailbox_state(mailbox)
        doomed = [u for u, rec in state.messages.items() if "\\Deleted" in rec.flags]
        self.archive.delete_messages(mailbox, doomed)
        self._refresh(report=True)
        self.line(f"{cmd.tag} OK EXPUNGE completed")

    def _refresh(self, report: bool) -> None:
        s = self.session
        new = self.archive.mailbox_uids(s.mailbox)
        gone = set(s.uids) - set(new)
        if report:
            # descending order keeps each reported sequence number valid
            for i in range(len(s.uids), 0, -1):
                if s.uids[i - 1] in gone:
                    self.line(f"* {i} EXPUNGE")
            if len(new) != len(s.uids) - len(gone):
                self.line(f"* {len(new)} EXISTS")
        s.uids = new


class ImapServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, archive: Archive, address: tuple[str, int]):
        self.archive = archive
        super().__init__(address, ImapHandler)

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "ImapServer":
        threading.Thread(target=self.serve_forever, name="imap-server", daemon=True).start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(archive: Archive, listen: tuple[str, int]) -> ImapServer:
    """Start a background IMAP server on ``listen`` and return it."""
    return ImapServer(archive, listen).start()
