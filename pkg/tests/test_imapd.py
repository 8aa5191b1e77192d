from __future__ import annotations

import imaplib
import re
import socket
import threading

import pytest

from merklemail.imapd import GREETING, ImapServer, ParseError, SequenceSet, parse_command
from merklemail.imapd.parser import format_date_time, literal_marker, parse_date_time


# -- parser ------------------------------------------------------------------------------


def test_parse_append_with_quoted_mailbox():
    cmd = parse_command(b'a APPEND "My Box" {3}', [b"abc"])
    assert (cmd.tag, cmd.name, cmd.mailbox, cmd.message) == ("a", "APPEND", "My Box", b"abc")


def test_parse_append_with_flags_and_date():
    cmd = parse_command(b'a1 APPEND INBOX (\\Seen work) "05-Jan-2024 10:00:00 +0100" {5+}', [b"hello"])
    assert cmd.flags == ("\\Seen", "work")
    assert cmd.date == parse_date_time(b"05-Jan-2024 09:00:00 +0000")
    assert format_date_time(cmd.date) == "05-Jan-2024 09:00:00 +0000"


def test_parse_fetch_set_and_items():
    cmd = parse_command(b"a FETCH 2:4,7 (BODY[] FLAGS)")
    assert cmd.seqset.resolve(10) == [2, 3, 4, 7]
    assert cmd.items == ("BODY[]", "FLAGS")
    uid = parse_command(b"b UID FETCH 1:* FAST")
    assert uid.uid and uid.items == ("FLAGS", "INTERNALDATE", "RFC822.SIZE")


def test_sequence_zero_is_rejected():
    with pytest.raises(ParseError) as exc:
        parse_command(b"a FETCH 0 (FLAGS)")
    assert exc.value.tag == "a"


def test_sequence_set_semantics():
    s = SequenceSet.parse("5:2,*")
    assert s.resolve(9) == [2, 3, 4, 5, 9]
    assert SequenceSet.parse("3:*").select([1, 4, 9]) == [4, 9]
    assert SequenceSet.parse("*").select([]) == []


def test_parse_store_variants():
    cmd = parse_command(b"t STORE 1:3 +FLAGS.SILENT (\\Deleted)")
    assert (cmd.store_mode, cmd.silent, cmd.flags) == ("+", True, ("\\Deleted",))
    cmd = parse_command(b"t UID STORE 4 FLAGS \\Seen")
    assert cmd.uid and cmd.store_mode == "" and cmd.flags == ("\\Seen",)


@pytest.mark.parametrize("line", [b"", b"tag", b"a BOGUS", b"a SELECT", b"a FETCH 1 (BODY[1])",
                                  b"a STORE 1 XFLAGS (\\Seen)", b"a APPEND INBOX", b"a NOOP extra",
                                  b"a UID EXPUNGE", b'a SELECT "unterminated'])
def test_malformed_commands(line):
    with pytest.raises(ParseError):
        parse_command(line)


def test_literal_marker():
    assert literal_marker(b"a APPEND INBOX {12}") == (12, True)
    assert literal_marker(b"a APPEND INBOX {12+}") == (12, False)
    assert literal_marker(b"a NOOP") is None


# -- wire ----------------------------------------------------------------------------------


@pytest.fixture
def server(make_archive):
    archive = make_archive()
    srv = ImapServer(archive, ("127.0.0.1", 0)).start()
    yield srv
    srv.stop()


class Wire:
    """Raw-socket client that returns transcripts."""

    def __init__(self, endpoint):
        self.sock = socket.create_connection(endpoint, timeout=10)
        self.buf = b""
        self.greeting = self.line()

    def line(self) -> bytes:
        while b"\r\n" not in self.buf:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise EOFError
            self.buf += chunk
        out, self.buf = self.buf.split(b"\r\n", 1)
        return out + b"\r\n"

    def exact(self, n: int) -> bytes:
        while len(self.buf) < n:
            self.buf += self.sock.recv(65536)
        out, self.buf = self.buf[:n], self.buf[n:]
        return out

    def until_tagged(self, tag: bytes) -> bytes:
        out = b""
        while True:
            ln = self.line()
            out += ln
            m = re.search(rb"\{(\d+)\}\r\n$", ln)
            if m:
                out += self.exact(int(m.group(1)))
                continue
            if ln.startswith(tag + b" "):
                return out

    def cmd(self, text: bytes) -> bytes:
        self.sock.sendall(text + b"\r\n")
        return self.until_tagged(text.split(b" ", 1)[0])

    def append(self, tag: bytes, mailbox: bytes, msg: bytes, flags: bytes = b"", sync: bool = True) -> bytes:
        marker = b"{%d}" % len(msg) if sync else b"{%d+}" % len(msg)
        self.sock.sendall(tag + b" APPEND " + mailbox + (b" " + flags if flags else b"") + b" " + marker + b"\r\n")
        if sync:
            assert self.line() == b"+ OK\r\n"
        self.sock.sendall(msg + b"\r\n")
        return self.until_tagged(tag)


def test_greeting_and_capability(server):
    w = Wire(server.endpoint)
    assert w.greeting == GREETING
    out = w.cmd(b"c CAPABILITY")
    assert out.startswith(b"* CAPABILITY IMAP4rev1")
    assert b"LOGINDISABLED" in out and out.endswith(b"c OK CAPABILITY completed\r\n")


def test_append_fetch_transcript(server):
    w = Wire(server.endpoint)
    msg = b"Subject: hi\r\n\r\nbinary-ish \x01\x7f\xff bytes\r\n.\r\n"
    out = w.append(b"a1", b"INBOX", msg, b"(\\Seen)")
    validity = server.archive.get_meta("INBOX").uid_validity
    assert out == b"a1 OK [APPENDUID %d 1] APPEND completed\r\n" % validity
    w.append(b"a1b", b"INBOX", b"second", sync=False)
    w.append(b"a1c", b"INBOX", b"third!")
    sel = w.cmd(b"s SELECT INBOX")
    assert b"* 3 EXISTS\r\n" in sel and b"[UIDNEXT 4]" in sel and sel.endswith(b"s OK [READ-WRITE] SELECT completed\r\n")
    body = w.cmd(b"a2 FETCH 1 (BODY[])")
    assert body == b"* 1 FETCH (BODY[] {%d}\r\n" % len(msg) + msg + b")\r\na2 OK FETCH completed\r\n"
    flags = w.cmd(b"a3 FETCH 1:* (FLAGS RFC822.SIZE)")
    assert flags == (
        b"* 1 FETCH (FLAGS (\\Seen) RFC822.SIZE %d)\r\n" % len(msg)
        + b"* 2 FETCH (FLAGS () RFC822.SIZE 6)\r\n"
        + b"* 3 FETCH (FLAGS () RFC822.SIZE 6)\r\n"
        + b"a3 OK FETCH completed\r\n"
    )


def test_fetch_does_not_set_seen(server):
    w = Wire(server.endpoint)
    w.append(b"a", b"INBOX", b"unread")
    w.cmd(b"s SELECT INBOX")
    head = server.archive.head()
    w.cmd(b"f FETCH 1 (BODY[])")
    assert server.archive.head() == head
    assert b"FLAGS ()" in w.cmd(b"g FETCH 1 FLAGS")


def test_store_expunge_and_history(server):
    w = Wire(server.endpoint)
    for i in range(3):
        w.append(b"a%d" % i, b"INBOX", b"message %d" % i)
    w.cmd(b"s SELECT INBOX")
    commits = len(server.archive.log())
    out = w.cmd(b"t STORE 1:2 +FLAGS (\\Deleted)")
    assert out == (b"* 1 FETCH (FLAGS (\\Deleted))\r\n* 2 FETCH (FLAGS (\\Deleted))\r\nt OK STORE completed\r\n")
    assert len(server.archive.log()) == commits + 1
    assert w.cmd(b"t2 STORE 1:2 +FLAGS.SILENT (\\Deleted)") == b"t2 OK STORE completed\r\n"
    assert len(server.archive.log()) == commits + 1
    out = w.cmd(b"x EXPUNGE")
    assert out == b"* 2 EXPUNGE\r\n* 1 EXPUNGE\r\nx OK EXPUNGE completed\r\n"
    assert len(server.archive.log()) == commits + 2
    assert w.cmd(b"u UID FETCH 3 (BODY[])").startswith(b"* 1 FETCH (UID 3 BODY[] {9}\r\nmessage 2)")


def test_errors(server):
    w = Wire(server.endpoint)
    assert w.cmd(b"a FETCH 1 (FLAGS)") == b"a BAD no mailbox selected\r\n"
    assert w.cmd(b"b SELECT Missing").startswith(b"b NO ")
    assert w.cmd(b"c FETCH 0").startswith(b"c BAD ")
    assert w.cmd(b"d FROBNICATE").startswith(b"d BAD ")
    assert w.append(b"e", b"INBOX", b"has\0nul").startswith(b"e NO ")
    w.sock.sendall(b"f APPEND INBOX {999999999}\r\n")
    assert w.line().startswith(b"f NO [TOOBIG]")
    w.sock.sendall(b"g " + b"N" * 9000 + b"\r\n")
    assert w.line().startswith(b"* BAD")
    assert w.cmd(b"h NOOP") == b"h OK NOOP completed\r\n"
    assert w.cmd(b"z LOGOUT").startswith(b"* BYE")


def test_imaplib_roundtrip(server, small_corpus):
    host, port = server.endpoint
    client = imaplib.IMAP4(host, port)
    assert client.state == "AUTH"
    for raw in small_corpus[:25]:
        client.literal = raw
        typ, _ = client._simple_command("APPEND", "INBOX")
        assert typ == "OK"
    typ, data = client.select("INBOX")
    assert int(data[0]) == 25
    typ, data = client.fetch("1:*", "(BODY[])")
    bodies = [item[1] for item in data if isinstance(item, tuple)]
    assert bodies == small_corpus[:25]
    client.logout()


def test_concurrent_appends_are_not_lost(server):
    def worker(n):
        w = Wire(server.endpoint)
        for i in range(20):
            assert b"OK [APPENDUID" in w.append(b"w%d" % i, b"INBOX", b"from %d number %d" % (n, i))

    threads = [threading.Thread(target=worker, args=(n,)) for n in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    archive = server.archive
    assert archive.mailbox_uids("INBOX") == list(range(1, 81))
    assert len(archive.log()) == 81
    bodies = {archive.fetch_message("INBOX", u) for u in range(1, 81)}
    assert len(bodies) == 80


def test_select_sees_appends_from_other_sessions(server):
    a, b = Wire(server.endpoint), Wire(server.endpoint)
    a.append(b"x", b"INBOX", b"one")
    a.cmd(b"s SELECT INBOX")
    b.append(b"y", b"INBOX", b"two")
    assert b"* 2 EXISTS" in a.cmd(b"n NOOP")
