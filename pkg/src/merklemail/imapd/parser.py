"""Parser for the IMAP command subset served by :mod:`merklemail.imapd`.

A command arrives as its joined text lines plus the literal payloads in
the order their ``{n}`` / ``{n+}`` markers appear.
"""

from __future__ import annotations

import calendar
import re
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

from ..errors import MerkleMailError

_MONTHS = {m.lower(): i for i, m in enumerate(calendar.month_abbr) if m}
_DATE_TIME = re.compile(
    rb"^[ ]?(\d{1,2})-([A-Za-z]{3})-(\d{4}) (\d{2}):(\d{2}):(\d{2}) ([+-])(\d{2})(\d{2})$"
)
_LITERAL = re.compile(rb"\{(\d+)(\+?)\}$")
_ATOM_SPECIALS = b'(){ "\r\n'

FETCH_ITEMS = {"FLAGS", "RFC822.SIZE", "BODY[]", "BODY.PEEK[]", "INTERNALDATE", "UID", "RFC822"}
FETCH_MACROS = {
    "FAST": ("FLAGS", "INTERNALDATE", "RFC822.SIZE"),
    "ALL": ("FLAGS", "INTERNALDATE", "RFC822.SIZE"),
}


class ParseError(MerkleMailError):
    def __init__(self, tag: str, reason: str):
        self.tag = tag or "*"
        self.reason = reason
        super().__init__(reason)


@dataclass(frozen=True)
class SequenceSet:
    """Ranges of 1-based numbers; ``None`` stands for ``*``."""

    ranges: tuple[tuple[int | None, int | None], ...]

    @classmethod
    def parse(cls, text: str) -> "SequenceSet":
        ranges = []
        for piece in text.split(","):
            bounds = piece.split(":")
            if len(bounds) > 2 or not all(bounds):
                raise ValueError(f"bad sequence set {text!r}")
            vals = []
            for b in bounds:
                if b == "*":
                    vals.append(None)
                elif b.isdigit():
                    n = int(b)
                    if n == 0 or n >= 2**32:
                        raise ValueError("sequence numbers start at 1")
                    vals.append(n)
                else:
                    raise ValueError(f"bad sequence set {text!r}")
            ranges.append((vals[0], vals[-1]))
        return cls(tuple(ranges))

    def _bounds(self, star: int):
        for lo, hi in self.ranges:
            lo = star if lo is None else lo
            hi = star if hi is None else hi
            yield min(lo, hi), max(lo, hi)

    def resolve(self, maximum: int) -> list[int]:
        """Members within 1..maximum, ascending (``*`` = maximum)."""
        if maximum <= 0:
            return []
        out = set()
        for lo, hi in self._bounds(maximum):
            out.update(range(max(lo, 1), min(hi, maximum) + 1))
        return sorted(out)

    def select(self, values: Iterable[int]) -> list[int]:
        """Existing values (e.g. uids) covered by the set; ``*`` = largest value."""
        values = sorted(values)
        if not values:
            return []
        bounds = list(self._bounds(values[-1]))
        return [v for v in values if any(lo <= v <= hi for lo, hi in bounds)]


@dataclass
class Command:
    tag: str
    name: str
    uid: bool = False
    mailbox: str | None = None
    flags: tuple[str, ...] = ()
    date: int | None = None
    message: bytes | None = None
    seqset: SequenceSet | None = None
    items: tuple[str, ...] = ()
    store_mode: str = ""
    silent: bool = False


# -- tokenizer ------------------------------------------------------------------


class _Tokens:
    def __init__(self, text: bytes, literals: Sequence[bytes]):
        self.text = text
        self.pos = 0
        self.literals = list(literals)
        self.lit_index = 0

    def at_end(self) -> bool:
        return self.pos >= len(self.text)

    def space(self) -> None:
        if self.text[self.pos : self.pos + 1] != b" ":
            raise ValueError("expected SP")
        self.pos += 1

    def peek(self) -> bytes:
        return self.text[self.pos : self.pos + 1]

    def atom(self, brackets: bool = False) -> bytes:
        start = self.pos
        depth = 0
        while self.pos < len(self.text):
            c = self.text[self.pos : self.pos + 1]
            if brackets and c == b"[":
                depth += 1
            elif brackets and c == b"]":
                depth -= 1
            elif c in _ATOM_SPECIALS or ord(c) < 0x20 or ord(c) == 0x7F:
                if not (depth > 0 and c == b" "):
                    break
            self.pos += 1
        if self.pos == start:
            raise ValueError("expected atom")
        return self.text[start : self.pos]

    def quoted(self) -> bytes:
        assert self.peek() == b'"'
        self.pos += 1
        out = bytearray()
        while True:
            if self.pos >= len(self.text):
                raise ValueError("unterminated quoted string")
            c = self.text[self.pos]
            self.pos += 1
            if c == 0x22:
                return bytes(out)
            if c == 0x5C:
                if self.pos >= len(self.text) or self.text[self.pos] not in (0x22, 0x5C):
                    raise ValueError("bad escape in quoted string")
                c = self.text[self.pos]
                self.pos += 1
            elif c in (0x0D, 0x0A):
                raise ValueError("CR/LF in quoted string")
            out.append(c)

    def literal(self) -> bytes:
        m = re.compile(rb"\{(\d+)(\+?)\}").match(self.text, self.pos)
        if m is None:
            raise ValueError("expected literal")
        if self.lit_index >= len(self.literals):
            raise ValueError("literal payload missing")
        data = self.literals[self.lit_index]
        if len(data) != int(m.group(1)):
            raise ValueError("literal length mismatch")
        self.lit_index += 1
        self.pos = m.end()
        return data

    def astring(self) -> bytes:
        c = self.peek()
        if c == b'"':
            return self.quoted()
        if c == b"{":
            return self.literal()
        return self.atom(brackets=True)

    def paren_list(self) -> list[bytes]:
        if self.peek() != b"(":
            raise ValueError("expected (")
        self.pos += 1
        items = []
        while self.peek() != b")":
            if self.at_end():
                raise ValueError("unterminated list")
            if items:
                self.space()
            items.append(self.atom(brackets=True))
        self.pos += 1
        return items


def parse_date_time(raw: bytes) -> int:
    m = _DATE_TIME.match(raw)
    if m is None:
        raise ValueError(f"bad date-time {raw!r}")
    day, mon, year, hh, mm, ss, sign, oh, om = m.groups()
    month = _MONTHS.get(mon.decode().lower())
    if month is None:
        raise ValueError(f"bad month {mon!r}")
    ts = calendar.timegm((int(year), month, int(day), int(hh), int(mm), int(ss)))
    offset = (int(oh) * 60 + int(om)) * 60
    return ts - offset if sign == b"+" else ts + offset


def format_date_time(ts: int) -> str:
    t = time.gmtime(ts)
    return f"{t.tm_mday:02d}-{calendar.month_abbr[t.tm_mon]}-{t.tm_year:04d} {t.tm_hour:02d}:{t.tm_min:02d}:{t.tm_sec:02d} +0000"


def _flag_tokens(raw: list[bytes]) -> tuple[str, ...]:
    out = []
    for f in raw:
        text = f.decode("ascii")
        if text.startswith("\\") and not text[1:].isalpha():
            raise ValueError(f"bad flag {text}")
        out.append(text)
    return tuple(out)


def literal_marker(line: bytes) -> tuple[int, bool] | None:
    """``(size, synchronizing)`` if ``line`` ends with a literal marker."""
    m = _LITERAL.search(line)
    if m is None:
        return None
    return int(m.group(1)), m.group(2) != b"+"


def parse_command(text: bytes, literals: Sequence[bytes] = ()) -> Command:
    toks = _Tokens(text, literals)
    tag = ""
    try:
        tag = toks.atom().decode("ascii")
        if tag == "*" or "+" in tag:
            raise ValueError("invalid tag")
        toks.space()
        name = toks.atom().decode("ascii").upper()
        cmd = Command(tag, name)
        if name == "UID":
            toks.space()
            cmd.uid = True
            cmd.name = name = toks.atom().decode("ascii").upper()
            if name not in ("FETCH", "STORE"):
                raise ValueError(f"UID {name} not supported")

        if name in ("CAPABILITY", "NOOP", "LOGOUT", "EXPUNGE"):
            pass
        elif name == "SELECT":
            toks.space()
            cmd.mailbox = toks.astring().decode("utf-8")
        elif name == "APPEND":
            toks.space()
            cmd.mailbox = toks.astring().decode("utf-8")
            toks.space()
            if toks.peek() == b"(":
                cmd.flags = _flag_tokens(toks.paren_list())
                toks.space()
            if toks.peek() == b'"':
                cmd.date = parse_date_time(toks.quoted())
                toks.space()
            cmd.message = toks.literal()
        elif name == "FETCH":
            toks.space()
            cmd.seqset = SequenceSet.parse(toks.atom().decode("ascii"))
            toks.space()
            raw = toks.paren_list() if toks.peek() == b"(" else [toks.atom(brackets=True)]
            items = []
            for item in raw:
                up = item.decode("ascii").upper()
                if up in FETCH_MACROS:
                    items.extend(FETCH_MACROS[up])
                elif up in FETCH_ITEMS:
                    items.append(up)
                else:
                    raise ValueError(f"unsupported fetch item {up}")
            if not items:
                raise ValueError("empty fetch item list")
            cmd.items = tuple(dict.fromkeys(items))
        elif name == "STORE":
            toks.space()
            cmd.seqset = SequenceSet.parse(toks.atom().decode("ascii"))
            toks.space()
            op = toks.atom().decode("ascii").upper()
            m = re.fullmatch(r"([+-]?)FLAGS(\.SILENT)?", op)
            if m is None:
                raise ValueError(f"bad STORE operation {op}")
            cmd.store_mode, cmd.silent = m.group(1), bool(m.group(2))
            toks.space()
            raw = toks.paren_list() if toks.peek() == b"(" else [toks.atom()]
            while not toks.at_end() and toks.peek() == b" ":
                toks.space()
                raw.append(toks.atom())
            cmd.flags = _flag_tokens(raw)
        else:
            raise ValueError(f"unknown command {name}")
        if not toks.at_end():
            raise ValueError("trailing characters")
        return cmd
    except (ValueError, UnicodeDecodeError, IndexError) as exc:
        raise ParseError(tag, str(exc)) from None
