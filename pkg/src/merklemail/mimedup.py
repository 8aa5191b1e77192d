"""MIME-aware message segmentation and attachment de-duplication statistics.

A message is cut into byte ranges.  Large leaf MIME part bodies become
*shared* segments stored as their own blobs (so the same attachment sent
twice is stored once); everything else is concatenated into one *inline*
blob.  Segmentation works on the raw encoded bytes and never fails: input
that does not look like multipart MIME simply yields one inline segment.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence, Union

from .errors import InvalidArgumentError, NotFoundError
from .hashstore import ObjectId, ObjectKind, object_id

DEFAULT_MIN_PART_SIZE = 4096
MAX_DEPTH = 16

_HEADER_END = re.compile(rb"\r?\n\r?\n")
_FOLD = re.compile(rb"\r?\n[ \t]+")
_CONTENT_TYPE = re.compile(rb"^content-type[ \t]*:(.*)$", re.I | re.M)
_BOUNDARY = re.compile(rb"""boundary[ \t]*=[ \t]*(?:"([^"\r\n]*)"|([^;\s"]+))""", re.I)


@dataclass(frozen=True)
class Segment:
    start: int
    length: int
    shared: bool
    blob_id: ObjectId
    offset: int  # position inside the referenced blob


@dataclass(frozen=True)
class SegmentPlan:
    length: int
    segments: tuple[Segment, ...]
    blobs: Mapping[ObjectId, bytes] = field(repr=False)
    part_digests: tuple[tuple[int, ObjectId], ...] = ()

    @property
    def shared_bytes(self) -> int:
        return sum(s.length for s in self.segments if s.shared)


def _header_end(raw: bytes, start: int, end: int) -> tuple[int, int] | None:
    """(end of header block, start of body) or None when there is no blank line."""
    if raw.startswith(b"\r\n", start) or raw.startswith(b"\n", start):
        # empty header block
        return start, start + (2 if raw[start] == 0x0D else 1)
    m = _HEADER_END.search(raw, start, end)
    if m is None:
        return None
    return m.start(), m.end()


def _multipart_boundary(headers: bytes) -> bytes | None:
    m = _CONTENT_TYPE.search(_FOLD.sub(b" ", headers))
    if m is None:
        return None
    value = m.group(1)
    if not value.strip().lower().startswith(b"multipart/"):
        return None
    b = _BOUNDARY.search(value)
    if b is None:
        return None
    boundary = b.group(1) if b.group(1) is not None else b.group(2)
    if not boundary or len(boundary) > 200:
        return None
    return boundary


def _strip_linebreak_before(raw: bytes, pos: int, floor: int) -> int:
    """Position where the line break preceding ``pos`` begins."""
    if pos - 2 >= floor and raw[pos - 2 : pos] == b"\r\n":
        return pos - 2
    if pos - 1 >= floor and raw[pos - 1 : pos] == b"\n":
        return pos - 1
    return pos


def _scan_entity(raw, start, end, min_size, depth, out, counter):
    """Append shared (start, end, part_index) ranges found in one MIME entity."""
    split = _header_end(raw, start, end)
    if split is None:
        return False
    hdr_end, body_start = split
    boundary = _multipart_boundary(raw[start:hdr_end])
    if boundary is None:
        return False
    if depth >= MAX_DEPTH:
        return True
    delim = re.compile(rb"^--" + re.escape(boundary) + rb"(--)?[ \t]*\r?$", re.M)
    matches = [m for m in delim.finditer(raw, body_start, end)]
    for i, m in enumerate(matches):
        if m.group(1):  # close delimiter
            break
        part_start = m.end()
        if raw.startswith(b"\r\n", part_start):
            part_start += 2
        elif raw.startswith(b"\n", part_start):
            part_start += 1
        if i + 1 < len(matches):
            part_end = _strip_linebreak_before(raw, matches[i + 1].start(), part_start)
        else:
            part_end = end  # truncated: no closing delimiter
        if part_start >= part_end:
            continue
        if _scan_entity(raw, part_start, part_end, min_size, depth + 1, out, counter):
            continue
        counter[0] += 1
        psplit = _header_end(raw, part_start, part_end)
        if psplit is None:
            continue
        body = psplit[1]
        if part_end - body >= min_size:
            out.append((body, part_end, counter[0]))
    return True


def segment(raw: bytes, min_part_size: int = DEFAULT_MIN_PART_SIZE) -> SegmentPlan:
    """Split ``raw`` into inline and shared segments; see module docstring."""
    raw = bytes(raw)
    min_part_size = max(1, int(min_part_size))
    shared: list[tuple[int, int, int]] = []
    try:
        _scan_entity(raw, 0, len(raw), min_part_size, 0, shared, [0])
    except (RecursionError, ValueError):
        shared = []
    shared.sort()

    inline_chunks: list[bytes] = []
    layout: list[tuple[int, int, bool, int]] = []  # start, length, shared, part index
    pos = 0
    for s, e, idx in shared:
        if s < pos:  # overlapping ranges mean the scan was confused; ignore this part
            continue
        if s > pos:
            layout.append((pos, s - pos, False, 0))
            inline_chunks.append(raw[pos:s])
        layout.append((s, e - s, True, idx))
        pos = e
    if pos < len(raw):
        layout.append((pos, len(raw) - pos, False, 0))
        inline_chunks.append(raw[pos:])

    blobs: dict[ObjectId, bytes] = {}
    inline = b"".join(inline_chunks)
    inline_id = object_id(ObjectKind.BLOB, inline)
    if inline:
        blobs[inline_id] = inline

    segments = []
    digests = []
    inline_off = 0
    for start, length, is_shared, idx in layout:
        if is_shared:
            payload = raw[start : start + length]
            pid = object_id(ObjectKind.BLOB, payload)
            blobs[pid] = payload
            segments.append(Segment(start, length, True, pid, 0))
            digests.append((idx, pid))
        else:
            segments.append(Segment(start, length, False, inline_id, inline_off))
            inline_off += length
    return SegmentPlan(len(raw), tuple(segments), blobs, tuple(digests))


BlobSource = Union[Mapping[ObjectId, bytes], Callable[[ObjectId], bytes]]


def reassemble(plan, blobs: BlobSource) -> bytes:
    """Rebuild a message from segment references.

    ``plan`` is a :class:`SegmentPlan` or any iterable of objects carrying
    ``blob_id``, ``offset`` and ``length``.
    """
    segments = plan.segments if hasattr(plan, "segments") else plan
    lookup = blobs if callable(blobs) else None
    cache: dict[ObjectId, bytes] = {}
    out = []
    for seg in segments:
        data = cache.get(seg.blob_id)
        if data is None:
            try:
                data = lookup(seg.blob_id) if lookup else blobs[seg.blob_id]
            except KeyError:
                raise NotFoundError(f"blob {seg.blob_id} missing") from None
            cache[seg.blob_id] = data
        chunk = data[seg.offset : seg.offset + seg.length]
        if len(chunk) != seg.length:
            raise NotFoundError(f"blob {seg.blob_id} shorter than referenced range")
        out.append(chunk)
    return b"".join(out)


# -- corpus statistics ---------------------------------------------------


@dataclass(frozen=True)
class MessageParts:
    """Byte accounting view of one message: its size and its shared parts."""

    total: int
    parts: tuple[tuple[bytes, int], ...]  # (digest, size)


@dataclass(frozen=True)
class DedupReport:
    account_count: int
    total_bytes: int
    attachment_share: float
    intra_account_duplicate_share: float
    cross_account_duplicate_share: float

    def as_row(self) -> dict[str, object]:
        return {
            "accounts": self.account_count,
            "total_bytes": self.total_bytes,
            "attachment_pct": self.attachment_share,
            "intra_dup_pct": self.intra_account_duplicate_share,
            "cross_dup_pct": self.cross_account_duplicate_share,
        }


def message_parts(raw: bytes, min_part_size: int = DEFAULT_MIN_PART_SIZE) -> MessageParts:
    plan = segment(raw, min_part_size)
    return MessageParts(len(raw), tuple((bytes(s.blob_id), s.length) for s in plan.segments if s.shared))


def _pct(num: int, den: int) -> Fraction:
    return Fraction(100 * num, den) if den else Fraction(0)


def dedup_report(accounts: Sequence[Sequence[MessageParts]]) -> DedupReport:
    """Attachment / duplicate shares from pre-segmented messages."""
    if not accounts:
        raise InvalidArgumentError("corpus_stats needs at least one account")
    total = attach = cross_dup = 0
    cross_seen: set[bytes] = set()
    intra_shares = []
    for account in accounts:
        acct_total = acct_dup = 0
        seen: set[bytes] = set()
        for msg in account:
            acct_total += msg.total
            for digest, size in msg.parts:
                attach += size
                if digest in seen:
                    acct_dup += size
                seen.add(digest)
                if digest in cross_seen:
                    cross_dup += size
                cross_seen.add(digest)
        total += acct_total
        intra_shares.append(_pct(acct_dup, acct_total))
    return DedupReport(
        account_count=len(accounts),
        total_bytes=total,
        attachment_share=float(_pct(attach, total)),
        intra_account_duplicate_share=float(sum(intra_shares) / len(intra_shares)),
        cross_account_duplicate_share=float(_pct(cross_dup, total)),
    )


def corpus_stats(
    accounts: Sequence[Iterable[bytes]], min_part_size: int = DEFAULT_MIN_PART_SIZE
) -> DedupReport:
    """Attachment share and intra/cross-account duplicate shares, in percent."""
    return dedup_report([[message_parts(m, min_part_size) for m in account] for account in accounts])
