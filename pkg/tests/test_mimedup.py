from __future__ import annotations

import base64
import hashlib
import os
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import mime_message
from merklemail.errors import InvalidArgumentError, NotFoundError
from merklemail.mimedup import MessageParts, corpus_stats, dedup_report, message_parts, reassemble, segment


def _check_plan(raw: bytes, plan) -> None:
    pos = 0
    for seg in plan.segments:
        assert seg.start == pos and seg.length > 0
        pos += seg.length
    assert pos == len(raw) == plan.length
    assert reassemble(plan, plan.blobs) == raw


def test_plain_text_is_one_inline_segment():
    raw = b"Subject: hi\r\n\r\nJust text.\r\n"
    plan = segment(raw)
    assert len(plan.segments) == 1
    assert not plan.segments[0].shared
    _check_plan(raw, plan)


def test_empty_message():
    plan = segment(b"")
    assert plan.segments == ()
    assert reassemble(plan, plan.blobs) == b""


def test_large_attachment_becomes_shared_segment():
    attachment = os.urandom(1 << 20)
    raw = mime_message(b"hello there", attachment)
    plan = segment(raw)
    assert len(plan.segments) >= 3
    _check_plan(raw, plan)
    shared = [s for s in plan.segments if s.shared]
    assert len(shared) == 1
    region = raw[shared[0].start:shared[0].start + shared[0].length]
    # exactly the encoded payload: no headers, no boundary, no trailing line break
    assert region == base64.encodebytes(attachment).replace(b"\n", b"\r\n").rstrip(b"\r\n")
    assert base64.b64decode(region) == attachment


def test_identical_attachments_share_a_blob():
    attachment = os.urandom(20000)
    a = segment(mime_message(b"first message", attachment, boundary=b"aaa"))
    b = segment(mime_message(b"a different one", attachment, boundary=b"bbbbbb", name=b"other.bin"))
    ids_a = {s.blob_id for s in a.segments if s.shared}
    ids_b = {s.blob_id for s in b.segments if s.shared}
    assert ids_a == ids_b and len(ids_a) == 1


def test_small_parts_stay_inline():
    raw = mime_message(b"text", os.urandom(100))
    plan = segment(raw, min_part_size=4096)
    assert not any(s.shared for s in plan.segments)
    _check_plan(raw, plan)


def test_nested_multipart_and_lf_endings():
    inner = mime_message(b"inner", os.urandom(9000), boundary=b"inner", eol=b"\n")
    outer = (b"Content-Type: multipart/mixed; boundary=outer\n\n--outer\n" + inner
             + b"\n--outer\nContent-Type: application/zip\n\n" + b"Q" * 5000 + b"\n--outer--\n")
    plan = segment(outer)
    assert sum(s.shared for s in plan.segments) == 2
    _check_plan(outer, plan)


def test_truncated_multipart_roundtrips():
    raw = mime_message(b"text", os.urandom(30000))
    for cut in (len(raw) // 3, len(raw) // 2, len(raw) - 10):
        _check_plan(raw[:cut], segment(raw[:cut]))


def test_segmentation_is_deterministic():
    raw = mime_message(b"x", os.urandom(10000))
    assert segment(raw) == segment(raw)


def test_missing_blob_is_not_found():
    plan = segment(mime_message(b"x", os.urandom(10000)))
    partial = dict(plan.blobs)
    partial.pop(next(s.blob_id for s in plan.segments if s.shared))
    with pytest.raises(NotFoundError):
        reassemble(plan, partial)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=4000))
def test_fuzz_random_bytes_roundtrip(raw):
    _check_plan(raw, segment(raw, min_part_size=16))


_FRAGMENTS = [b"\r\n", b"\n", b"--b", b"--b--", b"Content-Type: multipart/mixed; boundary=b",
              b"Content-Type: multipart/alternative; boundary=\"b\"", b"\r\n\r\n", b"\n\n",
              b"A" * 50, b"=3D", b" ", b"--", b"boundary=", b"\t"]


@settings(max_examples=400, deadline=None)
@given(st.lists(st.one_of(st.sampled_from(_FRAGMENTS), st.binary(max_size=40)), max_size=60))
def test_fuzz_mime_like_structures_roundtrip(pieces):
    raw = b"Content-Type: multipart/mixed; boundary=b\r\n\r\n--b\r\n" + b"".join(pieces)
    _check_plan(raw, segment(raw, min_part_size=8))


# -- corpus statistics --------------------------------------------------------------


def _exact_size_message(tag: bytes, attachment_b64: bytes, total: int) -> bytes:
    """MIME message whose non-attachment bytes are padded so len(raw) == total."""
    head = b"Content-Type: multipart/mixed; boundary=B\r\n\r\n--B\r\n\r\n"
    tail_head = b"\r\n--B\r\nContent-Type: a/b\r\n\r\n"
    tail = b"\r\n--B--"
    pad = total - len(attachment_b64) - len(head) - len(tail_head) - len(tail) - len(tag)
    assert pad >= 0
    return head + tag + b"x" * pad + tail_head + attachment_b64 + tail


def _oracle(accounts: list[list[tuple[int, list[bytes]]]]) -> tuple[Fraction, Fraction, Fraction]:
    """Brute-force byte accounting: each message is (size, [attachment payloads])."""
    total = sum(size for acct in accounts for size, _ in acct)
    attach = sum(len(p) for acct in accounts for _, parts in acct for p in parts)
    intra = []
    for acct in accounts:
        copies: dict[bytes, int] = {}
        dup = 0
        for _, parts in acct:
            for p in parts:
                copies[p] = copies.get(p, 0) + 1
                if copies[p] > 1:
                    dup += len(p)
        intra.append(Fraction(100 * dup, sum(s for s, _ in acct)))
    seen: dict[bytes, int] = {}
    cross = 0
    for acct in accounts:
        for _, parts in acct:
            for p in parts:
                seen[p] = seen.get(p, 0) + 1
                if seen[p] > 1:
                    cross += len(p)
    return Fraction(100 * attach, total), sum(intra) / len(intra), Fraction(100 * cross, total)


def synthetic_two_account_corpus() -> list[list[bytes]]:
    """2 accounts x 2 messages: 100 bytes of body plus one shared 900-byte attachment."""
    attachment = (base64.b64encode(os.urandom(675)))  # exactly 900 encoded bytes
    assert len(attachment) == 900
    accounts = []
    for a in range(2):
        accounts.append([_exact_size_message(b"%d%d" % (a, m), attachment, 1000) for m in range(2)])
    return accounts


def test_synthetic_corpus_matches_oracle_and_hand_values():
    accounts = synthetic_two_account_corpus()
    oracle_input = []
    for acct in accounts:
        rows = []
        for raw in acct:
            start = raw.index(b"a/b\r\n\r\n") + len(b"a/b\r\n\r\n")
            rows.append((len(raw), [raw[start:start + 900]]))
        oracle_input.append(rows)
    expected = _oracle(oracle_input)
    assert expected == (Fraction(90), Fraction(45), Fraction(135, 2))

    report = corpus_stats(accounts, min_part_size=512)
    assert (report.attachment_share, report.intra_account_duplicate_share,
            report.cross_account_duplicate_share) == (90.0, 45.0, 67.5)
    assert report.account_count == 2 and report.total_bytes == 4000


def test_random_corpora_agree_with_oracle():
    rng = random.Random(5)
    pool = [base64.b64encode(rng.randbytes(rng.randint(3000, 6000))) for _ in range(6)]
    for _ in range(20):
        accounts, oracle_input = [], []
        for _a in range(rng.randint(1, 4)):
            msgs, rows = [], []
            for _m in range(rng.randint(1, 6)):
                att = rng.choice(pool)
                raw = _exact_size_message(b"m", att, len(att) + rng.randint(200, 400))
                msgs.append(raw)
                rows.append((len(raw), [att]))
            accounts.append(msgs)
            oracle_input.append(rows)
        report = corpus_stats(accounts, min_part_size=1024)
        want = tuple(float(v) for v in _oracle(oracle_input))
        got = (report.attachment_share, report.intra_account_duplicate_share, report.cross_account_duplicate_share)
        assert got == pytest.approx(want, rel=1e-12)


def test_no_attachments_gives_zero_shares():
    report = corpus_stats([[b"Subject: a\r\n\r\nhello", b"Subject: b\r\n\r\nworld"]])
    assert (report.attachment_share, report.intra_account_duplicate_share,
            report.cross_account_duplicate_share) == (0, 0, 0)


def test_empty_corpus_is_rejected():
    with pytest.raises(InvalidArgumentError):
        corpus_stats([])


def test_adding_a_duplicate_never_lowers_duplicate_shares():
    rng = random.Random(9)
    accounts = [[MessageParts(5000, ((b"a", 3000),)), MessageParts(4000, ())],
                [MessageParts(6000, ((b"b", 2000),)), MessageParts(2500, ((b"a", 2400),))]]
    for _ in range(60):
        before = dedup_report(accounts)
        acct = rng.randrange(len(accounts))
        digest, size = rng.choice([p for m in accounts[acct] for p in m.parts])
        # one more copy of an attachment this account already holds
        accounts[acct] = accounts[acct] + [MessageParts(size, ((digest, size),))]
        after = dedup_report(accounts)
        assert after.cross_account_duplicate_share >= before.cross_account_duplicate_share
        assert after.intra_account_duplicate_share >= before.intra_account_duplicate_share
        assert 0 <= after.attachment_share <= 100


def test_message_parts_reports_shared_digests():
    att = os.urandom(12000)
    parts = message_parts(mime_message(b"t", att))
    assert len(parts.parts) == 1
    digest, size = parts.parts[0]
    assert size == len(base64.encodebytes(att).replace(b"\n", b"\r\n").rstrip(b"\r\n"))
    assert len(digest) == 32
    raw = mime_message(b"t", att)
    start = raw.index(b"base64\r\n\r\n") + 10
    assert hashlib.sha256(b"blob %d\0" % size + raw[start:start + size]).digest() == digest
