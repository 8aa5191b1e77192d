from __future__ import annotations

import base64
import itertools

import pytest

from merklemail.archive import Archive
from merklemail.bench.corpus import synthesize_corpus


class TickClock:
    """Deterministic clock advancing one second per call."""

    def __init__(self, start: int = 1_000_000):
        self._it = itertools.count(start)

    def __call__(self) -> float:
        return float(next(self._it))


def mime_message(text: bytes, attachment: bytes, boundary: bytes = b"XYZ", name: bytes = b"a.bin",
                 eol: bytes = b"\r\n") -> bytes:
    """multipart/mixed with a text part and one base64 attachment."""
    payload = base64.encodebytes(attachment).replace(b"\n", eol).rstrip(eol)
    return eol.join([
        b"From: a@example.org",
        b"Subject: test",
        b"MIME-Version: 1.0",
        b'Content-Type: multipart/mixed; boundary="' + boundary + b'"',
        b"",
        b"--" + boundary,
        b"Content-Type: text/plain",
        b"",
        text,
        b"--" + boundary,
        b"Content-Type: application/octet-stream; name=" + name,
        b"Content-Transfer-Encoding: base64",
        b"",
        payload,
        b"--" + boundary + b"--",
        b"",
    ])


@pytest.fixture
def make_archive(tmp_path):
    counter = itertools.count()

    def factory(device: bytes = b"dev", name: str | None = None, clock=None, **kw) -> Archive:
        root = tmp_path / (name or f"archive-{next(counter)}")
        return Archive(root, device, clock=clock or TickClock(), durable=kw.pop("durable", False), **kw)

    return factory


@pytest.fixture(scope="session")
def small_corpus() -> list[bytes]:
    return synthesize_corpus(300, seed=11)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
