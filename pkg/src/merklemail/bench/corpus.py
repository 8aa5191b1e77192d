"""Mail corpora: loading mbox/Maildir inputs, seeded sampling, synthesis."""

from __future__ import annotations

import base64
import mailbox
import os
import random
import textwrap
from pathlib import Path
from typing import Iterator, Sequence

from ..errors import InvalidArgumentError


def _is_maildir(path: Path) -> bool:
    return path.is_dir() and (path / "cur").is_dir() and (path / "new").is_dir()


def _maildir_messages(path: Path) -> Iterator[bytes]:
    for sub in ("cur", "new"):
        for f in sorted((path / sub).iterdir()):
            if f.is_file() and not f.name.startswith("."):
                yield f.read_bytes()


def _mbox_messages(path: Path) -> Iterator[bytes]:
    box = mailbox.mbox(path, create=False)
    try:
        for key in box.keys():
            yield box.get_bytes(key)
    finally:
        box.close()


def _looks_like_mbox(path: Path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(5) == b"From "


def iter_corpus(path: str | os.PathLike) -> Iterator[bytes]:
    """Raw messages under ``path`` in a stable order.

    ``path`` may be an mbox file, a Maildir, or a directory tree holding any
    mix of both (visited in sorted order).
    """
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"corpus path {path} does not exist")
    if path.is_file():
        if not _looks_like_mbox(path):
            raise InvalidArgumentError(f"{path} is not an mbox file")
        yield from _mbox_messages(path)
        return
    if _is_maildir(path):
        yield from _maildir_messages(path)
        return
    for child in sorted(path.iterdir()):
        if child.name.startswith("."):
            continue
        if child.is_dir() or _looks_like_mbox(child):
            yield from iter_corpus(child)


def load_corpus(path: str | os.PathLike) -> list[bytes]:
    return [m for m in iter_corpus(path) if m]


def gen_archive(corpus: str | os.PathLike | Sequence[bytes], n: int, seed: int) -> list[bytes]:
    """Uniform sample of ``n`` messages without replacement, shuffled by ``seed``."""
    messages = load_corpus(corpus) if isinstance(corpus, (str, os.PathLike)) else list(corpus)
    if n <= 0:
        raise InvalidArgumentError("message count must be positive")
    if n > len(messages):
        raise InvalidArgumentError(f"corpus holds {len(messages)} messages, {n} requested")
    return random.Random(seed).sample(messages, n)


def split_sample(corpus: Sequence[bytes], n: int, extra: int, seed: int) -> tuple[list[bytes], list[bytes]]:
    """A base sample of ``n`` plus ``extra`` further messages disjoint from it."""
    if n + extra > len(corpus):
        raise InvalidArgumentError(f"corpus holds {len(corpus)} messages, {n + extra} requested")
    picked = random.Random(seed).sample(range(len(corpus)), n + extra)
    return [corpus[i] for i in picked[:n]], [corpus[i] for i in picked[n:]]


def write_maildir(messages: Sequence[bytes], out: str | os.PathLike) -> Path:
    """Write messages as ``out/cur/NNNNNN.eml`` preserving their order."""
    out = Path(out)
    for sub in ("cur", "new", "tmp"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(len(messages))))
    for i, raw in enumerate(messages):
        (out / "cur" / f"{i:0{width}d}.eml").write_bytes(raw)
    return out


# -- synthetic corpus ------------------------------------------------------------

_WORDS = (
    "the of and to in a is that for it as was with be by on not he this are or his from at which "
    "but have an they you were her she there been one all we their has would when if so no will "
    "gas power trading contract deal price market energy pipeline capacity schedule meeting "
    "report please attached review agreement legal credit risk desk forward curve volume "
    "thanks regards call tomorrow week monday friday update draft final comments changes"
).split()
_NAMES = ["jeff", "kenneth", "sara", "vince", "louise", "mark", "tana", "kay", "chris", "susan",
          "john", "steven", "sally", "richard", "kate", "daren", "gerald", "elizabeth"]
_EXTS = [("pdf", "application/pdf"), ("doc", "application/msword"),
         ("xls", "application/vnd.ms-excel"), ("ppt", "application/vnd.ms-powerpoint"),
         ("zip", "application/zip")]


def _sentence(rng: random.Random) -> str:
    words = [rng.choice(_WORDS) for _ in range(rng.randint(6, 18))]
    return " ".join(words).capitalize() + "."


def _body_text(rng: random.Random, size: int) -> str:
    paras, length = [], 0
    while length < size:
        para = " ".join(_sentence(rng) for _ in range(rng.randint(2, 6)))
        paras.append(textwrap.fill(para, 76))
        length += len(para)
    return "\r\n\r\n".join(paras).replace("\n", "\r\n").replace("\r\r\n", "\r\n")


def _attachment(rng: random.Random, size: int) -> tuple[str, str, bytes]:
    ext, ctype = rng.choice(_EXTS)
    name = f"{rng.choice(_WORDS)}_{rng.randint(1, 9999)}.{ext}"
    return name, ctype, rng.randbytes(size)


def synthesize_message(rng: random.Random, index: int, attachment_pool: list | None = None,
                       attach_prob: float = 0.35, dup_prob: float = 0.15) -> bytes:
    """One Enron-flavoured RFC 2822 message with CRLF line endings."""
    sender, rcpt = rng.sample(_NAMES, 2)
    day = 1 + index % 28
    headers = [
        f"Message-ID: <{index}.{rng.getrandbits(40)}.JavaMail.evans@thyme>",
        f"Date: Mon, {day:d} Apr 2001 {rng.randint(0, 23):02d}:{rng.randint(0, 59):02d}:00 -0700 (PDT)",
        f"From: {sender}@enron.com",
        f"To: {rcpt}@enron.com",
        f"Subject: {' '.join(rng.choice(_WORDS) for _ in range(rng.randint(2, 7)))}",
        "MIME-Version: 1.0",
    ]
    text = _body_text(rng, int(rng.lognormvariate(7.0, 0.8)) + 80)
    if rng.random() >= attach_prob:
        headers += ["Content-Type: text/plain; charset=us-ascii", "Content-Transfer-Encoding: 7bit"]
        return ("\r\n".join(headers) + "\r\n\r\n" + text + "\r\n").encode()

    boundary = f"----=_Part_{index}_{rng.getrandbits(32)}"
    headers.append(f'Content-Type: multipart/mixed; boundary="{boundary}"')
    parts = [
        "Content-Type: text/plain; charset=us-ascii\r\nContent-Transfer-Encoding: 7bit\r\n\r\n" + text
    ]
    for _ in range(1 if rng.random() < 0.8 else 2):
        if attachment_pool and rng.random() < dup_prob:
            name, ctype, data = rng.choice(attachment_pool)
        else:
            size = min(int(rng.lognormvariate(10.3, 0.9)), 1 << 20)
            name, ctype, data = _attachment(rng, max(size, 512))
            if attachment_pool is not None:
                attachment_pool.append((name, ctype, data))
        encoded = base64.encodebytes(data).decode().replace("\n", "\r\n").rstrip("\r\n")
        parts.append(
            f'Content-Type: {ctype}; name="{name}"\r\n'
            "Content-Transfer-Encoding: base64\r\n"
            f'Content-Disposition: attachment; filename="{name}"\r\n\r\n' + encoded
        )
    body = "".join(f"--{boundary}\r\n{p}\r\n" for p in parts) + f"--{boundary}--\r\n"
    return ("\r\n".join(headers) + "\r\n\r\nThis is a multi-part message in MIME format.\r\n\r\n" + body).encode()


def synthesize_corpus(count: int, seed: int = 0, **kwargs) -> list[bytes]:
    """``count`` deterministic synthetic messages (attachments sometimes repeat)."""
    rng = random.Random(seed)
    pool: list = []
    return [synthesize_message(rng, i, pool, **kwargs) for i in range(count)]
