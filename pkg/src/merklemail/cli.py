"""Command-line entry point.

Option values resolve as: command-line flag, then ``key=value`` config
file (``--config``), then built-in default.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from .archive import Archive
from .bench import (
    EnergyModelParams,
    WorkloadSpec,
    energy_model,
    gen_archive,
    load_corpus,
    report,
    run_benchmark,
    synthesize_corpus,
    write_csv,
    write_maildir,
)
from .errors import InvalidArgumentError, MerkleMailError
from .imapd import ImapServer
from .mimedup import DEFAULT_MIN_PART_SIZE, corpus_stats
from .syncproto import SyncServer, sync_bidirectional, sync_pull

log = logging.getLogger("merklemail")

_DEFAULTS: dict[str, Any] = {}
_TYPES: dict[str, Callable[[str], Any]] = {}


def _endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _counts(text: str) -> list[int]:
    try:
        return [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _opt(parser: argparse.ArgumentParser, flag: str, *, type: Callable = str, default: Any = None, **kw) -> None:
    """Register an option whose default may come from the config file."""
    dest = flag.lstrip("-").replace("-", "_")
    _DEFAULTS[dest] = default
    _TYPES[dest] = type
    parser.add_argument(flag, dest=dest, type=type, default=None, **kw)


def load_config(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidArgumentError(f"{path}:{lineno}: expected key=value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve(args: argparse.Namespace, config: dict[str, str]) -> argparse.Namespace:
    for dest, default in _DEFAULTS.items():
        if getattr(args, dest, "absent") is not None:
            continue
        if dest in config:
            try:
                setattr(args, dest, _TYPES[dest](config[dest]))
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise InvalidArgumentError(f"config key {dest}: {exc}") from None
        else:
            setattr(args, dest, default)
    return args


def build_parser() -> argparse.ArgumentParser:
    _DEFAULTS.clear()
    _TYPES.clear()
    p = argparse.ArgumentParser(prog="merklemail", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value file supplying option defaults")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="sample a corpus into a Maildir")
    _opt(g, "--corpus", help="mbox file, Maildir or directory of either")
    _opt(g, "--count", type=int, help="messages to sample")
    _opt(g, "--seed", type=int, default=0)
    _opt(g, "--out", help="output Maildir")

    s = sub.add_parser("synth", help="write a synthetic Enron-like corpus as a Maildir")
    _opt(s, "--count", type=int, default=1000)
    _opt(s, "--seed", type=int, default=0)
    _opt(s, "--out", help="output Maildir")

    b = sub.add_parser("bench", help="run a benchmark workload")
    b.add_argument("action", choices=["append", "fetch", "sync"])
    _opt(b, "--corpus")
    _opt(b, "--counts", type=_counts, default=[250, 500, 750, 1000, 2000, 3000, 4000, 5000, 6000])
    _opt(b, "--seed", type=int, default=0)
    _opt(b, "--repetitions", type=int, default=5)
    _opt(b, "--sync-new-messages", type=int, default=100)
    _opt(b, "--endpoint", type=_endpoint, help="external IMAP server (append/fetch only)")
    _opt(b, "--archive", help="archive directory of the external server, for disk usage")
    _opt(b, "--workdir", help="scratch directory for in-process archives")
    _opt(b, "--out", help="CSV output path (stdout if omitted)")

    st = sub.add_parser("stats", help="attachment and duplicate shares, one input per account")
    st.add_argument("accounts", nargs="+", help="mbox files or Maildirs")
    _opt(st, "--min-part-size", type=int, default=DEFAULT_MIN_PART_SIZE)

    e = sub.add_parser("energy", help="daily and annual energy estimate")
    _opt(e, "--append-micro-ah", type=float, default=6631.0)
    _opt(e, "--fetch-micro-ah", type=float, default=458.0)
    _opt(e, "--sync-micro-ah-per-100", type=float, default=234.0)
    _opt(e, "--daily-messages", type=float, default=250.0)
    _opt(e, "--pue", type=float, default=2.5)
    _opt(e, "--redundancy-factor", type=float, default=2.0)
    _opt(e, "--voltage", type=float, default=5.1)

    r = sub.add_parser("report", help="series and trend-line data from benchmark CSVs")
    r.add_argument("csv", nargs="+")
    _opt(r, "--out-dir", default="report")

    sv = sub.add_parser("serve", help="run a server in the foreground")
    sv.add_argument("kind", choices=["imap", "sync"])
    _opt(sv, "--archive")
    _opt(sv, "--listen", type=_endpoint)
    _opt(sv, "--device-id", default="")

    sy = sub.add_parser("sync", help="synchronise a local archive with a peer")
    _opt(sy, "--archive")
    _opt(sy, "--peer", help="host:port of a sync server, or a local archive path for bidir")
    _opt(sy, "--mode", type=str, default="pull")
    _opt(sy, "--device-id", default="")
    return p


def _require(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise InvalidArgumentError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _emit(rows: Sequence[Sequence[Any]], out=None, delimiter: str = ",") -> None:
    w = csv.writer(out or sys.stdout, delimiter=delimiter, lineterminator="\n")
    w.writerows(rows)


def cmd_gen(args) -> int:
    _require(args, "corpus", "count", "out")
    messages = gen_archive(args.corpus, args.count, args.seed)
    write_maildir(messages, args.out)
    log.info("wrote %d messages to %s", len(messages), args.out)
    return 0


def cmd_synth(args) -> int:
    _require(args, "out")
    write_maildir(synthesize_corpus(args.count, args.seed), args.out)
    return 0


def cmd_bench(args) -> int:
    _require(args, "corpus")
    spec = WorkloadSpec(args.corpus, args.counts, args.seed, args.action,
                        args.sync_new_messages, args.repetitions)
    runs = run_benchmark(spec, args.endpoint, workdir=args.workdir, archive_path=args.archive)
    if args.out:
        write_csv(runs, args.out)
    else:
        write_csv(runs, sys.stdout)
    return 0


def cmd_stats(args) -> int:
    accounts = [load_corpus(a) for a in args.accounts]
    row = corpus_stats(accounts, args.min_part_size).as_row()
    _emit([list(row), [row[k] if not isinstance(row[k], float) else f"{row[k]:.4f}" for k in row]],
          delimiter="\t")
    return 0


def cmd_energy(args) -> int:
    params = EnergyModelParams(args.append_micro_ah, args.fetch_micro_ah, args.sync_micro_ah_per_100,
                               args.daily_messages, args.pue, args.redundancy_factor, args.voltage)
    est = energy_model(params)
    _emit([["sync_micro_ah", "daily_micro_ah", "daily_wh", "annual_wh"],
           [f"{est.sync_micro_ah:g}", f"{est.daily_micro_ah:g}", f"{est.daily_wh:.6f}", f"{est.annual_wh:.2f}"]])
    return 0


def cmd_report(args) -> int:
    for path in report(args.csv, args.out_dir):
        print(path)
    return 0


def cmd_serve(args) -> int:
    _require(args, "archive", "listen")
    archive = Archive(args.archive, args.device_id.encode())
    cls = ImapServer if args.kind == "imap" else SyncServer
    server = cls(archive, args.listen)
    host, port = server.endpoint
    print(f"{args.kind} server listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_sync(args) -> int:
    _require(args, "archive", "peer")
    local = Archive(args.archive, args.device_id.encode())
    if args.mode == "pull":
        reports = [sync_pull(local, args.peer)]
    elif args.mode == "bidir":
        if not Path(args.peer).is_dir():
            raise InvalidArgumentError("bidir mode needs --peer to be a local archive directory")
        reports = list(sync_bidirectional(local, Archive(args.peer)))
    else:
        raise InvalidArgumentError(f"unknown mode {args.mode!r}")
    rows = [["direction", "plan", "obj_frames", "data_bytes", "control_bytes", "merged", "new_head"]]
    for r in reports:
        rows.append([r.direction, r.plan, r.obj_frames, r.data_bytes, r.control_bytes, int(r.merged), r.new_head.hex()])
    _emit(rows)
    return 0


COMMANDS = {
    "gen": cmd_gen, "synth": cmd_synth, "bench": cmd_bench, "stats": cmd_stats, "energy": cmd_energy,
    "report": cmd_report, "serve": cmd_serve, "sync": cmd_sync,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config) if args.config else {}
        resolve(args, config)
        return COMMANDS[args.command](args)
    except (MerkleMailError, OSError) as exc:
        print(f"merklemail: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
