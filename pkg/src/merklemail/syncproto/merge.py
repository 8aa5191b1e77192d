"""Deterministic three-way merge of two archive heads.

Rules, applied per mailbox and uid:

1. a change on one side only is taken;
2. add/modify beats delete (a delete is recoverable from history);
3. both sides modified the same message: flags are unioned and the later
   internal date kept;
4. two different messages under one uid: the one from the side with the
   larger commit id moves to the mailbox's next free uid;
5. mailbox meta: ``uid_next`` is the max needed, ``uid_validity`` the min.

Only subtrees whose ids differ between the two heads are visited.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..archive import Archive, EntryKind, MailboxMeta, MessageRecord, uid_path
from ..archive.model import META_NAME
from ..errors import IncompatibleArchiveError, IntegrityError, NotFoundError
from ..hashstore import ObjectId


@dataclass(frozen=True)
class _Triple:
    base: ObjectId | None
    local: ObjectId | None
    remote: ObjectId | None


def _entries(archive: Archive, tree: ObjectId | None) -> dict:
    if tree is None:
        return {}
    return {e.name: e for e in archive.read_tree(tree)}


def _diff_records(archive, base, local, remote, out: dict[bytes, _Triple]) -> None:
    """Collect leaf entries whose local and remote ids differ."""
    b, l, r = _entries(archive, base), _entries(archive, local), _entries(archive, remote)
    for name in sorted(set(l) | set(r) | set(b)):
        be, le, re_ = b.get(name), l.get(name), r.get(name)
        lid = le.id if le else None
        rid = re_.id if re_ else None
        if lid == rid:
            continue
        kinds = {e.kind for e in (be, le, re_) if e is not None}
        if kinds == {EntryKind.SUBTREE}:
            _diff_records(archive, be.id if be else None, lid, rid, out)
        else:
            out[name] = _Triple(be.id if be else None, lid, rid)


def _merge_flags(a: MessageRecord, b: MessageRecord) -> MessageRecord:
    rec = a.with_flags(a.flags | b.flags)
    if b.internal_date > a.internal_date:
        rec = MessageRecord(rec.uid, b.internal_date, rec.flags, rec.segments, rec.total_length, rec.part_digests)
    return rec


def merge_mailbox(archive: Archive, base: ObjectId | None, local: ObjectId, remote: ObjectId,
                  local_commit: ObjectId, remote_commit: ObjectId) -> ObjectId:
    """Merged mailbox tree id for two diverged versions of one mailbox."""
    diffs: dict[bytes, _Triple] = {}
    _diff_records(archive, base, local, remote, diffs)
    diffs.pop(META_NAME, None)

    def record(oid):
        return archive.read_record(oid) if oid is not None else None

    changes: dict[tuple[bytes, ...], object] = {}
    displaced: list[MessageRecord] = []

    for name, t in sorted(diffs.items()):
        uid = int(name)
        if t.local == t.base:
            chosen = record(t.remote)
        elif t.remote == t.base:
            chosen = record(t.local)
        elif t.local is None:
            chosen = record(t.remote)
        elif t.remote is None:
            chosen = record(t.local)
        else:
            lrec, rrec = record(t.local), record(t.remote)
            if lrec.same_content(rrec):
                # merge flags in a fixed order so both merge directions agree
                first, second = sorted((lrec, rrec), key=lambda r: r.encode())
                chosen = _merge_flags(first, second)
            else:
                keep_local = local_commit < remote_commit
                chosen = lrec if keep_local else rrec
                displaced.append(rrec if keep_local else lrec)
        if chosen is None:
            changes[uid_path(uid)] = None
        else:
            if t.local is None or chosen != record(t.local):
                changes[uid_path(uid)] = (EntryKind.RECORD, archive.write_record(chosen))

    lmeta = archive.read_meta(_meta_id(archive, local))
    rmeta = archive.read_meta(_meta_id(archive, remote))
    # both uid_next values exceed every uid either side ever assigned
    next_free = max(lmeta.uid_next, rmeta.uid_next)
    for rec in sorted(displaced, key=lambda r: (r.uid, r.encode())):
        changes[uid_path(next_free)] = (EntryKind.RECORD, archive.write_record(rec.with_uid(next_free)))
        next_free += 1
    meta = MailboxMeta(next_free, min(lmeta.uid_validity, rmeta.uid_validity))
    if meta != lmeta:
        changes[(META_NAME,)] = (EntryKind.META, archive.write_meta(meta))
    return archive.apply_changes(local, changes)


def _meta_id(archive: Archive, mailbox_tree: ObjectId) -> ObjectId:
    for e in archive.read_tree(mailbox_tree):
        if e.name == META_NAME:
            return e.id
    raise IntegrityError(f"mailbox tree {mailbox_tree} has no meta entry")


def merge_trees(archive: Archive, base_root: ObjectId, local_root: ObjectId, remote_root: ObjectId,
                local_commit: ObjectId, remote_commit: ObjectId) -> ObjectId:
    b, l, r = _entries(archive, base_root), _entries(archive, local_root), _entries(archive, remote_root)
    changes: dict[tuple[bytes, ...], object] = {}
    for name in sorted(set(l) | set(r)):
        bid = b[name].id if name in b else None
        lid = l[name].id if name in l else None
        rid = r[name].id if name in r else None
        if lid == rid or rid == bid or rid is None:
            continue
        if lid == bid or lid is None:
            merged = rid
        else:
            merged = merge_mailbox(archive, bid, lid, rid, local_commit, remote_commit)
        changes[(name,)] = (EntryKind.SUBTREE, merged)
    if not changes:
        return local_root
    return archive.apply_changes(local_root, changes)


def merge(archive: Archive, local: ObjectId, remote: ObjectId) -> ObjectId:
    """Commit reconciling ``local`` and ``remote``; HEAD is not moved.

    Returns an existing commit when one side already contains the other.
    """
    if local == remote:
        return local
    try:
        base = archive.find_merge_base(local, remote)
    except NotFoundError as exc:
        raise IntegrityError(f"merge input missing: {exc}") from None
    if base is None:
        raise IncompatibleArchiveError("commits share no common ancestor")
    if base == remote:
        return local
    if base == local:
        return remote
    lc, rc, bc = archive.read_commit(local), archive.read_commit(remote), archive.read_commit(base)
    try:
        root = merge_trees(archive, bc.root_tree, lc.root_tree, rc.root_tree, local, remote)
    except NotFoundError as exc:
        raise IntegrityError(f"merge closure incomplete: {exc}") from None
    return archive.commit_merge((local, remote), root, max(lc.timestamp, rc.timestamp))
