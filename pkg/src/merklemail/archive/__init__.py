"""Versioned mail archive: Merkle mailbox trees over an append-only commit DAG."""

from .model import (
    EMPTY_TREE_ID,
    Commit,
    EntryKind,
    MailboxMeta,
    MessageRecord,
    SegmentRef,
    TreeEntry,
    normalize_flags,
    uid_path,
)
from .repo import Archive, MailboxState, Snapshot, genesis_commit, init, merge_base, validate_mailbox

__all__ = [
    "Archive",
    "Commit",
    "EMPTY_TREE_ID",
    "EntryKind",
    "MailboxMeta",
    "MailboxState",
    "MessageRecord",
    "SegmentRef",
    "Snapshot",
    "TreeEntry",
    "genesis_commit",
    "init",
    "merge_base",
    "normalize_flags",
    "uid_path",
    "validate_mailbox",
]
