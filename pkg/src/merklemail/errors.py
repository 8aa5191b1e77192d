"""Exception hierarchy shared by every merklemail subsystem."""


class MerkleMailError(Exception):
    """Base class for all errors raised by this package."""


class NotFoundError(MerkleMailError, KeyError):
    """An object, commit, mailbox or message does not exist."""

    def __str__(self) -> str:
        return Exception.__str__(self)


class CorruptObjectError(MerkleMailError):
    """Stored bytes no longer hash to the id they are filed under."""

    def __init__(self, object_id, reason: str = "digest mismatch"):
        self.object_id = object_id
        super().__init__(f"corrupt object {object_id}: {reason}")


class StoreError(MerkleMailError):
    """Fatal I/O failure inside the object store."""


class RecoveryError(MerkleMailError):
    """Archive metadata (e.g. the HEAD file) is unreadable."""


class InvalidArgumentError(MerkleMailError, ValueError):
    """Caller supplied an argument outside the operation's contract."""


class IntegrityError(MerkleMailError):
    """An object closure required for an operation is incomplete."""


class ProtocolError(MerkleMailError):
    """A peer violated the sync wire protocol."""


class IncompatibleArchiveError(ProtocolError):
    """Two archives share no root commit and can never be merged."""


class EndpointUnreachableError(MerkleMailError):
    """A benchmark target server could not be contacted."""
