"""Pull-based Merkle sync between archive replicas."""

from .client import (
    FAST_FORWARD,
    FETCH_THEN_MERGE,
    UP_TO_DATE,
    NegotiationPlan,
    SyncReport,
    negotiate,
    sync_bidirectional,
    sync_pull,
)
from .frames import FrameType
from .merge import merge
from .server import SyncServer, serve_session, serve_sync

__all__ = [
    "FAST_FORWARD",
    "FETCH_THEN_MERGE",
    "FrameType",
    "NegotiationPlan",
    "SyncReport",
    "SyncServer",
    "UP_TO_DATE",
    "merge",
    "negotiate",
    "serve_session",
    "serve_sync",
    "sync_bidirectional",
    "sync_pull",
]
