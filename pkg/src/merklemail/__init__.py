"""Revision-controlled, content-addressed email archive with IMAP and Merkle sync."""

__version__ = "0.1.0"
