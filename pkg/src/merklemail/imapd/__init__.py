"""Minimal IMAP front-end: APPEND/FETCH plus the commands needed to reach them."""

from .parser import Command, ParseError, SequenceSet, parse_command
from .server import GREETING, ImapServer, serve

__all__ = ["Command", "GREETING", "ImapServer", "ParseError", "SequenceSet", "parse_command", "serve"]
