"""Self-describing checkpoint files.

Layout: the first line is a JSON header ``{format_version, created_at,
config_hash, checksum}``; the second line is the canonical JSON payload. The
checksum is the SHA-256 of the canonical header without its checksum field,
a newline, and the payload bytes, so any truncation or flipped byte is caught
before anything is loaded.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
from pathlib import Path
from typing import Any

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


def canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _checksum(header: dict[str, Any], payload: str) -> str:
    body = {k: v for k, v in header.items() if k != "checksum"}
    return hashlib.sha256((canonical(body) + "\n" + payload).encode("utf-8")).hexdigest()


def write_checkpoint(path: str | os.PathLike, payload: dict[str, Any], config_hash: str) -> Path:
    """Atomically write ``payload`` under a checksummed header."""
    path = Path(path)
    body = canonical(payload)
    header: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "config_hash": config_hash,
    }
    header["checksum"] = _checksum(header, body)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(canonical(header) + "\n" + body + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, Any]]:
    """Return ``(header, payload)`` or raise without loading anything partial."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {os.fspath(path)}: {exc.strerror}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointIntegrityError(f"{os.fspath(path)}: not valid UTF-8, file is corrupt") from None
    head, sep, rest = text.partition("\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError:
        raise CheckpointIntegrityError(f"{os.fspath(path)}: unreadable header, file is corrupt") from None
    if not isinstance(header, dict) or "checksum" not in header:
        raise CheckpointIntegrityError(f"{os.fspath(path)}: header lacks a checksum")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{os.fspath(path)}: checkpoint format version {version!r} is not supported (expected {FORMAT_VERSION})"
        )
    body = rest[:-1] if rest.endswith("\n") else rest
    if not sep or _checksum(header, body) != header["checksum"]:
        raise CheckpointIntegrityError(f"{os.fspath(path)}: checksum mismatch, file is truncated or corrupt")
    return header, json.loads(body)
