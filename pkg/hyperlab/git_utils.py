from __future__ import annotations

import hashlib
from typing import Mapping

# git's sha256 object format; matches `git hash-object --object-format=sha256`
_FILE_MODE = b"100644"


def blob_hash(data: bytes) -> str:
    return _object_digest(b"blob", data).hex()


def tree_hash(files: Mapping[str, bytes]) -> str:
    """Hash of a flat tree holding ``files``, as git would store it."""
    body = b""
    for name in sorted(files, key=lambda s: s.encode()):
        if not name or "/" in name or "\0" in name:
            raise ValueError(f"invalid tree entry name {name!r}")
        digest = _object_digest(b"blob", files[name])
        body += _FILE_MODE + b" " + name.encode() + b"\0" + digest
    return _object_digest(b"tree", body).hex()


def _object_digest(kind: bytes, data: bytes) -> bytes:
    header = kind + b" " + str(len(data)).encode() + b"\0"
    return hashlib.sha256(header + data).digest()


def format_inputs_hash(files: Mapping[str, bytes]) -> str:
    """``sha256sum``-style listing of every input blob, closed by the tree hash."""
    lines = [f"{blob_hash(files[name])}  {name}" for name in sorted(files)]
    lines.append(f"{tree_hash(files)}  (tree)")
    return "\n".join(lines) + "\n"
