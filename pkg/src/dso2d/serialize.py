"""Line-delimited record files with 17-significant-digit decimals and FNV-1a content hashes.

Every file starts with a header record carrying ``format_version`` and
``content_hash``; the hash covers the canonical text of all following lines.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import CorruptionError, VersioningError
from .seeding import fnv1a64

FORMAT_VERSION = 1


def fmt_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(x, ".17g")


def dumps(obj) -> str:
    """Canonical JSON text: sorted keys, no spaces, floats with 17 significant digits."""
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + dumps(v) for k, v in sorted(obj.items())) + "}"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def content_hash(lines: list[str]) -> str:
    return format(fnv1a64("\n".join(lines).encode("utf-8")), "016x")


def write_records(path, header: dict, records: list[dict]) -> str:
    """Write header + records; returns the content hash."""
    lines = [dumps(r) for r in records]
    digest = content_hash(lines)
    head = dict(header, format_version=FORMAT_VERSION, content_hash=digest, n_records=len(lines))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join([dumps(head)] + lines) + "\n", encoding="utf-8")
    return digest


def read_records(path) -> tuple[dict, list[dict]]:
    """Read and verify a record file; raises VersioningError or CorruptionError."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorruptionError(f"{path}: empty file")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path}: unreadable header") from exc
    version = head.get("format_version")
    if version != FORMAT_VERSION:
        raise VersioningError(f"{path}: format_version {version!r}, expected {FORMAT_VERSION}")
    body = lines[1:]
    if len(body) != head.get("n_records") or content_hash(body) != head.get("content_hash"):
        raise CorruptionError(f"{path}: content hash mismatch")
    try:
        records = [json.loads(line) for line in body]
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path}: unreadable record") from exc
    return head, records


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
