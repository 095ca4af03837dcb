"""Shared utilities: logging, seeding, hashing and MCP response envelopes."""

import hashlib
import json
import logging
import sys
import zlib
from typing import Any, Optional, Sequence

import numpy as np
from mcp.types import TextContent

from .config import LOG_LEVEL

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level: Optional[str] = None) -> None:
    """Route all package logs to stderr (stdout carries MCP frames and CLI output)."""
    root = logging.getLogger("wmunlearn")
    root.setLevel((level or LOG_LEVEL).upper())
    if not any(getattr(h, "_wmunlearn", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._wmunlearn = True
        root.addHandler(handler)


def derive_seed(seed: int, *keys: Any) -> int:
    """Derive an independent 63-bit seed from a base seed and a key path.

    Keys are hashed with crc32, so the result does not depend on PYTHONHASHSEED.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, (int, np.integer)):
            words.append(int(key) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(key).encode("utf-8")))
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def to_jsonable(obj: Any) -> Any:
    """Convert numpy scalars/arrays (recursively) into JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def create_error_response(error: str, data: dict = None) -> Sequence[TextContent]:
    """Create a standardized error response."""
    result = {
        "successful": False,
        "error": error,
    }
    if data:
        result["data"] = to_jsonable(data)
    return [TextContent(type="text", text=json.dumps(result, indent=2))]


def create_success_response(data: dict) -> Sequence[TextContent]:
    """Create a standardized success response."""
    result = {
        "successful": True,
        "data": to_jsonable(data),
    }
    return [TextContent(type="text", text=json.dumps(result, indent=2))]
