"""Versioned binary container for models, watermark sets and recovered batches.

Layout::

    b"WMUL" | u32 version | u64 header length | header JSON (utf-8) | f64 blocks

All integers and floats are little-endian. The header lists every array with
its shape and byte offset into the payload, plus the payload SHA-256.
"""

import json
import struct
from typing import Optional

import numpy as np

from .errors import ArchMismatchError, CheckpointCorruptError, CheckpointVersionError
from .models import ArchSpec, Model, build_model
from .utils import sha256_bytes, to_jsonable

MAGIC = b"WMUL"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")


def write_container(path: str, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    index, blocks, offset = [], [], 0
    for name in sorted(arrays):
        block = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(block.shape), "offset": offset})
        blocks.append(block.tobytes())
        offset += block.nbytes
    payload = b"".join(blocks)
    header = json.dumps(
        {"kind": kind, "meta": to_jsonable(meta), "arrays": index, "payload_sha256": sha256_bytes(payload)},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        f.write(payload)


def read_container(path: str, kind: Optional[str] = None) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREAMBLE.size:
        raise CheckpointCorruptError(f"{path}: file too short for a container preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: container version {version}, expected {VERSION}")
    start = _PREAMBLE.size
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header") from exc
    payload = raw[start + header_len:]
    if sha256_bytes(payload) != header.get("payload_sha256"):
        raise CheckpointCorruptError(f"{path}: payload checksum mismatch")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointCorruptError(f"{path}: holds '{header.get('kind')}', expected '{kind}'")
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"]))
        block = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = block.astype(np.float64).reshape(entry["shape"])
    return header["meta"], arrays


def save_checkpoint(model: Model, path: str, metadata: Optional[dict] = None) -> None:
    """Persist architecture, parameters, BN statistics, masks and training metadata."""
    meta = {
        "arch": model.arch.to_dict(),
        "arch_hash": model.arch.hash(),
        "bn": {str(l.index): {"momentum": l.state.momentum, "eps": l.state.eps} for l in model.bn_layers()},
        "metadata": {**model.metadata, **(metadata or {})},
    }
    write_container(path, "model", meta, model.state_arrays())


def load_checkpoint(path: str, expected_arch: Optional[ArchSpec] = None) -> Model:
    meta, arrays = read_container(path, "model")
    arch = ArchSpec.from_dict(meta["arch"])
    if arch.hash() != meta["arch_hash"]:
        raise ArchMismatchError(f"{path}: stored arch hash does not match the stored architecture")
    if expected_arch is not None and expected_arch.hash() != meta["arch_hash"]:
        raise ArchMismatchError(f"{path}: architecture '{arch.name}' differs from the expected '{expected_arch.name}'")
    model = build_model(arch, seed=0)
    model.load_state_arrays(arrays)
    for layer in model.bn_layers():
        stored = meta.get("bn", {}).get(str(layer.index))
        if stored is None:
            raise CheckpointCorruptError(f"{path}: no header entry for BN layer {layer.index}")
        layer.state.momentum = float(stored["momentum"])
        layer.state.eps = float(stored["eps"])
    model.metadata = dict(meta.get("metadata", {}))
    return model


