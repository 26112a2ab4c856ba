"""
Named-tensor checkpoint files.

Layout: an 8-byte little-endian unsigned manifest length, a UTF-8 JSON
manifest ``{name: {dtype, shape, offset, nbytes}, ..., "__meta__": {...}}``,
then the raw little-endian IEEE-754 payload. Offsets count from the first
payload byte.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .config.errors import CheckpointError
from .config.logger import logger
from .config.settings import DTYPES, METADATA_KEY
from .files import atomic_write_bytes
from .tensors import precision_of

HEADER = struct.Struct("<Q")
MANIFEST_FIELDS = ("dtype", "shape", "offset", "nbytes")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    manifest: dict[str, Any] = {}
    chunks = []
    offset = 0
    for name, array in checkpoint.tensors.items():
        dtype_name = precision_of(array.dtype)
        raw = np.ascontiguousarray(array, dtype=np.dtype(DTYPES[dtype_name])).tobytes()
        manifest[name] = {
            "dtype": dtype_name,
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    manifest[METADATA_KEY] = checkpoint.meta
    encoded = json.dumps(manifest).encode("utf-8")
    return HEADER.pack(len(encoded)) + encoded + b"".join(chunks)


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    """
    Writes a checkpoint atomically; an interrupted write leaves any previous file intact.

    Args:
        checkpoint (Checkpoint): Tensors (f32 or f64) and JSON-serialisable metadata.
        path (Path): Destination file.

    Returns:
        Path: The written path.
    """
    atomic_write_bytes(path, encode_checkpoint(checkpoint))
    logger.info(f"Saved checkpoint '{path}' (step {checkpoint.step}, {len(checkpoint.tensors)} tensors)")
    return path


def _entry(name: str, entry: Any, payload_size: int) -> tuple[np.dtype, tuple[int, ...], int, int]:
    if not isinstance(entry, dict):
        raise CheckpointError(name, "manifest entry is not an object")
    for key in MANIFEST_FIELDS:
        if key not in entry:
            raise CheckpointError(f"{name}.{key}", "missing")
    if entry["dtype"] not in DTYPES:
        raise CheckpointError(f"{name}.dtype", f"unsupported dtype {entry['dtype']!r}")
    shape = entry["shape"]
    if not isinstance(shape, list) or not all(isinstance(n, int) and n >= 0 for n in shape):
        raise CheckpointError(f"{name}.shape", f"invalid shape {shape!r}")
    offset, nbytes = entry["offset"], entry["nbytes"]
    if not isinstance(offset, int) or offset < 0:
        raise CheckpointError(f"{name}.offset", f"invalid offset {offset!r}")
    dtype = np.dtype(DTYPES[entry["dtype"]])
    if nbytes != math.prod(shape) * dtype.itemsize:
        raise CheckpointError(f"{name}.nbytes", f"{nbytes} does not match shape {shape} of {entry['dtype']}")
    if offset + nbytes > payload_size:
        raise CheckpointError(f"{name}.offset", f"{offset}+{nbytes} overflows a {payload_size}-byte payload")
    return dtype, tuple(shape), offset, nbytes


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < HEADER.size:
        raise CheckpointError("manifest_length", "file is shorter than its header")
    (length,) = HEADER.unpack_from(raw)
    if HEADER.size + length > len(raw):
        raise CheckpointError("manifest_length", f"{length} bytes declared, file too short")
    try:
        manifest = json.loads(raw[HEADER.size : HEADER.size + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("manifest", f"unreadable JSON: {e}") from None
    if not isinstance(manifest, dict):
        raise CheckpointError("manifest", "not a JSON object")
    meta = manifest.pop(METADATA_KEY, None)
    if not isinstance(meta, dict):
        raise CheckpointError(METADATA_KEY, "missing or not an object")

    payload = memoryview(raw)[HEADER.size + length :]
    tensors = {}
    for name, entry in manifest.items():
        dtype, shape, offset, nbytes = _entry(name, entry, len(payload))
        values = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        tensors[name] = values.reshape(shape).copy()
    return Checkpoint(tensors=tensors, meta=meta)


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Reads and fully validates a checkpoint before returning anything.

    Raises:
        FileNotFoundError: If the file does not exist.
        CheckpointError: Naming the manifest field that is truncated or inconsistent.
    """
    if not path.exists():
        logger.error(f"Error: Checkpoint '{path}' does not exist.")
        raise FileNotFoundError(f"Checkpoint '{path}' does not exist.")
    try:
        return decode_checkpoint(path.read_bytes())
    except CheckpointError as e:
        logger.error(f"Error loading checkpoint '{path}': {e}")
        raise
