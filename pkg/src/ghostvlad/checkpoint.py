"""Named-array binary container ("GDNV").

Layout, all little-endian:

    magic   4 bytes  b"GDNV"
    version u32      currently 1
    then, until end of file, one record per array:
        name_len u32, name UTF-8 bytes
        rank     u32, dims rank x u64
        dtype    u8   (0 = float32)
        values   raw C-order little-endian floats

Only float32 payloads ship; the reader rejects unknown dtype tags and
truncated files. Helpers are provided to tunnel UTF-8 text (for example
identifier lists) through a float32 array of byte values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GDNV"
VERSION = 1
DTYPE_FLOAT32 = 0


class CheckpointError(ValueError):
    """Raised for malformed or unreadable containers."""


def save_arrays(path, arrays: dict) -> None:
    """Write ``arrays`` (name -> ndarray) to ``path`` in GDNV format.

    Arrays are converted to float32; the write order follows the dict
    order so identical dicts produce identical bytes.
    """
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, array in arrays.items():
        # asarray(order="C") rather than ascontiguousarray: the latter
        # silently promotes rank-0 arrays to rank 1
        data = np.asarray(array, dtype="<f4", order="C")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b"")
        chunks.append(struct.pack("<B", DTYPE_FLOAT32))
        chunks.append(data.tobytes())
    path.write_bytes(b"".join(chunks))


def load_arrays(path) -> dict:
    """Read a GDNV container back into a name -> float32 ndarray dict."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a GDNV container")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 8
    out: dict = {}
    while offset < len(raw):
        offset, name, array = _read_record(raw, offset, path)
        if name in out:
            raise CheckpointError(f"{path}: duplicate record {name!r}")
        out[name] = array
    return out


def _read_record(raw: bytes, offset: int, path) -> tuple:
    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(raw):
            raise CheckpointError(f"{path}: truncated container")
        values = struct.unpack_from(fmt, raw, offset)
        offset += size
        return values

    (name_len,) = take("<I")
    if offset + name_len > len(raw):
        raise CheckpointError(f"{path}: truncated container")
    name = raw[offset : offset + name_len].decode("utf-8")
    offset += name_len
    (rank,) = take("<I")
    dims = take(f"<{rank}Q") if rank else ()
    (dtype_tag,) = take("<B")
    if dtype_tag != DTYPE_FLOAT32:
        raise CheckpointError(f"{path}: unknown dtype tag {dtype_tag} for {name!r}")
    count = 1
    for d in dims:
        count *= d
    nbytes = count * 4
    if offset + nbytes > len(raw):
        raise CheckpointError(f"{path}: truncated values for {name!r}")
    array = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims).copy()
    offset += nbytes
    return offset, name, array


def text_to_array(text: str) -> np.ndarray:
    """UTF-8 bytes of ``text`` as a float32 array (values 0..255, exact)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def array_to_text(array: np.ndarray) -> str:
    """Inverse of ``text_to_array``."""
    return np.asarray(array).astype(np.uint8).tobytes().decode("utf-8")
