"""
Parameter Checkpoint Files

Binary layout (all integers little-endian):
    magic b"EGB1" | version u32 | record count u64
    per record: name length u32 | name utf-8 | rank u32 | extents u64 * rank | float32 payload
"""

import logging
import struct
from collections import OrderedDict
from typing import Dict, Mapping

import numpy as np

from eyeseg_dg.utils.errors import IntegrityError
from eyeseg_dg.utils.io import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"EGB1"
FORMAT_VERSION = 1


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    """
    Parse a checkpoint blob

    Raises:
        IntegrityError: Bad magic, unsupported version or truncated payload
    """
    if blob[:4] != MAGIC:
        raise IntegrityError(f"Not a checkpoint file (magic {blob[:4]!r})")
    try:
        version, count = struct.unpack_from("<IQ", blob, 4)
        if version != FORMAT_VERSION:
            raise IntegrityError(f"Unsupported checkpoint version {version}")
        offset = 4 + struct.calcsize("<IQ")
        arrays: Dict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, offset)
            offset += 8 * rank
            n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
            payload = blob[offset:offset + n_bytes]
            if len(payload) != n_bytes:
                raise IntegrityError(f"Truncated payload for {name}")
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            offset += n_bytes
    except struct.error as e:
        raise IntegrityError(f"Corrupt checkpoint: {e}") from e
    if offset != len(blob):
        raise IntegrityError(f"{len(blob) - offset} trailing bytes after last record")
    return arrays


def save_checkpoint(path: str, arrays: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(arrays))
    logger.debug(f"Saved checkpoint with {len(arrays)} records to {path}")


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
