"""
Flat container of named tensors.

Layout: the header line ``JS3C-CKPT v1``, then per tensor the UTF-8 name
prefixed by its byte length (uint32), the rank (uint32), the dimensions
(uint32 each) and the values as little-endian float64.
"""
import hashlib
import logging
import os
import struct

import numpy as np

from semharq.errors import CheckpointError

HEADER = b"JS3C-CKPT v1\n"


def dumps(tensors):
    """
    Serialize named arrays.

    Parameters
    ----------
    tensors : dict
        Arrays (or Tensors) keyed by name, written in iteration order.

    Returns
    -------
    bytes
    """
    chunks = [HEADER]
    for name, values in tensors.items():
        values = np.asarray(getattr(values, "data", values), dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(np.ascontiguousarray(values).tobytes())
    return b"".join(chunks)


def loads(blob):
    """
    Parse a checkpoint blob.

    Returns
    -------
    dict
        Arrays keyed by name in file order.

    Raises
    ------
    CheckpointError
        If the header is wrong or the blob ends inside a record.
    """
    if not blob.startswith(HEADER):
        raise CheckpointError("Not a JS3C checkpoint: header line missing.")
    offset = len(HEADER)
    tensors = {}

    def take(count):
        nonlocal offset
        if offset + count > len(blob):
            raise CheckpointError(f"Checkpoint truncated at byte {offset}.")
        chunk = blob[offset:offset + count]
        offset += count
        return chunk

    while offset < len(blob):
        (length,) = struct.unpack("<I", take(4))
        try:
            name = take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"Invalid tensor name before byte {offset}: {e}") from e
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = values.astype(np.float64)
    return tensors


def save_checkpoint(tensors, path):
    """Write ``tensors`` to ``path``; parent directories are created."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(dumps(tensors))
    logging.info(f"Checkpoint with {len(tensors)} tensors written to {path}.")


def load_checkpoint(path):
    """Read the named tensors stored at ``path``."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        logging.error(f"Cannot read checkpoint {path}: {e}")
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    try:
        return loads(blob)
    except CheckpointError as e:
        logging.error(f"Checkpoint {path} is corrupt: {e}")
        raise


def checkpoint_digest(tensors, prefixes=None):
    """
    SHA-256 of the serialized tensors, optionally restricted by name prefix.

    Used to assert that frozen components stay byte-identical across a
    training stage.
    """
    if prefixes is not None:
        tensors = {k: v for k, v in tensors.items() if k.startswith(tuple(prefixes))}
    return hashlib.sha256(dumps(tensors)).hexdigest()
