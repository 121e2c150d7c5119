"""Binary checkpoint container.

Layout: 8 magic bytes, a little-endian uint32 header length, a JSON header
(`CheckpointHeader`) and then one little-endian float32 block per tensor, in
header order. Anything that is not a float tensor (step counters, seeds, loss
history, config echo) travels in the header's `meta` mapping.
"""

import logging
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch
from pydantic import BaseModel, ValidationError

from mmpoint.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"MMPTCKPT"
VERSION = 1
_LEN = struct.Struct("<I")


class TensorEntry(BaseModel):
    name: str
    shape: list[int]
    offset: int

    @property
    def count(self) -> int:
        """Return the number of float32 values in the block."""
        return int(np.prod(self.shape, dtype=np.int64))


class CheckpointHeader(BaseModel):
    version: int
    tensors: list[TensorEntry]
    meta: dict[str, Any] = {}


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict[str, Any]):
    """Write named tensors and a JSON-serializable meta mapping to `path`.

    The file is written to a temporary sibling first and moved into place, so
    an interrupted write never leaves a truncated checkpoint behind.
    """
    path = Path(path)
    entries = []
    blocks = []
    offset = 0
    for name, t in tensors.items():
        a = t.detach().cpu().numpy().astype("<f4", copy=False)
        entries.append(TensorEntry(name=name, shape=list(a.shape), offset=offset))
        blocks.append(np.ascontiguousarray(a).tobytes())
        offset += a.size

    header = CheckpointHeader(version=VERSION, tensors=entries, meta=meta)
    raw = header.model_dump_json().encode()

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(raw)))
        f.write(raw)
        for b in blocks:
            f.write(b)
    os.replace(tmp, path)
    logger.debug("wrote checkpoint %s (%d tensors, %d floats)", path, len(entries), offset)


def read_header(path: str | Path) -> tuple[CheckpointHeader, int]:
    """Return the parsed header of a checkpoint and the byte offset of its data."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            magic = f.read(len(MAGIC))
            if magic != MAGIC:
                raise CheckpointError(path, f"bad magic bytes {magic!r}")
            size = f.read(_LEN.size)
            if len(size) != _LEN.size:
                raise CheckpointError(path, "truncated before header length")
            (n,) = _LEN.unpack(size)
            raw = f.read(n)
    except OSError as e:
        raise CheckpointError(path, str(e)) from e

    if len(raw) != n:
        raise CheckpointError(path, "truncated header")
    try:
        header = CheckpointHeader.model_validate_json(raw)
    except ValidationError as e:
        raise CheckpointError(path, f"unreadable header: {e.error_count()} error(s)") from e
    if header.version != VERSION:
        raise CheckpointError(path, f"version mismatch: file {header.version}, expected {VERSION}")
    return header, len(MAGIC) + _LEN.size + n


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    """Read back what `save_checkpoint` wrote.

    Returns:
        The named float32 tensors and the meta mapping.
    """
    header, start = read_header(path)
    total = sum(e.count for e in header.tensors)
    data = np.fromfile(path, dtype="<f4", offset=start)
    if data.size != total:
        raise CheckpointError(path, f"expected {total} floats after header, found {data.size}")

    tensors = {}
    for e in header.tensors:
        block = data[e.offset : e.offset + e.count].reshape(e.shape)
        tensors[e.name] = torch.from_numpy(block.astype(np.float32))
    return tensors, header.meta
