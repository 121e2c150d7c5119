import json
import struct

import pytest
import torch

from mmpoint.checkpoint import MAGIC, load_checkpoint, read_header, save_checkpoint
from mmpoint.errors import CheckpointError


@pytest.fixture
def tensors() -> dict[str, torch.Tensor]:
    g = torch.Generator().manual_seed(0)
    return {
        "encoder.weight": torch.randn(16, 6, 1, 1, generator=g),
        "encoder.bias": torch.randn(16, generator=g),
        "optim.0.step": torch.tensor(10.0),
    }


def test_roundtrip(tmp_path, tensors):
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, tensors, {"step": 10, "history": [1.5, 1.25]})
    loaded, meta = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for name, t in tensors.items():
        assert torch.equal(loaded[name], t)
    assert meta == {"step": 10, "history": [1.5, 1.25]}
    assert not (tmp_path / "state.ckpt.tmp").exists()


def test_header_offsets(tmp_path, tensors):
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, tensors, {})
    header, start = read_header(path)
    assert [e.offset for e in header.tensors] == [0, 96, 112]
    assert path.stat().st_size == start + 4 * 113


def test_bad_magic(tmp_path, tensors):
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, tensors, {})
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncated_data(tmp_path, tensors):
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, tensors, {})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="expected 113 floats"):
        load_checkpoint(path)


def test_truncated_header(tmp_path, tensors):
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, tensors, {})
    path.write_bytes(path.read_bytes()[: len(MAGIC) + 10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "future.ckpt"
    raw = json.dumps({"version": 99, "tensors": [], "meta": {}}).encode()
    path.write_bytes(MAGIC + struct.pack("<I", len(raw)) + raw)
    with pytest.raises(CheckpointError, match="version mismatch"):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")
