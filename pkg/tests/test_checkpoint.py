import struct

import numpy as np
import pytest

from revkd.checkpoint import MAGIC, CheckpointFormatError, load_checkpoint, save_checkpoint
from revkd.model import ModelConfig, init_weights


@pytest.fixture
def saved(tmp_path, tiny_config):
    w = init_weights(tiny_config)
    path = tmp_path / "m.ckpt"
    save_checkpoint(w, tiny_config, path)
    return path, w


def test_round_trip_is_bit_exact(saved, tiny_config):
    path, w = saved
    loaded, cfg = load_checkpoint(path)
    assert cfg == tiny_config
    assert list(loaded) == list(w)
    for k in w:
        assert loaded[k].data.tobytes() == w[k].data.tobytes()
    assert path.read_bytes()[:4] == MAGIC


def test_save_is_deterministic(saved, tmp_path, tiny_config):
    path, w = saved
    other = tmp_path / "again.ckpt"
    save_checkpoint(w, tiny_config, other)
    assert other.read_bytes() == path.read_bytes()


def _corrupt(path, offset, payload):
    blob = bytearray(path.read_bytes())
    blob[offset:offset + len(payload)] = payload
    path.write_bytes(bytes(blob))


def test_bad_magic(saved):
    path, _ = saved
    _corrupt(path, 0, b"XXXX")
    with pytest.raises(CheckpointFormatError) as info:
        load_checkpoint(path)
    assert info.value.field == "magic"


def test_bad_version(saved):
    path, _ = saved
    _corrupt(path, 4, struct.pack("<I", 9))
    with pytest.raises(CheckpointFormatError) as info:
        load_checkpoint(path)
    assert info.value.field == "version"


def test_truncated_payload(saved):
    path, _ = saved
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointFormatError) as info:
        load_checkpoint(path)
    assert info.value.field == "payload"


def test_shape_mismatch_names_tensor(tmp_path, tiny_config):
    w = init_weights(tiny_config)
    other = ModelConfig(**{**tiny_config.to_dict(), "d_model": 6})
    path = tmp_path / "bad.ckpt"
    save_checkpoint(w, other, path)
    with pytest.raises(CheckpointFormatError) as info:
        load_checkpoint(path)
    assert "tok_embedding" in info.value.field


def test_garbage_header(saved):
    path, _ = saved
    _corrupt(path, 12, b"\xff\xfe")
    with pytest.raises(CheckpointFormatError) as info:
        load_checkpoint(path)
    assert info.value.field == "header"


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_loaded_weights_are_frozen_by_default(saved):
    loaded, _ = load_checkpoint(saved[0])
    assert not any(t.requires_grad for t in loaded.values())
    loaded, _ = load_checkpoint(saved[0], requires_grad=True)
    assert all(t.requires_grad and np.all(t.grad == 0) for t in loaded.values())
