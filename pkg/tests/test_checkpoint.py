"""Round-trip and corruption tests for the binary checkpoint format."""

import numpy as np
import pytest

from mdet.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from mdet.errors import FormatError


def _sample():
    rng = np.random.default_rng(7)
    return {
        "embed.projection": rng.standard_normal((12, 8)).astype(np.float32),
        "embed.bias": rng.standard_normal(8).astype(np.float32),
        "head.scalar": np.float64(3.25).reshape(()),
        "stack.0.a_log": rng.standard_normal(4),
    }


def test_round_trip_bitwise(tmp_path):
    path = tmp_path / "model.mdet"
    src = _sample()
    save_checkpoint(path, src)
    back = load_checkpoint(path)
    assert list(back) == list(src)  # insertion order preserved
    for name, arr in src.items():
        assert back[name].dtype == arr.dtype
        assert back[name].shape == arr.shape
        assert arr.tobytes() == back[name].tobytes()


def test_double_round_trip_identical_bytes(tmp_path):
    p1, p2 = tmp_path / "a.mdet", tmp_path / "b.mdet"
    save_checkpoint(p1, _sample())
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.mdet"
    path.write_bytes(b"NOPE!" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "model.mdet"
    save_checkpoint(path, _sample())
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "model.mdet"
    save_checkpoint(path, _sample())
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(FormatError):
        save_checkpoint(tmp_path / "x.mdet", {"a": np.arange(3)})


def test_empty_checkpoint(tmp_path):
    path = tmp_path / "empty.mdet"
    save_checkpoint(path, {})
    assert load_checkpoint(path) == {}
    assert path.read_bytes()[:5] == MAGIC
