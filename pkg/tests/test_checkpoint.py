"""Binary tensor container: bit-exact round trips and corruption handling."""

import numpy as np
import pytest

from vitslim import checkpoint
from vitslim.checkpoint import CheckpointError, load_tensors, save_tensors


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "a.weight": rng.standard_normal((3, 4, 2, 2)).astype(np.float32),
        "a.bias": rng.standard_normal(3).astype(np.float32),
        "scalarish": np.float32(1.5) * np.ones((), dtype=np.float32),
        "empty-name-ok": rng.standard_normal((1,)).astype(np.float32),
    }


def test_round_trip_bit_exact(tmp_path):
    p = tmp_path / "c.ckpt"
    src = sample_tensors()
    save_tensors(p, src, meta={"note": "x", "n": 3})
    got, meta = load_tensors(p)
    assert meta == {"note": "x", "n": 3}
    assert set(got) == set(src)
    for k in src:
        assert got[k].dtype == np.float32
        assert got[k].shape == src[k].shape
        assert got[k].tobytes() == np.ascontiguousarray(src[k]).tobytes()


def test_save_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    save_tensors(a, sample_tensors(), meta={"k": 1})
    save_tensors(b, sample_tensors(), meta={"k": 1})
    assert a.read_bytes() == b.read_bytes()


def test_empty_meta_defaults(tmp_path):
    p = tmp_path / "c.ckpt"
    save_tensors(p, {"x": np.zeros(2, np.float32)})
    _, meta = load_tensors(p)
    assert meta == {}


def test_bad_magic(tmp_path):
    p = tmp_path / "c.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_tensors(p)


def test_bad_version(tmp_path):
    p = tmp_path / "c.ckpt"
    save_tensors(p, {"x": np.zeros(2, np.float32)})
    raw = bytearray(p.read_bytes())
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_tensors(p)


def test_truncation(tmp_path):
    p = tmp_path / "c.ckpt"
    save_tensors(p, sample_tensors())
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) - 5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_tensors(p)


def test_float64_input_downcast(tmp_path):
    p = tmp_path / "c.ckpt"
    save_tensors(p, {"x": np.array([1.0, 2.0], dtype=np.float64)})
    got, _ = load_tensors(p)
    assert got["x"].dtype == np.float32
    np.testing.assert_allclose(got["x"], [1, 2])
