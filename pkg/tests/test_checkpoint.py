"""Checkpoint binary format round trips and error handling."""

import numpy as np
import pytest

from modecast.checkpoint import load_checkpoint, save_checkpoint


class TestRoundTrip:
    def test_arrays_and_meta_exact(self, tmp_path, rng):
        arrays = {
            "model.w": rng.normal(size=(4, 3)).astype(np.float32),
            "model.b": rng.normal(size=3),
            "opt.step": np.array([17], dtype=np.int64),
            "flags": np.array([True, False, True]),
            "scalar": np.array(2.5),
        }
        meta = {"epoch": 9, "best_val": 0.123456789012345,
                "rng": {"state": 2 ** 100, "inc": 3}}
        path = tmp_path / "run.ckpt"
        save_checkpoint(str(path), arrays, meta)
        loaded, loaded_meta = load_checkpoint(str(path))
        assert loaded_meta == meta
        assert set(loaded) == set(arrays)
        for name, arr in arrays.items():
            assert loaded[name].dtype == arr.dtype
            assert np.array_equal(loaded[name], arr)

    def test_loaded_arrays_writable(self, tmp_path):
        path = tmp_path / "w.ckpt"
        save_checkpoint(str(path), {"a": np.zeros(3)})
        arrays, _ = load_checkpoint(str(path))
        arrays["a"][0] = 1.0

    def test_empty_checkpoint(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        save_checkpoint(str(path), {}, None)
        arrays, meta = load_checkpoint(str(path))
        assert arrays == {} and meta == {}


class TestErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(str(path))

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v.ckpt"
        save_checkpoint(str(path), {"a": np.zeros(2)})
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(str(path))

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_checkpoint(str(path), {"a": np.arange(100.0)})
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 40])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(str(path))

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(ValueError, match="dtype"):
            save_checkpoint(str(tmp_path / "c.ckpt"),
                            {"z": np.zeros(2, dtype=np.complex128)})
