import json
import struct

import numpy as np
import pytest

from mscl.checkpoint import MAGIC, load_checkpoint, quantize_fp32, save_checkpoint
from mscl.errors import FormatError


class TestCheckpointFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "a.w": quantize_fp32(rng.normal(size=(3, 4))),
            "b": quantize_fp32(rng.normal(size=(7,))),
        }
        meta = {"epoch": 3, "vocab": ["<pad>", "x"]}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tensors, meta)
        loaded, loaded_meta = load_checkpoint(path)
        assert loaded_meta == meta
        for name, arr in tensors.items():
            np.testing.assert_array_equal(loaded[name], arr)
            assert loaded[name].dtype == np.float64

    def test_layout(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"w": np.ones((2, 2))}, {})
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        (version,) = struct.unpack_from("<I", raw, 4)
        assert version == 1
        (header_len,) = struct.unpack_from("<Q", raw, 8)
        header = json.loads(raw[16:16 + header_len])
        assert header["tensors"][0]["name"] == "w"
        assert header["tensors"][0]["shape"] == [2, 2]
        payload = np.frombuffer(raw, dtype="<f4", count=4, offset=16 + header_len)
        np.testing.assert_array_equal(payload, np.ones(4, dtype=np.float32))

    def test_quantization_is_idempotent(self):
        rng = np.random.default_rng(1)
        arr = rng.normal(size=(5, 5))
        once = quantize_fp32(arr)
        np.testing.assert_array_equal(once, quantize_fp32(once))

    def test_save_load_is_lossless_after_quantization(self, tmp_path):
        rng = np.random.default_rng(2)
        arr = quantize_fp32(rng.normal(size=(64,)))
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, {"x": arr}, {})
        loaded, _ = load_checkpoint(path)
        assert loaded["x"].tobytes() == arr.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "v9.ckpt"
        path.write_bytes(MAGIC + struct.pack("<I", 9) + struct.pack("<Q", 2) + b"{}")
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)
