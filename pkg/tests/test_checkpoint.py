"""Checkpoint container: bit-exact round trips and format rejection."""

import struct

import numpy as np
import pytest
import torch

from sketchchat.errors import AlignmentError, FormatError
from sketchchat.nn import load_checkpoint, save_checkpoint
from sketchchat.nn.checkpoint import MAGIC, load_module_arrays, module_arrays


def bits(a: np.ndarray) -> np.ndarray:
    return a.astype("<f4").view(np.uint32)


class TestRoundTrip:
    def test_tensors_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "w": rng.normal(0, 100, (7, 3)).astype(np.float32),
            "b": np.array([-0.0, 1e-38, 3.4e38, 1.0], dtype=np.float32),
            "scalarish": np.float32(2.5).reshape(()),
        }
        path = tmp_path / "ck.bin"
        save_checkpoint(path, tensors)
        back = load_checkpoint(path)
        assert back.version == 1
        assert set(back.tensors) == set(tensors)
        for name in tensors:
            np.testing.assert_array_equal(bits(back.tensors[name]), bits(np.asarray(tensors[name])))

    def test_meta_and_optimizer(self, tmp_path):
        path = tmp_path / "ck.bin"
        save_checkpoint(
            path,
            {"w": np.ones(2, dtype=np.float32)},
            meta={"epoch": 3, "note": "best"},
            optimizer={"m.0": np.full(2, 0.5, dtype=np.float32)},
        )
        back = load_checkpoint(path)
        assert back.meta == {"epoch": 3, "note": "best"}
        np.testing.assert_array_equal(back.optimizer["m.0"], np.full(2, 0.5, dtype=np.float32))

    def test_optimizer_optional(self, tmp_path):
        path = tmp_path / "ck.bin"
        save_checkpoint(path, {"w": np.zeros(1, dtype=np.float32)})
        assert load_checkpoint(path).optimizer is None

    def test_module_state(self, tmp_path):
        torch.manual_seed(0)
        src = torch.nn.Linear(4, 3)
        dst = torch.nn.Linear(4, 3)
        path = tmp_path / "ck.bin"
        save_checkpoint(path, module_arrays(src))
        load_module_arrays(dst, load_checkpoint(path).tensors)
        torch.testing.assert_close(dst.weight, src.weight)
        torch.testing.assert_close(dst.bias, src.bias)

    def test_module_mismatch(self, tmp_path):
        path = tmp_path / "ck.bin"
        save_checkpoint(path, module_arrays(torch.nn.Linear(4, 3)))
        with pytest.raises(AlignmentError):
            load_module_arrays(torch.nn.Linear(5, 3), load_checkpoint(path).tensors)
        with pytest.raises(AlignmentError):
            load_module_arrays(torch.nn.Linear(4, 3, bias=True).double().requires_grad_(False), {})


class TestFormatRejection:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        header = b'{"version": 99, "meta": {}, "tensors": [], "optimizer": null}'
        path = tmp_path / "v99.bin"
        path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "trunc.bin"
        path.write_bytes(MAGIC + struct.pack("<Q", 1000) + b"{}")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.bin"
        save_checkpoint(path, {"w": np.ones(8, dtype=np.float32)})
        data = path.read_bytes()
        path.write_bytes(data[:-4])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_garbage_header(self, tmp_path):
        body = b"not json at all!"
        path = tmp_path / "garbage.bin"
        path.write_bytes(MAGIC + struct.pack("<Q", len(body)) + body)
        with pytest.raises(FormatError):
            load_checkpoint(path)
