import numpy as np
import pytest
import torch

from ssc import checkpoint


def test_round_trip(tmp_path):
    tensors = {
        "a.weight": np.arange(24, dtype=np.float32).reshape(2, 3, 4),
        "b": np.array(3.5, dtype=np.float32),
        "c.bias": np.linspace(-1, 1, 7, dtype=np.float32),
    }
    path = tmp_path / "params.ssck"
    checkpoint.save_checkpoint(path, tensors)
    loaded = checkpoint.load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == np.float32
        np.testing.assert_array_equal(loaded[name], tensors[name])


def test_header_layout(tmp_path):
    path = tmp_path / "p.ssck"
    checkpoint.save_checkpoint(path, {"x": np.zeros((2, 2), dtype=np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == b"SSCK"
    assert int.from_bytes(raw[4:8], "little") == checkpoint.VERSION
    assert int.from_bytes(raw[8:12], "little") == 1  # name length
    assert raw[12:13] == b"x"
    assert int.from_bytes(raw[13:17], "little") == 2  # rank


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ssck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.load_checkpoint(path)


def test_truncated(tmp_path):
    path = tmp_path / "p.ssck"
    checkpoint.save_checkpoint(path, {"x": np.zeros(100, dtype=np.float32)})
    (tmp_path / "t.ssck").write_bytes(path.read_bytes()[:-40])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.load_checkpoint(tmp_path / "t.ssck")


def test_module_round_trip(tmp_path):
    torch.manual_seed(3)
    module = torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3), torch.nn.GroupNorm(1, 4))
    path = tmp_path / "m.ssck"
    checkpoint.save_module(path, module)
    clone = torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3), torch.nn.GroupNorm(1, 4))
    checkpoint.load_module(path, clone)
    for a, b in zip(module.state_dict().values(), clone.state_dict().values()):
        torch.testing.assert_close(a, b)


def test_module_shape_mismatch(tmp_path):
    module = torch.nn.Conv2d(3, 4, 3)
    path = tmp_path / "m.ssck"
    checkpoint.save_module(path, module)
    other = torch.nn.Conv2d(3, 5, 3)
    with pytest.raises(checkpoint.CheckpointError, match="shape mismatch"):
        checkpoint.load_module(path, other)


def test_module_name_mismatch(tmp_path):
    path = tmp_path / "m.ssck"
    checkpoint.save_checkpoint(path, {"unexpected": np.zeros(3, dtype=np.float32)})
    with pytest.raises(checkpoint.CheckpointError, match="names differ"):
        checkpoint.load_module(path, torch.nn.Conv2d(3, 4, 3))
