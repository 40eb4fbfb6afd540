import zipfile

import pytest
import torch

from multianim.checkpoint import load_into, load_meta, load_tensors, save_tensors
from multianim.errors import DataIOError, FormatError


def test_round_trip_bit_identical(tmp_path):
    g = torch.Generator().manual_seed(0)
    tensors = {"a.weight": torch.randn(3, 4, generator=g), "b": torch.randn(7, generator=g), "s": torch.tensor(2.5)}
    meta = {"phase": "pretrain", "step": 7, "seed": 1}
    path = save_tensors(tmp_path / "x.ckpt", tensors, meta)
    back, got = load_tensors(path)
    assert got == meta == load_meta(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert torch.equal(back[k], tensors[k])


def test_save_is_byte_deterministic(tmp_path):
    tensors = {"w": torch.arange(6, dtype=torch.float32).reshape(2, 3)}
    a = save_tensors(tmp_path / "a.ckpt", tensors, {"step": 1}).read_bytes()
    b = save_tensors(tmp_path / "b.ckpt", tensors, {"step": 1}).read_bytes()
    assert a == b


def test_missing_and_corrupt(tmp_path):
    with pytest.raises(DataIOError):
        load_tensors(tmp_path / "none.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a zip")
    with pytest.raises(DataIOError):
        load_tensors(bad)


def test_wrong_format_version(tmp_path):
    path = tmp_path / "v.ckpt"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("header.json", '{"format": "multianim-checkpoint", "version": 99, "meta": {}, "tensors": []}')
        zf.writestr("tensors.bin", b"")
    with pytest.raises(FormatError, match="v99"):
        load_tensors(path)


def test_truncated_tensor_named(tmp_path):
    path = save_tensors(tmp_path / "t.ckpt", {"big": torch.zeros(10)}, {})
    with zipfile.ZipFile(path) as zf:
        header = zf.read("header.json")
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("header.json", header)
        zf.writestr("tensors.bin", b"\0" * 8)
    with pytest.raises(FormatError, match="big"):
        load_tensors(path)


def test_load_into_names_missing_and_mismatched():
    lin = torch.nn.Linear(3, 2)
    with pytest.raises(FormatError, match="bias"):
        load_into(lin, {"weight": torch.zeros(2, 3)})
    with pytest.raises(FormatError, match="weight"):
        load_into(lin, {"weight": torch.zeros(3, 2), "bias": torch.zeros(2)})
    load_into(lin, {"m.weight": torch.ones(2, 3), "m.bias": torch.zeros(2)}, prefix="m.")
    assert torch.equal(lin.weight, torch.ones(2, 3))
