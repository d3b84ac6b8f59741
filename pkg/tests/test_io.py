import numpy as np
import pytest

from aewin.numerics import ContainerError, Tensor, load_tensors, save_tensors


def test_round_trip_bitwise(tmp_path, rng):
    tensors = {"a": Tensor(rng.standard_normal((3, 4))), "b.c": Tensor([np.pi, -0.0, 1e-300])}
    path = tmp_path / "t.bin"
    save_tensors(path, tensors, meta={"note": "hello world"})
    back, meta = load_tensors(path)
    assert list(back) == ["a", "b.c"]
    for k in tensors:
        assert back[k].data.tobytes() == tensors[k].data.tobytes()
    assert meta == {"note": "hello world"}


def test_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"NOT-A-CONTAINER\n")
    with pytest.raises(ContainerError):
        load_tensors(path)


def test_truncated_payload(tmp_path, rng):
    path = tmp_path / "t.bin"
    save_tensors(path, {"a": Tensor(rng.standard_normal(10))})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ContainerError):
        load_tensors(path)


def test_deterministic_bytes(tmp_path):
    t = {"w": Tensor(np.arange(6.0).reshape(2, 3))}
    save_tensors(tmp_path / "1", t)
    save_tensors(tmp_path / "2", t)
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()
