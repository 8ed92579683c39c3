import struct

import numpy as np
import pytest

from saim import checkpoint as ck


def sample():
    rng = np.random.default_rng(0)
    return ck.Checkpoint(
        {"a.weight": rng.standard_normal((3, 4)).astype(np.float32), "b": np.float32([1.5]),
         "s": np.zeros((), np.float32)},
        {"kind": "train", "step": 7},
    )


def test_round_trip_and_layout():
    c = sample()
    data = ck.encode(c)
    assert data[:8] == b"SAIMCKPT"
    assert struct.unpack("<II", data[8:16]) == (1, 3)
    assert struct.unpack("<H", data[16:18]) == (8,)
    assert data[18:26] == b"a.weight"
    back = ck.decode(data)
    assert back.meta == c.meta
    for k in c.tensors:
        np.testing.assert_array_equal(back.tensors[k], c.tensors[k])
        assert back.tensors[k].shape == c.tensors[k].shape


def test_encode_is_canonical(tmp_path):
    c = sample()
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    ck.save(p1, c)
    ck.save(p2, ck.load(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_and_version():
    data = bytearray(ck.encode(sample()))
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.decode(b"NOTACKPT" + bytes(data[8:]))
    data[8] = 9
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.decode(bytes(data))


@pytest.mark.parametrize("cut", [5, 17, 30, -3])
def test_truncation_names_offset(cut):
    data = ck.encode(sample())
    with pytest.raises(ck.CheckpointError) as e:
        ck.decode(data[:cut])
    assert e.value.offset is not None and "offset" in str(e.value)


def test_trailing_bytes_rejected():
    with pytest.raises(ck.CheckpointError, match="trailing"):
        ck.decode(ck.encode(sample()) + b"\0")


def test_plan_noise_must_be_float32_exact():
    assert ck.plan_tensors("p", np.array([0.5, 0.25]))["p.noise"].dtype == np.float32
    with pytest.raises(ck.CheckpointError):
        ck.plan_tensors("p", np.array([0.1]))
