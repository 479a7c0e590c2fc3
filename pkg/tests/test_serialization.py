import struct

import numpy as np
import pytest

from aiatrack import serialization as ser
from aiatrack.attention import AttentionConfig, MultiHeadAttention
from aiatrack.model import TrackerConfig, TrackerNet


def test_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 4)), "scalar": np.array(np.pi), "tiny": np.array([5e-324, -0.0, 1e308]),
               "ünï": np.arange(6.0).reshape(1, 2, 3)}
    path = tmp_path / "p.bin"
    ser.save(path, tensors)
    back = ser.load(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == np.asarray(tensors[k], dtype=np.float64).tobytes()


def test_layout_by_hand():
    blob = ser.dumps({"w": np.array([[1.0, 2.0]])})
    expect = (b"AIAT" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"w" + struct.pack("<I", 2)
              + struct.pack("<QQ", 1, 2) + struct.pack("<2d", 1.0, 2.0))
    assert blob == expect


def test_model_roundtrip(tmp_path):
    net = TrackerNet(TrackerConfig(encoder_layers=1), seed=3)
    ser.save(tmp_path / "m.bin", net)
    other = TrackerNet(TrackerConfig(encoder_layers=1), seed=4)
    other.load_state_dict(ser.load(tmp_path / "m.bin"))
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), other.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()


@pytest.mark.parametrize("blob", [b"XXXX" + bytes(8), b"AIAT" + struct.pack("<II", 2, 0), b"AIAT\x01",
                                  ser.dumps({"a": np.ones(3)})[:-1], ser.dumps({"a": np.ones(3)}) + b"\x00"])
def test_malformed_files_rejected(blob):
    with pytest.raises(ser.FormatError):
        ser.loads(blob)


def test_duplicate_names_rejected():
    one = ser.dumps({"a": np.ones(1)})
    body = one[12:]
    blob = b"AIAT" + struct.pack("<II", 1, 2) + body + body
    with pytest.raises(ser.FormatError):
        ser.loads(blob)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_shared_inner_attention_inventory(heads):
    cfg = AttentionConfig(model_dim=16, num_heads=heads, inner_dim=8)
    block = MultiHeadAttention(np.random.default_rng(0), cfg, corr_len=12)
    names = list(ser.loads(ser.dumps(block.state_dict())))
    groups = {n.split(".")[0] for n in names if n.startswith("aia.")}
    assert groups == {"aia"}
    assert sorted(n for n in names if n.startswith("aia.")) == sorted(
        f"aia.{n}" for n, _ in block.aia.named_parameters())
