import numpy as np
import pytest

from vxl import tensorio
from vxl.errors import FormatError


def test_roundtrip_float64(tmp_path):
    x = np.random.default_rng(0).normal(size=(5, 9))
    p = tmp_path / "t.vxt"
    tensorio.dump_tensor(str(p), x)
    y = tensorio.load_tensor(str(p))
    assert y.dtype == np.float64
    assert np.array_equal(x, y)


def test_roundtrip_float32(tmp_path):
    x = np.random.default_rng(1).normal(size=(3, 4)).astype(np.float32)
    p = tmp_path / "t.vxt"
    tensorio.dump_tensor(str(p), x)
    y = tensorio.load_tensor(str(p))
    assert y.dtype == np.float32
    assert np.array_equal(x, y)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.vxt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError):
        tensorio.load_tensor(str(p))


def test_truncated_payload_rejected(tmp_path):
    x = np.ones((4, 4))
    p = tmp_path / "t.vxt"
    tensorio.dump_tensor(str(p), x)
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        tensorio.load_tensor(str(p))


def test_unknown_precision_code_rejected(tmp_path):
    x = np.ones((2, 2))
    p = tmp_path / "t.vxt"
    tensorio.dump_tensor(str(p), x)
    raw = bytearray(p.read_bytes())
    raw[12] = 7  # precision byte
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        tensorio.load_tensor(str(p))


def test_bundle_roundtrip_preserves_order_and_meta(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {
        "w_q": rng.normal(size=(8, 8)),
        "w_k": rng.normal(size=(8, 4)),
        "gain": rng.normal(size=(1, 8)),
    }
    p = tmp_path / "bundle.vxb"
    tensorio.save_bundle(str(p), tensors, meta={"layers": 2})
    loaded, meta = tensorio.load_bundle(str(p))
    assert list(loaded) == list(tensors)
    assert meta == {"layers": 2}
    for k in tensors:
        assert np.array_equal(loaded[k], tensors[k])
