import numpy as np
import pytest

from cinelora import checkpoint
from cinelora.model import VideoDiT

from conftest import tiny_config


def test_round_trip_preserves_arrays_and_meta(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], np.float64)}
    checkpoint.write(tmp_path / "x.ckpt", arrays, "test", {"k": [1, 2]})
    got, meta = checkpoint.read(tmp_path / "x.ckpt", "test")
    assert meta == {"k": [1, 2]}
    for k, v in arrays.items():
        assert got[k].dtype == v.dtype and np.array_equal(got[k], v)


def test_identical_content_gives_identical_bytes(tmp_path):
    m = VideoDiT(tiny_config())
    assert checkpoint.save_model(m, tmp_path / "1.ckpt") == checkpoint.save_model(m, tmp_path / "2.ckpt")
    assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()


def test_model_checkpoint_restores_config_and_weights(tmp_path):
    m = VideoDiT(tiny_config(init_seed=3))
    checkpoint.save_model(m, tmp_path / "m.ckpt")
    r = checkpoint.load_model(tmp_path / "m.ckpt")
    assert r.cfg == m.cfg
    assert all(np.array_equal(v, r.state_dict()[k]) for k, v in m.state_dict().items())


def test_corruption_is_detected(tmp_path):
    p = tmp_path / "c.ckpt"
    checkpoint.write(p, {"a": np.ones(16, np.float32)}, "test", {})
    blob = bytearray(p.read_bytes())
    blob[-3] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(checkpoint.CorruptFileError):
        checkpoint.read(p)
    p.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(checkpoint.CorruptFileError):
        checkpoint.read(p)


def test_version_and_kind_are_checked(tmp_path):
    blob = checkpoint.encode({}, "test", {})
    with pytest.raises(checkpoint.CorruptFileError):
        checkpoint.decode(blob, "model")
    bumped = blob.replace(b'"format_version":1', b'"format_version":9')
    with pytest.raises(checkpoint.FormatVersionError):
        checkpoint.decode(bumped)
