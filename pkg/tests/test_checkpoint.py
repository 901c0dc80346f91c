import json
import os

import numpy as np
import pytest

from ndoflow import checkpoint as ck


def test_round_trip_preserves_bits(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "w": rng.standard_normal((4, 3)),
        "b": rng.standard_normal(3).astype(np.float32),
        "steps": np.array([100, 200], dtype=np.int64),
        "scalar": np.float64(2.5).reshape(()),
    }
    meta = {"hidden": 64, "layers": 2, "order": 1}
    path = str(tmp_path / "m.ckpt")
    ck.save_checkpoint(path, arrays, meta)
    got, got_meta = ck.load_checkpoint(path)
    assert got_meta == meta
    assert set(got) == set(arrays)
    for k in arrays:
        assert got[k].dtype == arrays[k].dtype
        assert got[k].shape == arrays[k].shape
        np.testing.assert_array_equal(got[k], arrays[k])


def test_save_is_byte_deterministic(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3)}
    p1 = str(tmp_path / "a.ckpt")
    p2 = str(tmp_path / "b.ckpt")
    ck.save_checkpoint(p1, arrays, {"k": 1})
    ck.save_checkpoint(p2, arrays, {"k": 1})
    assert open(p1, "rb").read() == open(p2, "rb").read()
    assert open(p1 + ".json").read() == open(p2 + ".json").read()


def test_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "junk.ckpt")
    with open(path, "wb") as f:
        f.write(b"NOTACKPTxxxxxxxx")
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.load_checkpoint(path)


def test_wrong_version_rejected(tmp_path):
    path = str(tmp_path / "v9.ckpt")
    ck.save_checkpoint(path, {"a": np.zeros(2)}, {})
    blob = bytearray(open(path, "rb").read())
    blob[8] = 9
    with open(path, "wb") as f:
        f.write(blob)
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.load_checkpoint(path)


def test_truncated_file_rejected(tmp_path):
    path = str(tmp_path / "t.ckpt")
    ck.save_checkpoint(path, {"a": np.zeros(100)}, {})
    blob = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(blob[: len(blob) // 2])
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(path)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(ck.CheckpointError):
        ck.save_checkpoint(str(tmp_path / "c.ckpt"),
                           {"a": np.zeros(2, dtype=np.complex128)}, {})


def test_missing_sidecar_gives_empty_meta(tmp_path):
    path = str(tmp_path / "m.ckpt")
    ck.save_checkpoint(path, {"a": np.zeros(2)}, {"x": 1})
    os.unlink(path + ".json")
    _, meta = ck.load_checkpoint(path)
    assert meta == {}


def test_sidecar_is_plain_json(tmp_path):
    path = str(tmp_path / "m.ckpt")
    ck.save_checkpoint(path, {"a": np.zeros(1)}, {"lr": 0.003, "tag": "unit"})
    with open(path + ".json") as f:
        assert json.load(f) == {"lr": 0.003, "tag": "unit"}


def test_overwrite_replaces_cleanly(tmp_path):
    path = str(tmp_path / "m.ckpt")
    ck.save_checkpoint(path, {"a": np.zeros(5)}, {"v": 1})
    ck.save_checkpoint(path, {"a": np.ones(2)}, {"v": 2})
    arrays, meta = ck.load_checkpoint(path)
    np.testing.assert_array_equal(arrays["a"], np.ones(2))
    assert meta == {"v": 2}
    assert not [p for p in os.listdir(tmp_path) if p.endswith(".tmp")]
