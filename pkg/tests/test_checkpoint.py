import numpy as np
import pytest

from flowdistill.checkpoint import checkpoint_load, checkpoint_save


def _params(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "w1": rng.standard_normal((3, 5)).astype(np.float32),
        "bias": rng.standard_normal(5).astype(np.float32),
        "mix": rng.standard_normal((4, 2, 2)).astype(np.float32),
        "gain": np.float32(1.25).reshape(()),
    }


def test_save_load_round_trip_bit_exact(tmp_path):
    params = _params()
    path = tmp_path / "model.ckpt"
    checkpoint_save(params, path, meta={"config_hash": "abc123", "seed": 7})
    back, meta = checkpoint_load(path)
    assert set(back) == set(params)
    for key in params:
        assert back[key].dtype == np.float32
        assert np.array_equal(back[key], params[key]), key
    assert meta["config_hash"] == "abc123"
    assert meta["seed"] == "7"


def test_manifest_entry_count_matches(tmp_path):
    params = _params(1)
    path = tmp_path / "model.ckpt"
    checkpoint_save(params, path)
    text = path.read_bytes().split(b"---\n")[0].decode()
    lines = [ln for ln in text.splitlines() if ln.startswith("entry ")]
    assert len(lines) == len(params)
    assert text.splitlines()[0] == f"ckpt-v1 {len(params)}"


def test_missing_expected_entry_named(tmp_path):
    params = {"w1": np.zeros((2, 2), np.float32)}
    path = tmp_path / "model.ckpt"
    checkpoint_save(params, path)
    with pytest.raises(KeyError, match="mix"):
        checkpoint_load(path, expect=("w1", "mix"))


def test_truncated_blob_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    checkpoint_save(_params(2), path)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="truncated"):
        checkpoint_load(tmp_path / "bad.ckpt")


def test_corrupt_manifest_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    checkpoint_save(_params(3), path)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"junk " + raw)
    with pytest.raises(ValueError):
        checkpoint_load(tmp_path / "bad.ckpt")
    head, _, blob = raw.partition(b"---\n")
    wrong = head.replace(b"ckpt-v1 4", b"ckpt-v1 9")
    (tmp_path / "count.ckpt").write_bytes(wrong + b"---\n" + blob)
    with pytest.raises(ValueError, match="entries"):
        checkpoint_load(tmp_path / "count.ckpt")


def test_shape_count_mismatch_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    checkpoint_save({"w": np.zeros((2, 3), np.float32)}, path)
    raw = path.read_bytes().replace(b"entry w 2x3 6 0", b"entry w 2x3 7 0")
    (tmp_path / "bad.ckpt").write_bytes(raw)
    with pytest.raises(ValueError, match="mismatch"):
        checkpoint_load(tmp_path / "bad.ckpt")


def test_float64_inputs_are_stored_as_float32(tmp_path):
    path = tmp_path / "model.ckpt"
    values = {"w": np.array([[1.0, 2.0]], dtype=np.float64)}
    checkpoint_save(values, path)
    back, _ = checkpoint_load(path)
    assert back["w"].dtype == np.float32
    assert np.array_equal(back["w"], values["w"].astype(np.float32))
