"""Checkpoint and descriptor-dump format tests."""

import numpy as np
import pytest

from lgcn import checkpoint as ck


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {
        "vit.patch.proj_w": rng.normal(size=(12, 4)),
        "fsa.block0.scale": np.array(0.1),
        "head.attn.wo": np.zeros((4, 4), dtype=np.float32),
    }
    header = {"model": {"preset": "toy"}, "ablation": {"disable_fsa": False}}
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(path, params, header)
    loaded, loaded_header = ck.load_checkpoint(path)
    assert loaded_header == header
    assert list(loaded) == list(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name])
        assert loaded[name].dtype == params[name].dtype


def test_checkpoint_preserves_order(tmp_path, rng):
    params = {f"p{i}": rng.normal(size=3) for i in range(20)}
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(path, params, {})
    loaded, _ = ck.load_checkpoint(path)
    assert list(loaded) == list(params)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(ck.CheckpointError, match="not a checkpoint"):
        ck.load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path, rng):
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(path, {"w": rng.normal(size=100)}, {})
    data = path.read_bytes()
    path.write_bytes(data[:-50])
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(path)


def test_group_sha_changes_with_values(rng):
    params = {"vit.a": rng.normal(size=4), "fsa.b": rng.normal(size=4)}
    before = ck.group_sha256(params, "vit.")
    assert before == ck.group_sha256(dict(params), "vit.")
    params2 = dict(params)
    params2["fsa.b"] = params["fsa.b"] + 1
    assert ck.group_sha256(params2, "vit.") == before  # other group untouched
    params3 = dict(params)
    params3["vit.a"] = params["vit.a"] + 1e-12
    assert ck.group_sha256(params3, "vit.") != before


def test_descriptor_dump_roundtrip(tmp_path, rng):
    vecs = rng.normal(size=(7, 16))
    path = tmp_path / "d.bin"
    ck.save_descriptors(path, vecs, precision=8)
    np.testing.assert_array_equal(ck.load_descriptors(path), vecs)


def test_descriptor_dump_single_precision(tmp_path, rng):
    vecs = rng.normal(size=(5, 8))
    path = tmp_path / "d32.bin"
    ck.save_descriptors(path, vecs, precision=4)
    loaded = ck.load_descriptors(path)
    assert loaded.dtype == np.float32
    np.testing.assert_allclose(loaded, vecs, atol=1e-6)


def test_descriptor_dump_rejects_bad_precision(tmp_path, rng):
    with pytest.raises(ck.CheckpointError):
        ck.save_descriptors(tmp_path / "x.bin", rng.normal(size=(2, 2)), precision=2)


def test_descriptor_dump_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"WRONGMAG" + b"\x00" * 24)
    with pytest.raises(ck.CheckpointError, match="not a descriptor dump"):
        ck.load_descriptors(path)
