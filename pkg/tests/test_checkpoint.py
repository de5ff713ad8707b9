import json
import zipfile

import numpy as np
import pytest
import torch

from mlnnet.checkpoint import Checkpoint, load_checkpoint, read_archive, save_checkpoint, validate_index
from mlnnet.errors import IntegrityError
from mlnnet.network import NetConfig
from mlnnet.phantom import PhantomConfig, generate_dataset
from mlnnet.training import TrainConfig, train

SMALL_NET = dict(input_size=(32, 32), patch_size=4, embed_dim=8, depths=(2, 2), num_heads=(2, 4), window_size=4)


@pytest.fixture(scope="module")
def ckpt():
    data = generate_dataset(PhantomConfig(seed=0, canvas=(32, 32), cluster_radius_px=6), 4)
    return train(TrainConfig(max_epochs=1, learning_rate=1e-3), NetConfig(**SMALL_NET), data)


def _rewrite(src, dst, manifest=None, blob=None):
    m, b = read_archive(src)
    if manifest is not None:
        m = manifest(m)
    if blob is not None:
        b = blob(b)
    with zipfile.ZipFile(dst, "w") as zf:
        zf.writestr("manifest.json", json.dumps(m))
        zf.writestr("weights.bin", b)
    return dst


def test_save_load_save_byte_identical(ckpt, tmp_path):
    a = save_checkpoint(ckpt, tmp_path / "a.mln")
    b = save_checkpoint(load_checkpoint(a), tmp_path / "b.mln")
    assert a.read_bytes() == b.read_bytes()


def test_roundtrip_is_lossless(ckpt, tmp_path):
    back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "c.mln"))
    assert back.tensors.keys() == ckpt.tensors.keys()
    for k, v in ckpt.tensors.items():
        assert np.array_equal(back.tensors[k], v)
    for s, t in zip(back.signatures, ckpt.signatures):
        assert np.array_equal(s.vectors(True), t.vectors(True))
    x = torch.rand(1, 1, 32, 32)
    assert torch.equal(back.build_model()(x, 2), ckpt.build_model()(x, 2))


def test_archive_layout(ckpt, tmp_path):
    path = save_checkpoint(ckpt, tmp_path / "d.mln")
    with zipfile.ZipFile(path) as zf:
        assert zf.namelist() == ["manifest.json", "weights.bin"]
    m, blob = read_archive(path)
    first = m["tensors"][0]
    raw = np.frombuffer(blob, "<f4", count=first["length"] // 4, offset=first["offset"])
    assert np.array_equal(raw.reshape(first["shape"]), ckpt.tensors[first["name"]])


def test_truncated_blob(ckpt, tmp_path):
    src = save_checkpoint(ckpt, tmp_path / "e.mln")
    bad = _rewrite(src, tmp_path / "bad.mln", blob=lambda b: b[:-8])
    with pytest.raises(IntegrityError, match="covers"):
        load_checkpoint(bad)


def test_overlapping_index(ckpt, tmp_path):
    src = save_checkpoint(ckpt, tmp_path / "f.mln")

    def overlap(m):
        m["tensors"][1]["offset"] -= 4
        return m

    with pytest.raises(IntegrityError, match="overlap"):
        load_checkpoint(_rewrite(src, tmp_path / "bad.mln", manifest=overlap))


def test_signature_count_mismatch(ckpt, tmp_path):
    src = save_checkpoint(ckpt, tmp_path / "g.mln")

    def drop(m):
        m["signatures"] = m["signatures"][:3]
        return m

    with pytest.raises(IntegrityError, match="signatures"):
        load_checkpoint(_rewrite(src, tmp_path / "bad.mln", manifest=drop))


def test_not_a_zip(tmp_path):
    p = tmp_path / "junk.mln"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(IntegrityError):
        load_checkpoint(p)


def test_missing_tensor(ckpt, tmp_path):
    src = save_checkpoint(ckpt, tmp_path / "h.mln")
    loaded = load_checkpoint(src)
    name = next(k for k in loaded.tensors if not k.startswith("optim/"))
    del loaded.tensors[name]
    with pytest.raises(IntegrityError, match="missing"):
        loaded.build_model()


def test_validate_index_gap():
    index = [{"name": "a", "shape": [2], "dtype": "float32", "offset": 0, "length": 8},
             {"name": "b", "shape": [1], "dtype": "float32", "offset": 12, "length": 4}]
    with pytest.raises(IntegrityError, match="gap"):
        validate_index(index, 16)


def test_checkpoint_excludes_optimizer_from_model_state(ckpt):
    assert any(k.startswith("optim/") for k in ckpt.tensors)
    assert not any(k.startswith("optim/") for k in ckpt.model_state())
    assert isinstance(ckpt, Checkpoint)
