import numpy as np
import pytest
from PIL import Image as PILImage

from mlnnet.errors import ConfigError, DataError
from mlnnet.phantom import (
    PhantomConfig,
    generate_dataset,
    generate_phantom,
    load_dataset,
    preprocess_tile,
    save_dataset,
    save_png,
    split_quadrants,
)


def test_single_cluster_foreground_fraction():
    img, mask = generate_phantom(PhantomConfig(seed=7, canvas=(128, 128), n_clusters=1, spots_per_cluster=5))
    # 5 spots, radius at half max <= 3 * sqrt(2 ln 2) ~ 3.53 px -> area <= ~40 px each
    frac = mask.mean()
    assert 0 < frac <= 0.05
    assert img.shape == mask.shape == (128, 128)
    assert img.dtype == np.float32 and img.min() >= 0 and img.max() <= 1
    assert set(np.unique(mask)) <= {0, 1}


def test_zero_spots_rejected_naming_field():
    with pytest.raises(ConfigError, match="spots_per_cluster"):
        PhantomConfig(spots_per_cluster=0)


@pytest.mark.parametrize("override", [{"canvas": (8, 8)}, {"n_clusters": 0}, {"spot_sigma_px": (0.5, 2.0)},
                                      {"modality_mapping": {"kind": "warp"}}])
def test_invalid_config_fields(override):
    with pytest.raises(ConfigError):
        PhantomConfig(**override)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        PhantomConfig.from_dict({"seed": 1, "colour": "red"})


def test_deterministic_in_seed():
    cfg = PhantomConfig(seed=3, n_clusters=2)
    a, b = generate_phantom(cfg), generate_phantom(PhantomConfig.from_dict(cfg.to_dict()))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    c = generate_phantom(PhantomConfig(seed=4, n_clusters=2))
    assert not np.array_equal(a[0], c[0])


@pytest.mark.parametrize("seed", range(10))
def test_lesion_brighter_than_background(seed):
    img, mask = generate_phantom(PhantomConfig(seed=seed))
    assert img[mask == 1].mean() > img[mask == 0].mean()


def test_modality_mappings_apply():
    base = PhantomConfig(seed=2)
    img, mask = generate_phantom(base)
    inv, mask_inv = generate_phantom(PhantomConfig.from_dict({**base.to_dict(), "modality_mapping": {"kind": "invert"}}))
    np.testing.assert_array_equal(inv, 1.0 - img)
    np.testing.assert_array_equal(mask, mask_inv)
    gam, _ = generate_phantom(PhantomConfig.from_dict({**base.to_dict(), "modality_mapping": {"kind": "gamma", "gamma": 1.8}}))
    np.testing.assert_allclose(gam, img.astype(np.float64) ** 1.8, atol=1e-6)


def test_uniform_zero_image_gives_no_tiles():
    z = np.zeros((64, 64))
    assert preprocess_tile(z, z.astype(np.uint8), foreground_threshold=0.1) == []


def test_threshold_zero_keeps_all_quadrants():
    img = np.zeros((64, 64))
    img[5:10, 5:10] = 0.8
    mask = (img > 0).astype(np.uint8)
    tiles = preprocess_tile(img, mask, foreground_threshold=0.0, size=(32, 32))
    assert len(tiles) == 4
    assert tiles[0][1].sum() > 0 and all(t[1].sum() == 0 for t in tiles[1:])


def test_background_quadrants_dropped():
    img = np.zeros((64, 64))
    img[:32, :32] = 0.5
    tiles = preprocess_tile(img, np.zeros((64, 64), np.uint8), foreground_threshold=0.05, size=(32, 32))
    assert len(tiles) == 1


def test_resampled_tiles_keep_binary_masks():
    img, mask = generate_phantom(PhantomConfig(seed=1, canvas=(100, 100), cluster_radius_px=8))
    tiles = preprocess_tile(img, mask, foreground_threshold=0.0, size=(128, 128))
    for t_img, t_mask in tiles:
        assert t_img.shape == t_mask.shape == (128, 128)
        assert set(np.unique(t_mask)) <= {0, 1}


def test_tiling_partition_exact():
    rng = np.random.default_rng(0)
    img = rng.random((40, 60))
    quads = split_quadrants(img)
    top = np.concatenate(quads[:2], axis=1)
    bottom = np.concatenate(quads[2:], axis=1)
    assert np.array_equal(np.concatenate([top, bottom], axis=0), img)


def test_odd_dimensions_are_reflect_padded():
    img = np.arange(35, dtype=float).reshape(5, 7) / 35
    quads = split_quadrants(img)
    assert all(q.shape == (3, 4) for q in quads)


def test_tiling_preconditions():
    with pytest.raises(ConfigError):
        preprocess_tile(np.zeros((4, 4)), np.zeros((4, 4)), foreground_threshold=1.0)
    with pytest.raises(ConfigError):
        preprocess_tile(np.zeros((4, 4)), np.zeros((4, 5)))


def test_dataset_roundtrip(tmp_path):
    pairs = generate_dataset(PhantomConfig(seed=5), 3)
    save_dataset(pairs, tmp_path, "train")
    loaded = load_dataset(tmp_path, "train")
    assert len(loaded) == 3
    for (img, mask), (limg, lmask) in zip(pairs, loaded):
        assert np.max(np.abs(img - limg)) <= 1 / 255
        assert np.array_equal(mask, lmask)


def test_sixteen_bit_normalization(tmp_path):
    for sub in ("images", "masks"):
        (tmp_path / "s" / sub).mkdir(parents=True)
    arr = np.array([[0, 65535], [32768, 1000]] * 8, dtype=np.uint16).repeat(8, axis=1)
    PILImage.fromarray(arr).save(tmp_path / "s" / "images" / "a.png")
    save_png(tmp_path / "s" / "masks" / "a.png", np.zeros(arr.shape), binary=True)
    (img, _), = load_dataset(tmp_path, "s")
    assert img[0, 8] == 1.0 and img[0, 0] == 0.0


def test_missing_mask_named(tmp_path):
    pairs = generate_dataset(PhantomConfig(seed=5), 2)
    save_dataset(pairs, tmp_path, "train", stems=["keep", "orphan"])
    (tmp_path / "train" / "masks" / "orphan.png").unlink()
    with pytest.raises(DataError, match="orphan.png"):
        load_dataset(tmp_path, "train")


def test_rgb_png_rejected(tmp_path):
    for sub in ("images", "masks"):
        (tmp_path / "s" / sub).mkdir(parents=True)
    PILImage.fromarray(np.zeros((16, 16, 3), np.uint8), "RGB").save(tmp_path / "s" / "images" / "x.png")
    save_png(tmp_path / "s" / "masks" / "x.png", np.zeros((16, 16)), binary=True)
    with pytest.raises(DataError, match="grayscale"):
        load_dataset(tmp_path, "s")
