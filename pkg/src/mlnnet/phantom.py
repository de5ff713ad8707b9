"""Synthetic mammography-like phantoms, PNG dataset I/O and tiling.

A phantom is a smooth textured tissue background with clusters of small
Gaussian bright spots (the stand-in for microcalcifications). A named
intensity mapping applied after rendering simulates a change of modality.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from . import augment
from .errors import ConfigError, DataError

MIN_SIDE = 16


@dataclass
class PhantomConfig:
    seed: int = 0
    canvas: tuple[int, int] = (128, 128)
    n_clusters: int = 1
    spots_per_cluster: tuple[int, int] = (5, 12)
    spot_sigma_px: tuple[float, float] = (1.0, 3.0)
    spot_amplitude: tuple[float, float] = (0.35, 0.5)
    cluster_radius_px: float = 14.0
    background_texture_scale: float = 6.0
    background_level: tuple[float, float] = (0.15, 0.45)
    modality_mapping: dict[str, Any] = field(default_factory=lambda: {"kind": "identity"})

    def __post_init__(self):
        self.canvas = _pair(self.canvas, "canvas", int)
        self.spots_per_cluster = _pair(self.spots_per_cluster, "spots_per_cluster", int)
        self.spot_sigma_px = _pair(self.spot_sigma_px, "spot_sigma_px", float)
        self.spot_amplitude = _pair(self.spot_amplitude, "spot_amplitude", float)
        self.background_level = _pair(self.background_level, "background_level", float)
        self.validate()

    def validate(self):
        h, w = self.canvas
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ConfigError(f"canvas: both sides must be >= {MIN_SIDE}, got {self.canvas}")
        if self.n_clusters < 1:
            raise ConfigError(f"n_clusters: must be >= 1, got {self.n_clusters}")
        lo, hi = self.spots_per_cluster
        if not 5 <= lo <= hi <= 20:
            raise ConfigError(f"spots_per_cluster: range must lie within [5, 20], got {self.spots_per_cluster}")
        lo, hi = self.spot_sigma_px
        if not 1.0 <= lo <= hi <= 3.0:
            raise ConfigError(f"spot_sigma_px: range must lie within [1.0, 3.0], got {self.spot_sigma_px}")
        lo, hi = self.spot_amplitude
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"spot_amplitude: range must lie within (0, 1], got {self.spot_amplitude}")
        lo, hi = self.background_level
        if not 0.0 <= lo <= hi < 1.0:
            raise ConfigError(f"background_level: range must lie within [0, 1), got {self.background_level}")
        if self.cluster_radius_px <= 0:
            raise ConfigError(f"cluster_radius_px: must be positive, got {self.cluster_radius_px}")
        if self.background_texture_scale <= 0:
            raise ConfigError(f"background_texture_scale: must be positive, got {self.background_texture_scale}")
        augment.DomainDef.from_json(self.modality_mapping)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "PhantomConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown PhantomConfig keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


def _pair(value, name, typ):
    if np.isscalar(value):
        value = (value, value)
    try:
        a, b = value
        return typ(a), typ(b)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected a number or a (low, high) pair, got {value!r}") from None


def generate_phantom(config: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    """Render one (image, mask) pair; a pure function of the config."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, w = config.canvas

    noise = rng.standard_normal((h, w))
    texture = ndimage.gaussian_filter(noise, config.background_texture_scale, mode="reflect")
    texture = (texture - texture.min()) / max(texture.max() - texture.min(), 1e-12)
    lo, hi = config.background_level
    background = lo + (hi - lo) * texture

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    lesion = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=bool)
    margin = min(config.cluster_radius_px + 3.0 * config.spot_sigma_px[1], min(h, w) / 2 - 1)
    for _ in range(config.n_clusters):
        cy = rng.uniform(margin, h - 1 - margin)
        cx = rng.uniform(margin, w - 1 - margin)
        n_spots = int(rng.integers(config.spots_per_cluster[0], config.spots_per_cluster[1] + 1))
        for _ in range(n_spots):
            r = config.cluster_radius_px * np.sqrt(rng.uniform())
            theta = rng.uniform(0.0, 2.0 * np.pi)
            sy, sx = cy + r * np.sin(theta), cx + r * np.cos(theta)
            sigma = rng.uniform(*config.spot_sigma_px)
            amp = rng.uniform(*config.spot_amplitude)
            spot = amp * np.exp(-((yy - sy) ** 2 + (xx - sx) ** 2) / (2.0 * sigma**2))
            lesion += spot
            mask |= spot > 0.5 * amp

    image = np.clip(background + lesion, 0.0, 1.0)
    mapping = augment.DomainDef.from_json(config.modality_mapping)
    image = augment.to_grid(np.clip(mapping.transform()(image), 0.0, 1.0))
    return image.astype(np.float32), mask.astype(np.uint8)


def generate_dataset(config: PhantomConfig, n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` phantoms; sample i uses seed ``config.seed * 100003 + i``."""
    out = []
    for i in range(n):
        cfg = PhantomConfig.from_dict({**config.to_dict(), "seed": config.seed * 100003 + i})
        out.append(generate_phantom(cfg))
    return out


# --- resampling and tiling -------------------------------------------------

def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    image = np.asarray(image)
    factors = (size[0] / image.shape[0], size[1] / image.shape[1])
    out = ndimage.zoom(image.astype(np.float64), factors, order=1, mode="nearest", grid_mode=True)
    out = augment.to_grid(np.clip(out, 0.0, 1.0))
    return out.astype(np.float32 if image.dtype == np.float32 else np.float64)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    factors = (size[0] / mask.shape[0], size[1] / mask.shape[1])
    out = ndimage.zoom(np.asarray(mask, dtype=np.uint8), factors, order=0, mode="nearest", grid_mode=True)
    return (out > 0).astype(np.uint8)


def split_quadrants(arr: np.ndarray) -> list[np.ndarray]:
    h, w = arr.shape
    if h % 2 or w % 2:
        arr = np.pad(arr, ((0, h % 2), (0, w % 2)), mode="reflect" if min(h, w) > 1 else "edge")
        h, w = arr.shape
    hh, hw = h // 2, w // 2
    return [arr[:hh, :hw], arr[:hh, hw:], arr[hh:, :hw], arr[hh:, hw:]]


def preprocess_tile(image, mask, foreground_threshold=0.05, size=(128, 128)):
    """2x2 split, drop background quadrants, resample survivors to ``size``.

    A quadrant is kept when its fraction of pixels above the global image
    minimum is at least ``foreground_threshold``. Odd sides are reflect-padded.
    """
    image, mask = np.asarray(image), np.asarray(mask)
    if image.shape != mask.shape:
        raise ConfigError(f"image shape {image.shape} != mask shape {mask.shape}")
    if image.ndim != 2 or min(image.shape) < 2:
        raise ConfigError(f"tiling needs a 2-D image of at least 2x2, got {image.shape}")
    if not 0.0 <= foreground_threshold < 1.0:
        raise ConfigError(f"foreground_threshold must be in [0, 1), got {foreground_threshold}")
    gmin = image.min()
    tiles = []
    for img_q, msk_q in zip(split_quadrants(image), split_quadrants(mask)):
        frac = float(np.mean(img_q > gmin))
        if frac < foreground_threshold or (foreground_threshold > 0 and frac == 0):
            continue
        tiles.append((resize_image(img_q, size), resize_mask(msk_q, size)))
    return tiles


# --- PNG dataset I/O -------------------------------------------------------

def save_png(path, array, bits=8, binary=False):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if binary:
        data = (arr > 0).astype(np.uint8) * 255
        PILImage.fromarray(data, mode="L").save(path)
        return
    arr = np.clip(arr, 0.0, 1.0)
    if bits == 8:
        PILImage.fromarray(np.round(arr * 255).astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        data = np.round(arr * 65535).astype(np.uint16)
        PILImage.fromarray(data).save(path)
    else:
        raise ConfigError(f"bits must be 8 or 16, got {bits}")


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        mode = im.mode
        if mode == "L":
            return augment.to_grid(np.asarray(im, dtype=np.float64) / 255.0)
        if mode in ("I;16", "I;16B", "I;16L"):
            return augment.to_grid(np.asarray(im, dtype=np.float64) / 65535.0)
        if mode == "I":
            # Pillow widens 16-bit grayscale PNGs to mode I on some versions
            arr = np.asarray(im, dtype=np.float64)
            if arr.min() >= 0 and arr.max() <= 65535:
                return augment.to_grid(arr / 65535.0)
        if mode == "1":
            return np.asarray(im, dtype=np.float64)
    raise DataError(f"{path}: expected single-channel 8- or 16-bit grayscale PNG, got mode {mode}")


def save_dataset(pairs, root, split="train", stems=None, bits=8):
    img_dir = Path(root) / split / "images"
    msk_dir = Path(root) / split / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    msk_dir.mkdir(parents=True, exist_ok=True)
    stems = stems or [f"case_{i:04d}" for i in range(len(pairs))]
    for stem, (image, mask) in zip(stems, pairs):
        save_png(img_dir / f"{stem}.png", image, bits=bits)
        save_png(msk_dir / f"{stem}.png", mask, binary=True)
    return stems


def list_stems(directory) -> list[str]:
    return sorted(p.stem for p in Path(directory).glob("*.png"))


def load_dataset(root, split="train", with_stems=False):
    img_dir = Path(root) / split / "images"
    msk_dir = Path(root) / split / "masks"
    if not img_dir.is_dir():
        raise DataError(f"missing image directory {img_dir}")
    stems = list_stems(img_dir)
    missing = [s for s in stems if not (msk_dir / f"{s}.png").exists()]
    if missing:
        raise DataError(f"no mask for image(s): {', '.join(s + '.png' for s in missing)}")
    pairs = []
    for s in stems:
        image = read_png(img_dir / f"{s}.png")
        mask = (read_png(msk_dir / f"{s}.png") >= 0.5).astype(np.uint8)
        if image.shape != mask.shape:
            raise DataError(f"{s}: image shape {image.shape} != mask shape {mask.shape}")
        pairs.append((image.astype(np.float32), mask))
    return (pairs, stems) if with_stems else pairs


def load_phantom_config(path) -> PhantomConfig:
    with open(path) as fh:
        return PhantomConfig.from_dict(json.load(fh))
