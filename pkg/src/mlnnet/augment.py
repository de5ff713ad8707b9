"""Intensity-domain expansion of a single-source dataset.

Source-similar domains come from remapping gray levels through a cubic
Bezier curve anchored at (0, 0) and (1, 1); the source-dissimilar domain is
plain grayscale inversion. ``expand_domains`` turns one (image, mask) pair
into K labelled samples, one per branch of the multi-LN network.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError

# Intensities live on a uniform 2^-24 grid so that T - f is exact in both
# float32 and float64 and inversion is a bit-exact involution.
INTENSITY_STEP = 2.0**-24

DEFAULT_PAIR_A = ((0.30, 0.70), (0.70, 0.30))
DEFAULT_PAIR_B = ((0.70, 0.30), (0.30, 0.70))


def to_grid(image) -> np.ndarray:
    """Snap intensities to multiples of ``INTENSITY_STEP`` (dtype preserved for floats)."""
    image = np.asarray(image)
    out = np.round(image.astype(np.float64) / INTENSITY_STEP) * INTENSITY_STEP
    return out.astype(image.dtype) if image.dtype.kind == "f" else out


@dataclass(frozen=True)
class BezierControl:
    p1: tuple[float, float]
    p2: tuple[float, float]
    p0: tuple[float, float] = (0.0, 0.0)
    p3: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if tuple(self.p0) != (0.0, 0.0) or tuple(self.p3) != (1.0, 1.0):
            raise ConfigError("bezier endpoints are fixed at (0,0) and (1,1)")
        for name in ("p1", "p2"):
            pt = tuple(float(v) for v in getattr(self, name))
            if len(pt) != 2 or not all(0.0 <= v <= 1.0 for v in pt):
                raise ConfigError(f"bezier {name}={pt} must have both coordinates in [0, 1]")
            object.__setattr__(self, name, pt)

    @property
    def points(self) -> np.ndarray:
        return np.array([self.p0, self.p1, self.p2, self.p3], dtype=np.float64)


def bezier_point(ctrl: BezierControl, k) -> np.ndarray:
    """Evaluate the cubic Bernstein form at ratio ``k`` (scalar or array).

    Returns an array of shape ``(..., 2)`` holding (x, y).
    """
    k = np.asarray(k, dtype=np.float64)
    if np.any(k < 0.0) or np.any(k > 1.0) or not np.all(np.isfinite(k)):
        raise ValueError("bezier parameter k must lie in [0, 1]")
    pts = ctrl.points
    n = len(pts) - 1
    out = np.zeros(k.shape + (2,), dtype=np.float64)
    for i, p in enumerate(pts):
        basis = comb(n, i) * (1.0 - k) ** (n - i) * k**i
        out += basis[..., None] * p
    return out


@dataclass(frozen=True)
class IntensityLUT:
    table: np.ndarray

    @property
    def resolution(self) -> int:
        return len(self.table)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return apply_lut(image, self)


def build_intensity_lut(ctrl: BezierControl, resolution: int = 4096) -> IntensityLUT:
    if resolution < 256:
        raise ConfigError(f"LUT resolution must be >= 256, got {resolution}")
    # oversample the curve so interpolation error on the v-grid is negligible
    k = np.linspace(0.0, 1.0, 8 * resolution + 1)
    xy = bezier_point(ctrl, k)
    x, y = xy[:, 0], xy[:, 1]
    if np.min(np.diff(x)) < -1e-9:
        raise ConfigError("control points yield non-functional mapping")
    x = np.maximum.accumulate(x)
    v = np.linspace(0.0, 1.0, resolution)
    table = np.interp(v, x, y)
    table = np.clip(table, 0.0, 1.0)
    table[0], table[-1] = 0.0, 1.0
    return IntensityLUT(table)


def identity_lut(resolution: int = 4096) -> IntensityLUT:
    return IntensityLUT(np.linspace(0.0, 1.0, resolution))


def apply_lut(image: np.ndarray, lut: IntensityLUT) -> np.ndarray:
    image = np.asarray(image)
    grid = np.linspace(0.0, 1.0, lut.resolution)
    out = to_grid(np.interp(np.clip(image.astype(np.float64), 0.0, 1.0), grid, lut.table))
    return out.astype(np.float32) if image.dtype == np.float32 else out


def grayscale_invert(image: np.ndarray, T: float = 1.0) -> np.ndarray:
    image = np.asarray(image)
    if image.size and T < float(np.max(image)):
        raise ValueError(f"inversion ceiling T={T} is below the image maximum {float(np.max(image))}")
    return T - image


def gamma_map(image: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    return to_grid(np.power(np.clip(image, 0.0, 1.0), gamma))


# --- domain definitions ----------------------------------------------------

KINDS = ("identity", "bezier", "invert", "invert_bezier", "gamma")


@dataclass(frozen=True)
class DomainDef:
    kind: str
    p1: tuple[float, float] | None = None
    p2: tuple[float, float] | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown domain kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("bezier", "invert_bezier"):
            if self.p1 is None or self.p2 is None:
                raise ConfigError(f"domain kind {self.kind!r} needs p1 and p2")
            BezierControl(tuple(self.p1), tuple(self.p2))
            object.__setattr__(self, "p1", tuple(float(v) for v in self.p1))
            object.__setattr__(self, "p2", tuple(float(v) for v in self.p2))
        if self.kind == "gamma" and (self.gamma is None or self.gamma <= 0):
            raise ConfigError("domain kind 'gamma' needs a positive gamma")

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "DomainDef":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ConfigError(f"domain definition must be an object with a 'kind' key: {obj!r}")
        unknown = set(obj) - {"kind", "p1", "p2", "gamma"}
        if unknown:
            raise ConfigError(f"unknown keys in domain definition: {sorted(unknown)}")
        return cls(
            kind=obj["kind"],
            p1=tuple(obj["p1"]) if "p1" in obj else None,
            p2=tuple(obj["p2"]) if "p2" in obj else None,
            gamma=obj.get("gamma"),
        )

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        if self.p1 is not None:
            out["p1"] = list(self.p1)
            out["p2"] = list(self.p2)
        if self.gamma is not None:
            out["gamma"] = self.gamma
        return out

    def transform(self):
        """Return a callable image -> image for this domain."""
        if self.kind == "identity":
            return lambda img: np.array(img, copy=True)
        if self.kind == "invert":
            return lambda img: grayscale_invert(img, 1.0)
        if self.kind == "gamma":
            g = self.gamma
            return lambda img: gamma_map(img, g)
        lut = _cached_lut(self.p1, self.p2)
        if self.kind == "bezier":
            return lambda img: apply_lut(img, lut)
        return lambda img: grayscale_invert(apply_lut(img, lut), 1.0)


_LUT_CACHE: dict[tuple, IntensityLUT] = {}


def _cached_lut(p1, p2) -> IntensityLUT:
    key = (tuple(p1), tuple(p2))
    if key not in _LUT_CACHE:
        _LUT_CACHE[key] = build_intensity_lut(BezierControl(*key))
    return _LUT_CACHE[key]


def default_domain_spec() -> list[DomainDef]:
    return [
        DomainDef("identity"),
        DomainDef("bezier", *DEFAULT_PAIR_A),
        DomainDef("bezier", *DEFAULT_PAIR_B),
        DomainDef("invert"),
    ]


def parse_domain_spec(obj: Sequence[dict[str, Any]]) -> list[DomainDef]:
    if not isinstance(obj, (list, tuple)):
        raise ConfigError("augmentation spec must be a JSON array")
    spec = [d if isinstance(d, DomainDef) else DomainDef.from_json(d) for d in obj]
    if not spec:
        raise ConfigError("augmentation spec is empty")
    return spec


def mean_strategy_spec(n_pairs: int, include_identity=True, include_invert=True) -> list[DomainDef]:
    """Control pairs (a, 1-a), (1-a, a) with a_n = 0.5 * n / N."""
    a_values = [0.5 * n / n_pairs for n in range(1, n_pairs + 1)]
    return _pairs_spec(a_values, include_identity, include_invert)


def random_strategy_spec(n_pairs: int, seed: int, include_identity=True, include_invert=True) -> list[DomainDef]:
    """Control pairs with a drawn uniformly from (0, 0.5)."""
    rng = np.random.default_rng(seed)
    a_values = [float(a) for a in rng.uniform(0.0, 0.5, size=n_pairs)]
    return _pairs_spec(a_values, include_identity, include_invert)


def _pairs_spec(a_values, include_identity, include_invert):
    spec = [DomainDef("identity")] if include_identity else []
    for a in a_values:
        spec.append(DomainDef("bezier", (a, 1.0 - a), (1.0 - a, a)))
    if include_invert:
        spec.append(DomainDef("invert"))
    return spec


@dataclass
class DomainSample:
    image: np.ndarray
    mask: np.ndarray
    domain: int


def expand_domains(sample, spec: Sequence[DomainDef] | None = None) -> list[DomainSample]:
    image, mask = sample
    spec = default_domain_spec() if spec is None else parse_domain_spec(spec)
    return [DomainSample(d.transform()(image), mask, i) for i, d in enumerate(spec)]


# --- conventional geometric augmentation (baseline control group) ----------

def conventional_augment(sample, seed, scale=(0.8, 1.0), flip_axes=None):
    """Random flips plus crop-and-resize, applied identically to image and mask.

    ``flip_axes`` forces the flip decision (tuple of axes) and disables cropping,
    which is handy for testing.
    """
    from .phantom import resize_image, resize_mask

    image, mask = sample
    rng = np.random.default_rng(seed)
    if flip_axes is None:
        axes = tuple(ax for ax in (0, 1) if rng.random() < 0.5)
        s = rng.uniform(*scale)
    else:
        axes, s = tuple(flip_axes), 1.0
    if axes:
        image, mask = np.flip(image, axes), np.flip(mask, axes)
    h, w = image.shape
    ch, cw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    if (ch, cw) != (h, w):
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        image = resize_image(image[y0:y0 + ch, x0:x0 + cw], (h, w))
        mask = resize_mask(mask[y0:y0 + ch, x0:x0 + cw], (h, w))
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)
