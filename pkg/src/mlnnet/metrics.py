"""Overlap and surface-distance metrics for binary masks.

Undefined values (zero denominators, one empty surface) are ``nan`` and are
dropped from averages. Distances are in mm: pixel offsets times ``spacing``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError

UNDEFINED = float("nan")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio(num, den):
    return num / den if den > 0 else UNDEFINED


def tpr(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)


def dsc(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


@dataclass
class SurfaceSet:
    points: np.ndarray          # (n, 2) integer pixel indices, row-major order
    shape: tuple[int, int]
    spacing: tuple[float, float] = (1.0, 1.0)

    def __len__(self):
        return len(self.points)

    @property
    def mm(self) -> np.ndarray:
        return self.points * np.asarray(self.spacing)


def _spacing(spacing):
    if np.isscalar(spacing):
        return (float(spacing), float(spacing))
    sy, sx = spacing
    return (float(sy), float(sx))


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour (outside counts as background)."""
    m = np.asarray(mask).astype(bool)
    inner = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    return m & ~inner


def extract_surface(mask, spacing=1.0) -> SurfaceSet:
    m = np.asarray(mask)
    return SurfaceSet(np.argwhere(boundary(m)), m.shape, _spacing(spacing))


def _raster(s: SurfaceSet) -> np.ndarray:
    r = np.zeros(s.shape, dtype=bool)
    if len(s):
        r[tuple(s.points.T)] = True
    return r


def _directed(src: SurfaceSet, dst: SurfaceSet) -> np.ndarray:
    """For each point of ``src``, the distance to the nearest point of ``dst``.

    Isotropic grids stay in pixel units; callers scale by the spacing once at the end.
    """
    if src.shape != dst.shape or src.spacing != dst.spacing:
        raise ShapeError("surface sets come from different grids")
    sampling = None if _isotropic(src) else src.spacing
    edt = ndimage.distance_transform_edt(~_raster(dst), sampling=sampling)
    return edt[tuple(src.points.T)]


def _isotropic(s: SurfaceSet) -> bool:
    return s.spacing[0] == s.spacing[1]


def _unit(s: SurfaceSet) -> float:
    return s.spacing[0] if _isotropic(s) else 1.0


def _empty_rule(P, G):
    if len(P) == 0 and len(G) == 0:
        return 0.0
    if len(P) == 0 or len(G) == 0:
        return UNDEFINED
    return None


def asd_from_directed(d_pg: np.ndarray, d_gp: np.ndarray | None) -> float:
    if d_gp is None:
        return float(np.sum(d_pg) / len(d_pg))
    return float((np.sum(d_pg) + np.sum(d_gp)) / (len(d_pg) + len(d_gp)))


def asd(P: SurfaceSet, G: SurfaceSet, symmetric: bool = True) -> float:
    """Average surface distance.

    Symmetric form averages nearest distances from P to G and G to P over
    |P| + |G| points; ``symmetric=False`` averages only P -> G.
    """
    early = _empty_rule(P, G)
    if early is not None:
        return early
    return asd_from_directed(_directed(P, G), _directed(G, P) if symmetric else None) * _unit(P)


def hd(P: SurfaceSet, G: SurfaceSet) -> float:
    """Exact (100th percentile) Hausdorff distance."""
    early = _empty_rule(P, G)
    if early is not None:
        return early
    return float(max(_directed(P, G).max(), _directed(G, P).max())) * _unit(P)


# --- brute force -----------------------------------------------------------

def brute_directed(src: SurfaceSet, dst: SurfaceSet) -> np.ndarray:
    """O(|src| |dst|) nearest distances (pixel units on isotropic grids)."""
    sy, sx = src.spacing
    dy = src.points[:, None, 0] - dst.points[None, :, 0]
    dx = src.points[:, None, 1] - dst.points[None, :, 1]
    if sy == sx:
        return np.sqrt((dy * dy + dx * dx).min(axis=1).astype(np.float64))
    return np.sqrt(((dy * sy) ** 2 + (dx * sx) ** 2).min(axis=1))


def brute_asd(P, G, symmetric=True) -> float:
    early = _empty_rule(P, G)
    if early is not None:
        return early
    return asd_from_directed(brute_directed(P, G), brute_directed(G, P) if symmetric else None) * _unit(P)


def brute_hd(P, G) -> float:
    early = _empty_rule(P, G)
    if early is not None:
        return early
    return float(max(brute_directed(P, G).max(), brute_directed(G, P).max())) * _unit(P)


# --- case-level evaluation -------------------------------------------------

FIELDS = ("case_id", "tpr", "pr", "dsc", "hd_mm", "asd_mm", "selected_branch")


def evaluate_case(pred, gt, spacing=1.0) -> dict:
    c = confusion(pred, gt)
    P, G = extract_surface(pred, spacing), extract_surface(gt, spacing)
    return {"tpr": tpr(c), "pr": precision(c), "dsc": dsc(c), "hd_mm": hd(P, G), "asd_mm": asd(P, G)}


def summarize(rows) -> dict:
    """Means over defined (non-nan) values of each metric column."""
    out = {}
    for key in ("tpr", "pr", "dsc", "hd_mm", "asd_mm"):
        vals = [r[key] for r in rows if r.get(key) is not None and not math.isnan(r[key])]
        out[key] = float(np.mean(vals)) if vals else UNDEFINED
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_csv(rows, path, summary: dict | None = None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELDS)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in FIELDS])
        if summary is not None:
            w.writerow([_fmt(summary.get(k, "mean" if k == "case_id" else None)) for k in FIELDS])
