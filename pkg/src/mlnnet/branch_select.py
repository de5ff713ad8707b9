"""Test-time choice of LN branch by signature similarity.

For each branch b the test image is passed through the network with that
branch's LN parameters while per-site input statistics are captured, giving a
target signature Q_t^(b). It is compared layer by layer with the stored
source signature Q_b; the branch whose signature is most similar wins and its
segmentation is returned.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import DegenerateSignatureError, SelectionError, SignatureError
from .mln import DomainSignature, capture_stats

log = logging.getLogger(__name__)

METRICS = ("cosine", "euclidean")
SENSES = ("max_similarity", "literal_argmin")


def cosine_similarity(q_d, q_t) -> float:
    q_d = np.asarray(q_d, dtype=np.float64)
    q_t = np.asarray(q_t, dtype=np.float64)
    if q_d.shape != q_t.shape:
        raise SignatureError(f"vector length mismatch: {q_d.shape} vs {q_t.shape}")
    nd, nt = np.linalg.norm(q_d), np.linalg.norm(q_t)
    if nd == 0 or nt == 0:
        raise DegenerateSignatureError("cosine similarity of a zero vector is undefined")
    return float(np.clip(q_d @ q_t / (nd * nt), -1.0, 1.0))


def layer_scores(Q_d, Q_t, metric="cosine") -> np.ndarray:
    """Per-layer cosine similarity or Euclidean distance. Inputs are (L, D) arrays."""
    Q_d, Q_t = np.asarray(Q_d, dtype=np.float64), np.asarray(Q_t, dtype=np.float64)
    if Q_d.shape != Q_t.shape:
        raise SignatureError(f"signature shape mismatch: {Q_d.shape} vs {Q_t.shape}")
    if metric == "cosine":
        return np.array([cosine_similarity(a, b) for a, b in zip(Q_d, Q_t)])
    if metric == "euclidean":
        return np.linalg.norm(Q_d - Q_t, axis=1)
    raise SignatureError(f"unknown metric {metric!r}")


def _as_matrix(Q, with_correction):
    return Q.vectors(with_correction) if isinstance(Q, DomainSignature) else np.asarray(Q, dtype=np.float64)


def signature_distance(Q_d, Q_t, metric="cosine", with_correction=False) -> float:
    """Cosine: sum over layers of (1 - C). Euclidean: sum of per-layer L2 norms."""
    scores = layer_scores(_as_matrix(Q_d, with_correction), _as_matrix(Q_t, with_correction), metric)
    return float(np.sum(1.0 - scores)) if metric == "cosine" else float(np.sum(scores))


def correctional_mean(image) -> float:
    """Mean of pixels strictly above the image minimum."""
    img = np.asarray(image, dtype=np.float64)
    above = img[img > img.min()] if img.size else img
    if above.size == 0:
        raise DegenerateSignatureError("constant image has no pixels above its minimum")
    return float(above.mean())


@dataclass
class SelectOptions:
    metric: str = "cosine"
    correction: bool = False
    selection_sense: str = "max_similarity"
    batch_size: int = 16

    def __post_init__(self):
        if self.metric not in METRICS:
            raise SelectionError(f"metric must be one of {METRICS}")
        if self.selection_sense not in SENSES:
            raise SelectionError(f"selection_sense must be one of {SENSES}")


@dataclass
class BranchScore:
    branch: int
    layer_values: list[float]
    score: float
    degenerate: bool = False


@dataclass
class SignatureDistanceReport:
    per_branch: list[BranchScore]
    selected: int
    metric: str
    selection_sense: str = "max_similarity"
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "selection_sense": self.selection_sense,
            "selected": self.selected,
            "branches": [
                {"branch": b.branch, "layer_values": b.layer_values, "score": b.score, "degenerate": b.degenerate}
                for b in self.per_branch
            ],
            "notes": self.notes,
        }


def target_signatures(images, model, branch: int, correction=False, batch_size=16):
    """Q_t^(branch) for each image, plus that branch's class probabilities.

    Returns ``(sigs, probs)`` with ``sigs`` a list of DomainSignature and
    ``probs`` a (B, num_classes, H, W) array.
    """
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    dtype = next(model.parameters()).dtype
    sigs, probs = [], []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        x = torch.as_tensor(chunk, dtype=dtype)[:, None]
        with torch.no_grad(), capture_stats(model) as cap:
            p = model.predict_proba(x, branch)
        stats = cap.per_sample()
        for img, st in zip(chunk, stats):
            m = None
            if correction:
                try:
                    m = correctional_mean(img)
                except DegenerateSignatureError:
                    log.warning("constant test image; correctional mean unavailable")
            sigs.append(DomainSignature(branch, cap.site_ids, st[:, 0], st[:, 1], m))
        probs.append(p.numpy())
    return sigs, np.concatenate(probs)


def compute_target_signature(image, model, branch: int, correction=False) -> DomainSignature:
    sigs, _ = target_signatures(np.asarray(image)[None], model, branch, correction)
    return sigs[0]


def score_branches(source: Sequence[DomainSignature], targets: Sequence[DomainSignature],
                   opts: SelectOptions) -> SignatureDistanceReport:
    """Compare Q_b with Q_t^(b) for each branch b and pick the best one."""
    if len(source) != len(targets):
        raise SelectionError(f"{len(source)} source signatures but {len(targets)} target signatures")
    with_corr = opts.correction and all(s.m is not None for s in source) and all(t.m is not None for t in targets)
    notes = []
    if opts.correction and not with_corr:
        notes.append("correctional mean unavailable; using plain signatures")
    per_branch = []
    for b, (q_d, q_t) in enumerate(zip(source, targets)):
        try:
            vals = layer_scores(q_d.vectors(with_corr), q_t.vectors(with_corr), opts.metric)
        except DegenerateSignatureError as exc:
            per_branch.append(BranchScore(b, [], float("nan"), degenerate=True))
            notes.append(f"branch {b}: {exc}")
            continue
        score = float(np.sum(1.0 - vals)) if opts.metric == "cosine" else float(np.sum(vals))
        per_branch.append(BranchScore(b, vals.tolist(), score))
    valid = [s for s in per_branch if not s.degenerate]
    report = SignatureDistanceReport(per_branch, -1, opts.metric, opts.selection_sense, notes)
    if not valid:
        err = SelectionError("every branch produced a degenerate signature")
        err.report = report
        raise err
    if opts.metric == "cosine" and opts.selection_sense == "literal_argmin":
        # argmin of summed similarity, i.e. the largest summed (1 - C)
        report.selected = max(valid, key=lambda s: (s.score, -s.branch)).branch
    else:
        report.selected = min(valid, key=lambda s: (s.score, s.branch)).branch
    return report


def select_branch(image, model, signatures: Sequence[DomainSignature], opts: SelectOptions | None = None):
    """Return (mask, report) for one image."""
    masks, reports = select_branches([image], model, signatures, opts)
    return masks[0], reports[0]


def select_branches(images, model, signatures: Sequence[DomainSignature], opts: SelectOptions | None = None):
    """Batched :func:`select_branch`: per-image masks and reports."""
    opts = opts or SelectOptions()
    K = model.cfg.num_domains
    if len(signatures) != K:
        raise SelectionError(f"model has {K} branches but {len(signatures)} signatures were given")
    per_branch_sigs, per_branch_probs = [], []
    for b in range(K):
        sigs, probs = target_signatures(images, model, b, opts.correction, opts.batch_size)
        per_branch_sigs.append(sigs)
        per_branch_probs.append(probs)
    masks, reports = [], []
    for i in range(len(per_branch_sigs[0])):
        report = score_branches(signatures, [per_branch_sigs[b][i] for b in range(K)], opts)
        masks.append(per_branch_probs[report.selected][i].argmax(0).astype(np.uint8))
        reports.append(report)
    return masks, reports


def branch_masks(images, model, batch_size=16) -> np.ndarray:
    """Argmax masks from every branch: (K, B, H, W)."""
    out = []
    for b in range(model.cfg.num_domains):
        _, probs = target_signatures(images, model, b, False, batch_size)
        out.append(probs.argmax(1).astype(np.uint8))
    return np.stack(out)


def sum_mode_masks(images, model, batch_size=16) -> np.ndarray:
    """Branch outputs summed pixelwise; a pixel is lesion when the sum is >= 1."""
    return (branch_masks(images, model, batch_size).sum(0) >= 1).astype(np.uint8)


def fixed_branch_masks(images, model, branch: int, batch_size=16) -> np.ndarray:
    _, probs = target_signatures(images, model, branch, False, batch_size)
    return probs.argmax(1).astype(np.uint8)
