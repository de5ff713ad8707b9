"""Layer normalization with one affine parameter set per domain.

Every normalization site of the segmentation network is a
:class:`MultiLayerNorm`. All sites share the surrounding backbone weights;
only the scale/shift pair is chosen by the domain label. Each site also owns a
:class:`StatRecorder` that, when switched on, accumulates the mean and
standard deviation of the site's *input* per domain. The ordered collection of
those per-site statistics is a domain signature, used at test time to pick a
branch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import NumericError, SelectionError, SignatureError

DEFAULT_DELTA = 1e-5


@dataclass
class LNParams:
    gamma: np.ndarray
    omega: np.ndarray
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if not (np.all(np.isfinite(self.gamma)) and np.all(np.isfinite(self.omega))):
            raise NumericError("LN parameters must be finite")
        if self.delta < 0:
            raise NumericError("delta must be non-negative")


def layer_norm(h, params: LNParams) -> np.ndarray:
    """Reference LN over the last axis: gamma * (h - u) / sqrt(var + delta) + omega.

    Population variance (divide by n). With ``delta=0`` a constant input would
    divide by zero, so the centred values are returned as-is (all zeros) there.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] < 1:
        raise ValueError("layer_norm needs at least one feature")
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite activation passed to layer_norm")
    u = h.mean(axis=-1, keepdims=True)
    centred = h - u
    var = (centred**2).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + params.delta)
    scaled = np.divide(centred, denom, out=np.zeros_like(centred), where=denom > 0)
    return params.gamma * scaled + params.omega


def token_stats(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample (mean, std) of LN inputs.

    Stats are taken over the channel axis of each token, then averaged over
    tokens, giving one pair per sample.
    """
    x = x.detach().reshape(x.shape[0], -1, x.shape[-1]).double()
    u = x.mean(-1)
    sigma = x.var(-1, unbiased=False).sqrt()
    return u.mean(-1), sigma.mean(-1)


class StatRecorder:
    """Running per-domain average of per-batch (u, sigma) means.

    Each call to :meth:`update` counts as one batch for every domain present in
    it; the stored statistic is the plain mean over batches.
    """

    def __init__(self, num_domains: int):
        self.num_domains = num_domains
        self.reset()

    def reset(self):
        self.sums = np.zeros((self.num_domains, 2), dtype=np.float64)
        self.counts = np.zeros(self.num_domains, dtype=np.int64)

    def update(self, domain: int, u: float, sigma: float):
        self.sums[domain] += (u, sigma)
        self.counts[domain] += 1

    def mean(self, domain: int) -> tuple[float, float]:
        if self.counts[domain] == 0:
            raise SignatureError(f"no statistics recorded for domain {domain}")
        u, s = self.sums[domain] / self.counts[domain]
        return float(u), float(s)

    def state(self) -> dict:
        return {"sums": self.sums.tolist(), "counts": self.counts.tolist()}


class MultiLayerNorm(nn.Module):
    """K-way layer norm bank for features of width ``dim``."""

    def __init__(self, dim: int, num_domains: int, delta: float = DEFAULT_DELTA):
        super().__init__()
        if num_domains < 1:
            raise ValueError("num_domains must be >= 1")
        self.dim = dim
        self.num_domains = num_domains
        self.delta = delta
        self.weight = nn.Parameter(torch.ones(num_domains, dim))
        self.bias = nn.Parameter(torch.zeros(num_domains, dim))
        self.site_id = ""
        self.recording = False
        self.recorder = StatRecorder(num_domains)
        self.capture: list | None = None

    def extra_repr(self):
        return f"{self.dim}, domains={self.num_domains}, delta={self.delta}"

    def params(self, domain: int) -> LNParams:
        return LNParams(self.weight[domain].detach().double().numpy(),
                        self.bias[domain].detach().double().numpy(), self.delta)

    def forward(self, x: torch.Tensor, domain) -> torch.Tensor:
        """``x`` is (B, ..., dim); ``domain`` is an int or a (B,) LongTensor."""
        if self.recording:
            self._record(x, domain)
        if self.capture is not None:
            u, s = token_stats(x)
            self.capture.append((u.numpy(), s.numpy()))
        u = x.mean(-1, keepdim=True)
        var = (x - u).pow(2).mean(-1, keepdim=True)
        xhat = (x - u) / torch.sqrt(var + self.delta)
        if isinstance(domain, int):
            if not 0 <= domain < self.num_domains:
                raise SelectionError(f"domain {domain} out of range for {self.num_domains} branches")
            return xhat * self.weight[domain] + self.bias[domain]
        if domain.min() < 0 or domain.max() >= self.num_domains:
            raise SelectionError(f"domain labels out of range for {self.num_domains} branches")
        shape = (x.shape[0],) + (1,) * (x.dim() - 2) + (self.dim,)
        return xhat * self.weight[domain].reshape(shape) + self.bias[domain].reshape(shape)

    @torch.no_grad()
    def _record(self, x, domain):
        u, s = token_stats(x)
        if isinstance(domain, int):
            self.recorder.update(domain, u.mean().item(), s.mean().item())
            return
        for d in torch.unique(domain).tolist():
            sel = domain == d
            self.recorder.update(d, u[sel].mean().item(), s[sel].mean().item())


def mln_sites(model: nn.Module) -> list[MultiLayerNorm]:
    return [m for m in model.modules() if isinstance(m, MultiLayerNorm)]


def set_recording(model: nn.Module, on: bool, reset: bool = False):
    for m in mln_sites(model):
        m.recording = on
        if reset:
            m.recorder.reset()


class capture_stats:
    """Context manager collecting per-sample (u, sigma) at every site.

    Inside the block each site appends one pair of (B,) arrays per forward
    call; ``.per_sample()`` returns them as a (B, L, 2) array. The training
    recorders are left untouched.
    """

    def __init__(self, model: nn.Module):
        self.sites = mln_sites(model)

    def __enter__(self):
        for m in self.sites:
            m.capture = []
        return self

    def __exit__(self, *exc):
        self.collected = [m.capture for m in self.sites]
        for m in self.sites:
            m.capture = None

    def per_sample(self) -> np.ndarray:
        captured = self.collected if hasattr(self, "collected") else [m.capture for m in self.sites]
        if any(len(c) != 1 for c in captured):
            raise SignatureError("expected exactly one forward pass per capture block")
        return np.stack([np.stack(c[0], axis=-1) for c in captured], axis=1)

    @property
    def site_ids(self) -> list[str]:
        return [m.site_id for m in self.sites]


# --- signatures ------------------------------------------------------------

@dataclass
class DomainSignature:
    domain: int
    site_ids: list[str]
    u: np.ndarray
    sigma: np.ndarray
    m: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if not (len(self.site_ids) == len(self.u) == len(self.sigma)):
            raise SignatureError("signature entry lists disagree in length")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.sigma))):
            raise SignatureError(f"non-finite statistics in signature of domain {self.domain}")
        if np.any(self.sigma < 0):
            raise SignatureError("sigma entries must be non-negative")

    def __len__(self):
        return len(self.site_ids)

    def vectors(self, with_correction: bool = False) -> np.ndarray:
        """(L, 2) array of per-site (u, sigma), or (L, 3) with the correctional mean."""
        q = np.stack([self.u, self.sigma], axis=1)
        if with_correction:
            if self.m is None:
                raise SignatureError(f"signature of domain {self.domain} has no correctional mean")
            q = np.concatenate([q, np.full((len(q), 1), self.m)], axis=1)
        return q

    def to_json(self) -> dict:
        entries = []
        for sid, u, s in zip(self.site_ids, self.u, self.sigma):
            e = {"site_id": sid, "u": float(u), "sigma": float(s)}
            if self.m is not None:
                e["m"] = float(self.m)
            entries.append(e)
        return {"domain": int(self.domain), "entries": entries}

    @classmethod
    def from_json(cls, obj: dict) -> "DomainSignature":
        entries = obj["entries"]
        ms = {e["m"] for e in entries if "m" in e}
        if len(ms) > 1:
            raise SignatureError("correctional mean must be the same for every site")
        return cls(
            domain=int(obj["domain"]),
            site_ids=[e["site_id"] for e in entries],
            u=[e["u"] for e in entries],
            sigma=[e["sigma"] for e in entries],
            m=ms.pop() if ms else None,
        )


def extract_signature(banks: Iterable[MultiLayerNorm], domain: int, m: float | None = None) -> DomainSignature:
    banks = list(banks)
    site_ids, us, ss = [], [], []
    for bank in banks:
        if not 0 <= domain < bank.num_domains:
            raise SelectionError(f"domain {domain} out of range")
        try:
            u, s = bank.recorder.mean(domain)
        except SignatureError:
            raise SignatureError(f"site {bank.site_id!r} recorded nothing for domain {domain}") from None
        site_ids.append(bank.site_id)
        us.append(u)
        ss.append(s)
    return DomainSignature(domain, site_ids, us, ss, m)


def extract_signatures(model: nn.Module, num_domains: int, corr_means: Sequence[float | None] | None = None):
    banks = mln_sites(model)
    corr_means = corr_means or [None] * num_domains
    return [extract_signature(banks, d, corr_means[d]) for d in range(num_domains)]
