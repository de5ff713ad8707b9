"""U-shaped shifted-window transformer for segmentation (Swin-Unet layout).

Every LayerNorm of the usual architecture is replaced by a
:class:`~mlnnet.mln.MultiLayerNorm`, so a single set of backbone weights is
shared across K domains and the domain label only selects LN affine params.

Layout for ``depths=(2, 2, 2)``::

    patch embed -> [blocks, merge] -> [blocks, merge] -> [blocks] -> norm
                                                             |
    head <- x4 expand <- norm <- [blocks] <- [expand+skip] <-+ (mirrored)

When a stage's token grid is no larger than the window, the window shrinks to
the grid and the shifted block degenerates to a plain windowed block.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError
from .mln import DEFAULT_DELTA, MultiLayerNorm, mln_sites


@dataclass
class NetConfig:
    input_size: tuple[int, int] = (128, 128)
    patch_size: int = 4
    embed_dim: int = 24
    depths: tuple[int, ...] = (2, 2, 2)
    num_heads: tuple[int, ...] = (3, 6, 12)
    window_size: int = 8
    num_classes: int = 2
    num_domains: int = 4
    in_chans: int = 1
    mlp_ratio: float = 4.0
    rel_pos_bias: bool = True
    upsample: str = "expand"
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.depths = tuple(int(v) for v in self.depths)
        self.num_heads = tuple(int(v) for v in self.num_heads)
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * 2**i

    def stage_resolution(self, i: int) -> tuple[int, int]:
        h, w = self.input_size
        f = self.patch_size * 2**i
        return h // f, w // f

    def validate(self):
        if not self.depths or any(d < 1 for d in self.depths):
            raise ConfigError(f"depths must be a non-empty list of positive depths, got {self.depths}")
        if any(d % 2 for d in self.depths):
            raise ConfigError(f"all depths must be even (W-MSA/SW-MSA pairs), got {self.depths}")
        if len(self.num_heads) != len(self.depths):
            raise ConfigError("num_heads and depths must have equal length")
        if self.embed_dim < 1 or self.patch_size < 1 or self.window_size < 1:
            raise ConfigError("embed_dim, patch_size and window_size must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2 (softmax head)")
        if self.num_domains < 1:
            raise ConfigError("num_domains must be >= 1")
        if self.upsample not in ("expand", "bilinear"):
            raise ConfigError(f"upsample must be 'expand' or 'bilinear', got {self.upsample!r}")
        f = self.patch_size * 2 ** (self.num_stages - 1)
        if any(s % f for s in self.input_size):
            raise ConfigError(f"input_size {self.input_size} must be divisible by patch_size*2^(stages-1) = {f}")
        for i, heads in enumerate(self.num_heads):
            if self.stage_dim(i) % heads:
                raise ConfigError(f"stage {i}: dim {self.stage_dim(i)} not divisible by {heads} heads")
            for side in self.stage_resolution(i):
                if side > self.window_size and side % self.window_size:
                    raise ConfigError(f"stage {i}: token side {side} not divisible by window {self.window_size}")

    @classmethod
    def from_dict(cls, obj: dict) -> "NetConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown NetConfig keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# --- window helpers --------------------------------------------------------

def window_partition(x: torch.Tensor, wh: int, ww: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, wh * ww, C)"""
    B, H, W, C = x.shape
    x = x.view(B, H // wh, wh, W // ww, ww, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, wh * ww, C)


def window_reverse(windows: torch.Tensor, wh: int, ww: int, H: int, W: int) -> torch.Tensor:
    B = windows.shape[0] // ((H // wh) * (W // ww))
    x = windows.view(B, H // wh, W // ww, wh, ww, -1).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, -1)


def cyclic_shift(x: torch.Tensor, sy: int, sx: int) -> torch.Tensor:
    return torch.roll(x, shifts=(-sy, -sx), dims=(1, 2))


def shifted_window_mask(H, W, wh, ww, sy, sx) -> torch.Tensor:
    """Additive mask (nW, N, N): -100 between tokens that wrapped from different regions."""
    img = torch.zeros(1, H, W, 1)
    cnt = 0
    for hs in (slice(0, -wh), slice(-wh, -sy), slice(-sy, None)) if sy else (slice(None),):
        for ws in (slice(0, -ww), slice(-ww, -sx), slice(-sx, None)) if sx else (slice(None),):
            img[:, hs, ws, :] = cnt
            cnt += 1
    win = window_partition(img, wh, ww).squeeze(-1)
    diff = win.unsqueeze(1) - win.unsqueeze(2)
    return torch.where(diff != 0, torch.tensor(-100.0), torch.tensor(0.0))


class WindowAttention(nn.Module):
    def __init__(self, dim, window, num_heads, rel_pos_bias=True):
        super().__init__()
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.rel_pos_bias = rel_pos_bias
        if rel_pos_bias:
            wh, ww = window
            self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * wh - 1) * (2 * ww - 1), num_heads))
            nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
            coords = torch.stack(torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")).flatten(1)
            rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
            rel[:, :, 0] += wh - 1
            rel[:, :, 1] += ww - 1
            rel[:, :, 0] *= 2 * ww - 1
            self.register_buffer("relative_position_index", rel.sum(-1), persistent=False)

    def forward(self, x, mask=None):
        Bw, N, C = x.shape
        qkv = self.qkv(x).reshape(Bw, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        if self.rel_pos_bias:
            bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
            attn = attn + bias.reshape(N, N, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(Bw // nW, nW, self.num_heads, N, N) + mask.to(attn.dtype)[None, :, None]
            attn = attn.view(-1, self.num_heads, N, N)
        attn = attn.softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    def __init__(self, dim, resolution, num_heads, window_size, shift, cfg: NetConfig):
        super().__init__()
        H, W = resolution
        self.resolution = resolution
        self.window = (min(window_size, H), min(window_size, W))
        self.shift = (
            self.window[0] // 2 if shift and H > window_size else 0,
            self.window[1] // 2 if shift and W > window_size else 0,
        )
        self.norm1 = MultiLayerNorm(dim, cfg.num_domains, cfg.delta)
        self.attn = WindowAttention(dim, self.window, num_heads, cfg.rel_pos_bias)
        self.norm2 = MultiLayerNorm(dim, cfg.num_domains, cfg.delta)
        self.mlp = Mlp(dim, int(dim * cfg.mlp_ratio))
        if any(self.shift):
            self.register_buffer("attn_mask", shifted_window_mask(H, W, *self.window, *self.shift), persistent=False)
        else:
            self.attn_mask = None

    def forward(self, x, domain):
        B, L, C = x.shape
        H, W = self.resolution
        if L != H * W:
            raise ShapeError(f"block expects {H}x{W}={H * W} tokens, got {L}")
        h = self.norm1(x, domain).view(B, H, W, C)
        sy, sx = self.shift
        if sy or sx:
            h = cyclic_shift(h, sy, sx)
        wins = window_partition(h, *self.window)
        wins = self.attn(wins, self.attn_mask)
        h = window_reverse(wins, *self.window, H, W)
        if sy or sx:
            h = cyclic_shift(h, -sy, -sx)
        x = x + h.reshape(B, L, C)
        return x + self.mlp(self.norm2(x, domain))


def swin_block_pair(x, domain, blocks):
    """Apply a (W-MSA, SW-MSA) pair of blocks."""
    for blk in blocks:
        x = blk(x, domain)
    return x


class Stage(nn.Module):
    def __init__(self, dim, resolution, depth, num_heads, cfg):
        super().__init__()
        self.blocks = nn.ModuleList(
            SwinBlock(dim, resolution, num_heads, cfg.window_size, shift=(i % 2 == 1), cfg=cfg)
            for i in range(depth)
        )

    def forward(self, x, domain):
        for blk in self.blocks:
            x = blk(x, domain)
        return x


class PatchEmbed(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.proj = nn.Conv2d(cfg.in_chans, cfg.embed_dim, cfg.patch_size, cfg.patch_size)
        self.norm = MultiLayerNorm(cfg.embed_dim, cfg.num_domains, cfg.delta)

    def forward(self, x, domain):
        x = self.proj(x).flatten(2).transpose(1, 2)
        return self.norm(x, domain)


class PatchMerging(nn.Module):
    def __init__(self, resolution, dim, cfg):
        super().__init__()
        self.resolution = resolution
        self.norm = MultiLayerNorm(4 * dim, cfg.num_domains, cfg.delta)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x, domain):
        H, W = self.resolution
        B, L, C = x.shape
        x = x.view(B, H, W, C)
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], -1)
        x = x.reshape(B, -1, 4 * C)
        return self.reduction(self.norm(x, domain))


class PatchExpand(nn.Module):
    """Upsample tokens by ``scale`` and set the width to ``out_dim``."""

    def __init__(self, resolution, dim, out_dim, scale, cfg):
        super().__init__()
        self.resolution = resolution
        self.scale = scale
        self.out_dim = out_dim
        self.mode = cfg.upsample
        if self.mode == "expand":
            self.expand = nn.Linear(dim, scale * scale * out_dim, bias=False)
        else:
            self.expand = nn.Linear(dim, out_dim, bias=False)
        self.norm = MultiLayerNorm(out_dim, cfg.num_domains, cfg.delta)

    def forward(self, x, domain):
        H, W = self.resolution
        B = x.shape[0]
        s, c = self.scale, self.out_dim
        x = self.expand(x)
        if self.mode == "expand":
            x = x.view(B, H, W, s, s, c).permute(0, 1, 3, 2, 4, 5).reshape(B, H * s * W * s, c)
        else:
            x = x.view(B, H, W, c).permute(0, 3, 1, 2)
            x = F.interpolate(x, scale_factor=s, mode="bilinear", align_corners=False)
            x = x.flatten(2).transpose(1, 2)
        return self.norm(x, domain)


class MLNSwinUnet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        S = cfg.num_stages
        self.patch_embed = PatchEmbed(cfg)
        self.encoder = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i in range(S):
            self.encoder.append(Stage(cfg.stage_dim(i), cfg.stage_resolution(i), cfg.depths[i], cfg.num_heads[i], cfg))
            if i < S - 1:
                self.merges.append(PatchMerging(cfg.stage_resolution(i), cfg.stage_dim(i), cfg))
        self.norm = MultiLayerNorm(cfg.stage_dim(S - 1), cfg.num_domains, cfg.delta)
        self.expands = nn.ModuleList()
        self.skip_proj = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for j in reversed(range(S - 1)):
            self.expands.append(PatchExpand(cfg.stage_resolution(j + 1), cfg.stage_dim(j + 1), cfg.stage_dim(j), 2, cfg))
            self.skip_proj.append(nn.Linear(2 * cfg.stage_dim(j), cfg.stage_dim(j)))
            self.decoder.append(Stage(cfg.stage_dim(j), cfg.stage_resolution(j), cfg.depths[j], cfg.num_heads[j], cfg))
        self.norm_up = MultiLayerNorm(cfg.embed_dim, cfg.num_domains, cfg.delta)
        self.final_expand = PatchExpand(cfg.stage_resolution(0), cfg.embed_dim, cfg.embed_dim, cfg.patch_size, cfg)
        self.head = nn.Linear(cfg.embed_dim, cfg.num_classes)
        self.apply(_init_weights)
        for name, m in self.named_modules():
            if isinstance(m, MultiLayerNorm):
                m.site_id = name

    def forward(self, x: torch.Tensor, domain) -> torch.Tensor:
        """Per-pixel class logits (B, num_classes, H, W) for images (B, in_chans, H, W)."""
        cfg = self.cfg
        if x.dim() != 4 or x.shape[1] != cfg.in_chans or tuple(x.shape[-2:]) != cfg.input_size:
            raise ShapeError(f"expected (B, {cfg.in_chans}, {cfg.input_size[0]}, {cfg.input_size[1]}), got {tuple(x.shape)}")
        if isinstance(domain, torch.Tensor) and domain.shape != (x.shape[0],):
            raise ShapeError(f"per-sample domain labels must have shape ({x.shape[0]},)")
        x = self.patch_embed(x, domain)
        skips = []
        for i, stage in enumerate(self.encoder):
            x = stage(x, domain)
            if i < len(self.merges):
                skips.append(x)
                x = self.merges[i](x, domain)
        x = self.norm(x, domain)
        for expand, proj, stage in zip(self.expands, self.skip_proj, self.decoder):
            x = expand(x, domain)
            x = proj(torch.cat([x, skips.pop()], -1))
            x = stage(x, domain)
        x = self.norm_up(x, domain)
        x = self.final_expand(x, domain)
        logits = self.head(x)
        H, W = cfg.input_size
        return logits.transpose(1, 2).reshape(x.shape[0], cfg.num_classes, H, W)

    def predict_proba(self, x, domain):
        return torch.softmax(self(x, domain), dim=1)

    def ln_sites(self):
        return mln_sites(self)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def segment_forward(model: MLNSwinUnet, image, domain: int) -> np.ndarray:
    """Class probabilities (H, W, num_classes) for one 2-D image."""
    img = np.asarray(image)
    if img.shape != model.cfg.input_size:
        raise ShapeError(f"image shape {img.shape} != configured input size {model.cfg.input_size}")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(img, dtype=dtype)[None, None]
    with torch.no_grad():
        probs = model.predict_proba(x, domain)[0]
    return probs.permute(1, 2, 0).numpy()


def count_parameters(model: nn.Module, breakdown: bool = False):
    total = sum(p.numel() for p in model.parameters())
    if not breakdown:
        return total
    ln = sum(p.numel() for m in mln_sites(model) for p in m.parameters())
    return {"total": total, "backbone": total - ln, "ln_bank": ln}


def ln_params_per_branch(cfg: NetConfig) -> int:
    """Analytic LN parameter count of a single branch (2 x feature width per site)."""
    sites = [cfg.embed_dim]
    S = cfg.num_stages
    for i in range(S):
        sites += [cfg.stage_dim(i)] * 2 * cfg.depths[i]
        if i < S - 1:
            sites.append(4 * cfg.stage_dim(i))
    sites.append(cfg.stage_dim(S - 1))
    for j in reversed(range(S - 1)):
        sites.append(cfg.stage_dim(j))
        sites += [cfg.stage_dim(j)] * 2 * cfg.depths[j]
    sites += [cfg.embed_dim, cfg.embed_dim]
    return 2 * sum(sites)
