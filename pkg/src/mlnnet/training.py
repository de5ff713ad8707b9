"""Multi-branch Dice training.

Each step expands every sample of the batch into its K domain variants, runs
them through the network with per-sample domain labels (so each variant uses
its own LN branch), and sums one Dice loss per branch. During the final
epoch (or final batch) the LN sites record their input statistics, which
become the stored per-domain signatures.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch

from . import augment
from .branch_select import correctional_mean
from .checkpoint import Checkpoint
from .errors import ConfigError, DataError, NumericError
from .mln import extract_signatures, set_recording
from .network import MLNSwinUnet, NetConfig

log = logging.getLogger(__name__)


def dice_loss(c, z, smooth: float = 1e-5):
    """-(2/N) * sum_n (sum_i c*z + s) / (sum_i c + sum_i z + s).

    ``c`` and ``z`` have the class axis at dim 1: (B, N, ...) probabilities and
    one-hot targets. Sums over i run over every pixel of the batch. Works on
    torch tensors (differentiable) and numpy arrays.
    """
    if tuple(c.shape) != tuple(z.shape):
        raise ConfigError(f"dice_loss shape mismatch: {tuple(c.shape)} vs {tuple(z.shape)}")
    if isinstance(c, np.ndarray):
        c, z = torch.from_numpy(np.asarray(c, dtype=np.float64)), torch.from_numpy(np.asarray(z, dtype=np.float64))
        return float(dice_loss(c, z, smooth))
    n_classes = c.shape[1]
    dims = [d for d in range(c.dim()) if d != 1]
    inter = (c * z).sum(dims)
    denom = c.sum(dims) + z.sum(dims)
    return -(2.0 / n_classes) * ((inter + smooth) / (denom + smooth)).sum()


def total_loss(per_branch_losses: Sequence):
    if len(per_branch_losses) == 0:
        raise ConfigError("total_loss needs at least one branch loss")
    out = per_branch_losses[0]
    for v in per_branch_losses[1:]:
        out = out + v
    return out


def one_hot(mask: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B, H, W) integer labels -> (B, N, H, W) float one-hot."""
    return torch.nn.functional.one_hot(mask.long(), num_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


@dataclass
class TrainConfig:
    batch_size: int = 4
    max_epochs: int = 30
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-3
    seed: int = 0
    signature_window: str = "last_epoch"
    domain_spec: list = field(default_factory=lambda: [d.to_json() for d in augment.default_domain_spec()])
    round_robin: bool = False
    conventional_aug: bool = False
    dice_smooth: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.signature_window not in ("last_batch", "last_epoch"):
            raise ConfigError(f"signature_window must be last_batch or last_epoch, got {self.signature_window!r}")
        augment.parse_domain_spec(self.domain_spec)

    @property
    def domains(self) -> list[augment.DomainDef]:
        return augment.parse_domain_spec(self.domain_spec)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
                            weight_decay=cfg.weight_decay)


def _expand_batch(pairs, cfg: TrainConfig, domains, rng):
    images, masks, labels = [], [], []
    for image, mask in pairs:
        if cfg.conventional_aug:
            image, mask = augment.conventional_augment((image, mask), int(rng.integers(2**31)))
        for s in augment.expand_domains((image, mask), domains):
            images.append(s.image)
            masks.append(s.mask)
            labels.append(s.domain)
    return np.stack(images), np.stack(masks), np.array(labels)


def branch_losses(probs, target, labels, num_domains, smooth):
    out = {}
    for d in range(num_domains):
        sel = labels == d
        if bool(sel.any()):
            out[d] = dice_loss(probs[sel], target[sel], smooth)
    return out


def train(train_cfg: TrainConfig, net_cfg: NetConfig, dataset, resume: Checkpoint | None = None,
          on_epoch: Callable[[dict], None] | None = None, dtype=torch.float32) -> Checkpoint:
    """Train an MLN network on ``dataset`` (list of (image, mask)) and return a checkpoint."""
    if not dataset:
        raise DataError("training dataset is empty")
    domains = train_cfg.domains
    if len(domains) != net_cfg.num_domains:
        raise ConfigError(f"domain spec has {len(domains)} entries but the network has {net_cfg.num_domains} branches")
    K = net_cfg.num_domains
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model = MLNSwinUnet(net_cfg).to(dtype)
    opt = make_optimizer(model, train_cfg)
    start_epoch = 0
    if resume is not None:
        start_epoch = _restore(resume, model, opt, dtype)
        rng = np.random.default_rng([train_cfg.seed, start_epoch])

    n = len(dataset)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    final_epoch = start_epoch + train_cfg.max_epochs - 1
    corr_sum, corr_cnt = np.zeros(K), np.zeros(K)
    model.train()
    for epoch in range(start_epoch, final_epoch + 1):
        order = rng.permutation(n)
        epoch_losses = {d: [] for d in range(K)}
        epoch_total = []
        for step in range(steps_per_epoch):
            last = epoch == final_epoch
            recording = last and (train_cfg.signature_window == "last_epoch" or step == steps_per_epoch - 1)
            if recording and not model.patch_embed.norm.recording:
                set_recording(model, True, reset=True)
                corr_sum[:], corr_cnt[:] = 0, 0
            idx = order[step * train_cfg.batch_size:(step + 1) * train_cfg.batch_size]
            imgs, msks, labels = _expand_batch([dataset[i] for i in idx], train_cfg, domains, rng)
            if train_cfg.round_robin:
                keep = labels == (epoch * steps_per_epoch + step) % K
                imgs, msks, labels = imgs[keep], msks[keep], labels[keep]
            if recording:
                for img, lab in zip(imgs, labels):
                    try:
                        corr_sum[lab] += correctional_mean(img)
                        corr_cnt[lab] += 1
                    except ValueError:
                        log.info("constant image skipped for the correctional mean")
            x = torch.as_tensor(imgs, dtype=dtype)[:, None]
            lab_t = torch.as_tensor(labels, dtype=torch.long)
            target = one_hot(torch.as_tensor(msks), net_cfg.num_classes).to(dtype)
            probs = model.predict_proba(x, lab_t)
            losses = branch_losses(probs, target, lab_t, K, train_cfg.dice_smooth)
            loss = total_loss(list(losses.values()))
            if not torch.isfinite(loss):
                bad = [d for d, v in losses.items() if not torch.isfinite(v)]
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}, branch(es) {bad}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_total.append(loss.item())
            for d, v in losses.items():
                epoch_losses[d].append(v.item())
        record = {
            "epoch": epoch,
            "loss": float(np.mean(epoch_total)),
            "branch_losses": [float(np.mean(v)) if v else None for v in epoch_losses.values()],
        }
        log.debug("epoch %d loss %.4f", epoch, record["loss"])
        if on_epoch:
            on_epoch(record)
    set_recording(model, False)
    corr = [float(corr_sum[d] / corr_cnt[d]) if corr_cnt[d] else None for d in range(K)]
    signatures = extract_signatures(model, K, corr)
    model.eval()
    return make_checkpoint(model, opt, net_cfg, train_cfg, signatures, epochs_completed=final_epoch + 1,
                           final_loss=record["loss"])


def make_checkpoint(model, opt, net_cfg, train_cfg, signatures, epochs_completed, **meta) -> Checkpoint:
    tensors = {k: v.detach().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()}
    step = 0
    names = dict(model.named_parameters())
    for name, p in names.items():
        st = opt.state.get(p)
        if not st:
            continue
        step = int(st["step"])
        tensors[f"optim/{name}/exp_avg"] = st["exp_avg"].detach().to(torch.float32).numpy().copy()
        tensors[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"].detach().to(torch.float32).numpy().copy()
    return Checkpoint(
        net_config=net_cfg.to_dict(),
        train_config=train_cfg.to_dict(),
        domain_spec=list(train_cfg.domain_spec),
        signatures=signatures,
        tensors=tensors,
        meta={"epochs_completed": epochs_completed, "optimizer_step": step, **meta},
    )


def _restore(ckpt: Checkpoint, model, opt, dtype) -> int:
    saved = NetConfig.from_dict(ckpt.net_config)
    if saved != model.cfg:
        diff = {k: (v, getattr(model.cfg, k)) for k, v in saved.to_dict().items() if getattr(model.cfg, k) != v}
        raise ConfigError(f"resume checkpoint was trained with a different network config: {diff}")
    model.load_state_dict(ckpt.model_state())
    model.to(dtype)
    step = int(ckpt.meta.get("optimizer_step", 0))
    for name, p in model.named_parameters():
        key = f"optim/{name}/exp_avg"
        if key in ckpt.tensors:
            opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.from_numpy(ckpt.tensors[key].copy()).to(dtype),
                "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"optim/{name}/exp_avg_sq"].copy()).to(dtype),
            }
    return int(ckpt.meta.get("epochs_completed", 0))
