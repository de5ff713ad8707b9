"""Desk-scale single-source domain-generalization experiment.

SynthMammo-A is the identity-mapped phantom (source); SynthMammo-B holds two
target variants, gamma-mapped and contrast-inverted. For each seed an MLN
network (default 4-domain spec) and a single-branch baseline trained with
conventional geometric augmentation share one backbone configuration.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import augment
from .branch_select import SelectOptions, fixed_branch_masks, select_branches
from .metrics import evaluate_case, summarize
from .network import NetConfig
from .phantom import PhantomConfig, generate_dataset
from .training import TrainConfig, train

log = logging.getLogger(__name__)

# A smaller backbone than the NetConfig default so three seeds fit the time budget.
TOY_NET = {"embed_dim": 16, "num_heads": [2, 4, 8], "window_size": 4}


@dataclass
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    n_train: int = 100
    n_test: int = 50
    n_target: int = 50
    n_selection_tiles: int = 50
    tile: tuple[int, int] = (128, 128)
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    target_gamma: float = 1.8
    net: dict = field(default_factory=lambda: dict(TOY_NET))
    phantom: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        from .errors import ConfigError

        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        obj = dict(obj)
        for key in ("seeds", "tile"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def _phantoms(cfg: ExperimentConfig, seed: int, mapping: dict, n: int, stream: int):
    pc = PhantomConfig(**{**cfg.phantom, "seed": 1000 * seed + stream, "canvas": cfg.tile,
                          "modality_mapping": mapping})
    return generate_dataset(pc, n)


def build_datasets(cfg: ExperimentConfig, seed: int) -> dict:
    return {
        "train": _phantoms(cfg, seed, {"kind": "identity"}, cfg.n_train, 1),
        "source": _phantoms(cfg, seed, {"kind": "identity"}, cfg.n_test, 2),
        "gamma": _phantoms(cfg, seed, {"kind": "gamma", "gamma": cfg.target_gamma}, cfg.n_target, 3),
        "inverted": _phantoms(cfg, seed, {"kind": "invert"}, cfg.n_target, 4),
    }


def _dsc(masks, pairs) -> float:
    return summarize([evaluate_case(p, g) for p, (_, g) in zip(masks, pairs)])["dsc"]


def _images(pairs):
    return np.stack([img for img, _ in pairs])


def selection_sanity(model, signatures, pairs, n_tiles: int, spec=None) -> dict:
    """Tiles re-mapped with training-domain transforms should select their own branch."""
    domains = augment.parse_domain_spec(spec) if spec else augment.default_domain_spec()
    K = len(domains)
    tiles, labels = [], []
    for i in range(n_tiles):
        img, _ = pairs[i % len(pairs)]
        d = i % K
        tiles.append(domains[d].transform()(img))
        labels.append(d)
    _, reports = select_branches(np.stack(tiles), model, signatures, SelectOptions())
    picked = [r.selected for r in reports]
    hits = sum(p == d for p, d in zip(picked, labels))
    return {"n": n_tiles, "hits": int(hits), "rate": hits / n_tiles, "selected": picked, "expected": labels}


def run_seed(cfg: ExperimentConfig, seed: int, on_epoch: Callable[[str, dict], None] | None = None) -> dict:
    data = build_datasets(cfg, seed)
    out: dict = {"seed": seed}
    models = {}
    for name, K, extra in (("mln", 4, {}), ("baseline", 1, {"domain_spec": [{"kind": "identity"}],
                                                            "conventional_aug": True})):
        net = NetConfig.from_dict({**cfg.net, "input_size": list(cfg.tile), "num_domains": K})
        tc = TrainConfig(batch_size=cfg.batch_size, max_epochs=cfg.epochs, learning_rate=cfg.learning_rate,
                         seed=seed, **extra)
        t0 = time.perf_counter()
        history = []

        def record(r, name=name):
            history.append(r)
            if on_epoch:
                on_epoch(name, r)

        ckpt = train(tc, net, data["train"], on_epoch=record)
        models[name] = (ckpt.build_model(), ckpt.signatures)
        out[f"{name}_train_seconds"] = time.perf_counter() - t0
        out[f"{name}_final_loss"] = history[-1]["loss"]
        out[f"{name}_first_loss"] = history[0]["loss"]

    mln, sigs = models["mln"]
    base, _ = models["baseline"]
    for split in ("source", "gamma", "inverted"):
        pairs = data[split]
        imgs = _images(pairs)
        masks, reports = select_branches(imgs, mln, sigs)
        out[f"mln_{split}_dsc"] = _dsc(masks, pairs)
        out[f"mln_{split}_branches"] = np.bincount([r.selected for r in reports], minlength=4).tolist()
        out[f"baseline_{split}_dsc"] = _dsc(fixed_branch_masks(imgs, base, 0), pairs)
        per_branch = [fixed_branch_masks(imgs, mln, b) for b in range(4)]
        for b, m in enumerate(per_branch):
            out[f"branch{b}_{split}_dsc"] = _dsc(m, pairs)
        # sum mode is the union of the per-branch masks, so reuse them
        out[f"sum_{split}_dsc"] = _dsc(np.any(np.stack(per_branch), axis=0).astype(np.uint8), pairs)
    out["mln_target_dsc"] = (out["mln_gamma_dsc"] + out["mln_inverted_dsc"]) / 2
    out["baseline_target_dsc"] = (out["baseline_gamma_dsc"] + out["baseline_inverted_dsc"]) / 2
    out["selection"] = selection_sanity(mln, sigs, data["source"], cfg.n_selection_tiles)
    return out


def aggregate(per_seed: list[dict]) -> dict:
    def mean(key):
        vals = [r[key] for r in per_seed if not math.isnan(r[key])]
        return float(np.mean(vals)) if vals else float("nan")

    keys = [k for k, v in per_seed[0].items() if isinstance(v, float)]
    agg = {k: mean(k) for k in keys}
    agg["target_gain"] = agg["mln_target_dsc"] - agg["baseline_target_dsc"]
    agg["selection_rate_seed0"] = per_seed[0]["selection"]["rate"]
    return agg


def verdicts(agg: dict, per_seed: list[dict], seconds: float) -> dict:
    inv_ok = agg["baseline_inverted_dsc"] <= agg["sum_inverted_dsc"] <= agg["mln_inverted_dsc"]
    return {
        "source_dsc_ge_0.75": agg["mln_source_dsc"] >= 0.75,
        "target_gain_ge_5_points": agg["target_gain"] >= 0.05,
        "sum_between_baseline_and_mln_on_inverted": bool(inv_ok),
        "selection_ge_80pct": agg["selection_rate_seed0"] >= 0.8,
        "final_loss_lt_minus_half_k": all(r["mln_final_loss"] < -0.5 * 4 for r in per_seed),
        "runtime_le_30min": seconds <= 30 * 60,
    }


def run(cfg: ExperimentConfig, on_epoch=None) -> dict:
    t0 = time.perf_counter()
    per_seed = []
    for seed in cfg.seeds:
        log.info("seed %d", seed)
        per_seed.append(run_seed(cfg, seed, on_epoch))
    seconds = time.perf_counter() - t0
    agg = aggregate(per_seed)
    return {"config": asdict(cfg), "per_seed": per_seed, "aggregate": agg,
            "verdicts": verdicts(agg, per_seed, seconds), "seconds": seconds}


def dump(result: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(result, fh, indent=1, default=float)
