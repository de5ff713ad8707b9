"""Command-line entry point: ``mlnnet <command> [options]``.

Every command accepts ``--config FILE`` (JSON); explicit flags override the
file. Unknown keys are rejected before any work starts, and the resolved
configuration is written as ``config.json`` next to the outputs.

Exit codes: 0 ok, 2 config, 3 data, 4 integrity, 5 numeric.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import augment
from .branch_select import SelectOptions, fixed_branch_masks, select_branches, sum_mode_masks
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, MLNError
from .metrics import evaluate_case, summarize, write_csv
from .network import NetConfig, count_parameters, ln_params_per_branch
from .phantom import PhantomConfig, generate_dataset, list_stems, load_dataset, read_png, save_dataset, save_png
from .training import TrainConfig, train

log = logging.getLogger("mlnnet")

# keys each command accepts in its config file, with defaults
DEFAULTS = {
    "synth": {"phantom": {}, "n": 50, "split": "train", "bits": 8},
    "augment": {"spec": None, "split": "train", "preview_count": 4},
    "train": {"net": {}, "train": {}, "split": "train", "name": "model"},
    "infer": {"branch": "auto", "metric": "cosine", "correction": False,
              "selection_sense": "max_similarity", "batch_size": 16},
    "eval": {"spacing": 1.0},
    "stats": {},
}


def resolve_config(command: str, path, overrides: dict) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for '{command}': {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(cfg.get(key), dict) and isinstance(value, dict):
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    return cfg


def prepare_out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(out_dir: Path, command: str, cfg: dict) -> None:
    with open(out_dir / "config.json", "w") as fh:
        json.dump({"command": command, **cfg}, fh, indent=1, sort_keys=True)


def _load_spec(value):
    """Spec given inline (list), as a JSON string, or as a path to a JSON file."""
    if value is None or isinstance(value, list):
        return value
    text = str(value)
    if os.path.exists(text):
        with open(text) as fh:
            text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"augmentation spec is not valid JSON: {exc}") from None


# --- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config("synth", args.config, {"n": args.n, "split": args.split, "bits": args.bits})
    if args.seed is not None:
        cfg["phantom"]["seed"] = args.seed
    pc = PhantomConfig.from_dict(cfg["phantom"])
    if cfg["n"] < 1:
        raise ConfigError(f"n must be >= 1, got {cfg['n']}")
    cfg["phantom"] = pc.to_dict()
    out = prepare_out_dir(args.out, args.force)
    pairs = generate_dataset(pc, cfg["n"])
    save_dataset(pairs, out, cfg["split"], bits=cfg["bits"])
    echo_config(out, "synth", cfg)
    print(f"wrote {len(pairs)} image/mask pairs to {out / cfg['split']}")
    return 0


def intensity_histograms(images, bins=64):
    """Histogram over (0, 1) excluding pixels at exactly 0 and 1."""
    vals = np.concatenate([np.ravel(i) for i in images]) if images else np.zeros(0)
    vals = vals[(vals != 0.0) & (vals != 1.0)]
    counts, edges = np.histogram(vals, bins=bins, range=(0.0, 1.0))
    return counts, edges


def cmd_augment(args) -> int:
    cfg = resolve_config("augment", args.config, {"spec": args.spec, "split": args.split})
    spec = augment.parse_domain_spec(_load_spec(cfg["spec"]) or [d.to_json() for d in augment.default_domain_spec()])
    cfg["spec"] = [d.to_json() for d in spec]
    pairs, stems = load_dataset(args.input, cfg["split"], with_stems=True)
    out = prepare_out_dir(args.out, args.force)
    per_domain = {d: [] for d in range(len(spec))}
    for stem, pair in zip(stems, pairs):
        for s in augment.expand_domains(pair, spec):
            per_domain[s.domain].append(s.image)
            save_png(out / f"domain_{s.domain}" / "images" / f"{stem}.png", s.image, bits=16)
            save_png(out / f"domain_{s.domain}" / "masks" / f"{stem}.png", s.mask, binary=True)
    hist = {}
    for d, imgs in per_domain.items():
        counts, edges = intensity_histograms(imgs)
        hist[d] = {"kind": spec[d].kind, "counts": counts.tolist(), "edges": edges.tolist()}
    with open(out / "histograms.json", "w") as fh:
        json.dump(hist, fh)
    _plot_histograms(hist, out / "histograms.png")
    _plot_preview(per_domain, spec, cfg["preview_count"], out / "preview.png")
    echo_config(out, "augment", cfg)
    print(f"expanded {len(pairs)} images into {len(spec)} domains ({len(pairs) * len(spec)} outputs) at {out}")
    return 0


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _plot_histograms(hist, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for d, h in hist.items():
        centers = 0.5 * (np.array(h["edges"][1:]) + np.array(h["edges"][:-1]))
        ax.plot(centers, h["counts"], label=f"domain {d} ({h['kind']})")
    ax.set_xlabel("intensity (0 and 1 excluded)")
    ax.set_ylabel("pixel count")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_preview(per_domain, spec, n, path):
    plt = _pyplot()
    n = max(1, min(n, len(per_domain[0])))
    K = len(spec)
    fig, axes = plt.subplots(n, K, figsize=(2 * K, 2 * n), squeeze=False)
    for r in range(n):
        for d in range(K):
            ax = axes[r][d]
            ax.imshow(per_domain[d][r], cmap="gray", vmin=0, vmax=1)
            ax.set_axis_off()
            if r == 0:
                ax.set_title(f"{d}: {spec[d].kind}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def cmd_train(args) -> int:
    train_over = {k: v for k, v in {"max_epochs": args.epochs, "learning_rate": args.lr, "seed": args.seed}.items()
                  if v is not None}
    cfg = resolve_config("train", args.config, {"train": train_over, "name": args.name, "split": args.split})
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        # a resumed run keeps the checkpoint's network and domain spec unless overridden
        cfg["net"] = {**resume.net_config, **cfg["net"]}
        cfg["train"].setdefault("domain_spec", resume.domain_spec)
    tc = TrainConfig.from_dict(cfg["train"])
    net = dict(cfg["net"])
    net.setdefault("num_domains", len(tc.domains))
    nc = NetConfig.from_dict(net)
    cfg["train"], cfg["net"] = tc.to_dict(), nc.to_dict()
    dataset = load_dataset(args.data, cfg["split"])
    out = Path(args.out)
    if args.resume and out.exists():
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = prepare_out_dir(out, args.force)
    echo_config(out, "train", cfg)
    log_path = out / "train_log.jsonl"
    history = []
    mode = "a" if args.resume and log_path.exists() else "w"
    with open(log_path, mode) as fh:
        def on_epoch(rec):
            history.append(rec)
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            print(f"epoch {rec['epoch']} loss {rec['loss']:.4f}", flush=True)

        ckpt = train(tc, nc, dataset, resume=resume, on_epoch=on_epoch)
    path = save_checkpoint(ckpt, out / f"{cfg['name']}.mln")
    _plot_losses(log_path, out / "loss.png")
    print(f"checkpoint written to {path}")
    return 0


def _plot_losses(log_path, path):
    recs = [json.loads(line) for line in open(log_path) if line.strip()]
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in recs]
    ax.plot(epochs, [r["loss"] for r in recs], "k-", label="total")
    for b in range(len(recs[0]["branch_losses"])):
        ax.plot(epochs, [r["branch_losses"][b] for r in recs], "--", label=f"branch {b}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("Dice loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _image_dir(path) -> Path:
    p = Path(path)
    return p / "images" if (p / "images").is_dir() else p


def _mask_dir(path) -> Path:
    p = Path(path)
    return p / "masks" if (p / "masks").is_dir() else p


def _parse_branch(value: str, K: int):
    if value in ("auto", "sum"):
        return value, None
    if value.startswith("fixed:"):
        try:
            b = int(value.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad --branch value {value!r}") from None
        if not 0 <= b < K:
            raise ConfigError(f"--branch fixed:{b} out of range for {K} branches")
        return "fixed", b
    raise ConfigError(f"--branch must be auto, sum or fixed:<b>, got {value!r}")


def cmd_infer(args) -> int:
    cfg = resolve_config("infer", args.config, {"branch": args.branch, "metric": args.metric,
                                                "correction": args.correction or None})
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    mode, fixed = _parse_branch(cfg["branch"], ckpt.num_domains)
    opts = SelectOptions(cfg["metric"], bool(cfg["correction"]), cfg["selection_sense"], int(cfg["batch_size"]))
    img_dir = _image_dir(args.images)
    stems = list_stems(img_dir)
    if not stems:
        raise DataError(f"no PNG images in {img_dir}")
    images = np.stack([read_png(img_dir / f"{s}.png").astype(np.float32) for s in stems])
    out = prepare_out_dir(args.out, args.force)
    echo_config(out, "infer", cfg)
    (out / "masks").mkdir()
    if mode == "auto":
        masks, reports = select_branches(images, model, ckpt.signatures, opts)
        (out / "reports").mkdir()
        for s, r in zip(stems, reports):
            with open(out / "reports" / f"{s}.json", "w") as fh:
                json.dump(r.to_json(), fh, indent=1)
    elif mode == "sum":
        masks = sum_mode_masks(images, model, opts.batch_size)
    else:
        masks = fixed_branch_masks(images, model, fixed, opts.batch_size)
    for s, m in zip(stems, masks):
        save_png(out / "masks" / f"{s}.png", m, binary=True)
    print(f"wrote {len(stems)} masks to {out / 'masks'} (branch mode: {cfg['branch']})")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config("eval", args.config, {"spacing": args.spacing})
    if not float(cfg["spacing"]) > 0:
        raise ConfigError(f"spacing must be positive, got {cfg['spacing']}")
    pred_dir, gt_dir = _mask_dir(args.pred), _mask_dir(args.gt)
    gt_stems = list_stems(gt_dir)
    if not gt_stems:
        raise DataError(f"no ground-truth masks in {gt_dir}")
    missing = [s for s in gt_stems if not (pred_dir / f"{s}.png").exists()]
    if missing:
        raise DataError(f"missing predictions for: {', '.join(missing)}")
    branches = {}
    reports = Path(args.pred) / "reports"
    rows = []
    for s in gt_stems:
        gt = read_png(gt_dir / f"{s}.png") >= 0.5
        pred = read_png(pred_dir / f"{s}.png") >= 0.5
        if (reports / f"{s}.json").exists():
            branches[s] = json.load(open(reports / f"{s}.json"))["selected"]
        rows.append({"case_id": s, **evaluate_case(pred, gt, float(cfg["spacing"])), "selected_branch": branches.get(s)})
    summary = summarize(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out, summary)
    with open(out.with_suffix(".config.json"), "w") as fh:
        json.dump({"command": "eval", **cfg}, fh, indent=1, sort_keys=True)
    print(json.dumps({"cases": len(rows), **summary}))
    return 0


def cmd_stats(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    counts = count_parameters(model, breakdown=True)
    counts["ln_per_branch"] = ln_params_per_branch(model.cfg)
    report = {
        "num_domains": ckpt.num_domains,
        "domain_spec": ckpt.domain_spec,
        "parameters": counts,
        "signatures": [s.to_json() for s in ckpt.signatures],
        "meta": ckpt.meta,
    }
    text = json.dumps(report, indent=1)
    if args.json:
        Path(args.json).write_text(text)
    for s in ckpt.signatures:
        corr = f", m={s.m:.4f}" if s.m is not None else ""
        print(f"domain {s.domain}: {len(s.site_ids)} sites, mean u={np.mean(s.u):.4f}, mean sigma={np.mean(s.sigma):.4f}{corr}")
    print(f"parameters: total={counts['total']} backbone={counts['backbone']} ln_bank={counts['ln_bank']}")
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mlnnet", description="MLN-net segmentation pipeline")
    ap.add_argument("--workers", type=int, default=None, help="intra-op threads (default: all cores)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--split")
    p.add_argument("--bits", type=int, choices=(8, 16))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="expand a dataset into K intensity domains")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON array or path to a JSON file")
    p.add_argument("--split")
    p.add_argument("--seed", type=int, help="accepted for uniformity; augmentation is deterministic")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train an MLN network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name")
    p.add_argument("--split")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--branch", help="auto | sum | fixed:<b>")
    p.add_argument("--metric", choices=("cosine", "euclidean"))
    p.add_argument("--correction", action="store_true", help="append the correctional mean to signatures")
    p.add_argument("--seed", type=int, help="accepted for uniformity; inference is deterministic")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--spacing", type=float, help="pixel size in mm")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="dump signatures and parameter counts of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--json", help="also write the report to this file")
    p.set_defaults(func=cmd_stats)

    for p in sub.choices.values():
        p.add_argument("--config", help="JSON config file; flags override it")
        if p.prog.split()[-1] in ("synth", "augment", "train", "infer"):
            p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers is not None:
        if args.workers < 1:
            print("error: --workers must be >= 1", file=sys.stderr)
            return ConfigError.exit_code
        torch.set_num_threads(args.workers)
    try:
        return args.func(args)
    except MLNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
