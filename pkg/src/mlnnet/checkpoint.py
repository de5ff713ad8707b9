"""``.mln`` checkpoint archives.

An archive is an uncompressed zip with two members:

``manifest.json``
    net/train configs, the domain spec, one signature per domain, and a
    tensor index of ``{name, shape, dtype, offset, length}`` records.
``weights.bin``
    the tensors, little-endian float32, concatenated in index order.

Zip member timestamps are pinned so equal checkpoints give equal bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError
from .mln import DomainSignature
from .network import MLNSwinUnet, NetConfig

FORMAT = "mln-checkpoint"
VERSION = 1
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    net_config: dict
    train_config: dict
    domain_spec: list
    signatures: list[DomainSignature]
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def num_domains(self) -> int:
        return int(self.net_config["num_domains"])

    def manifest(self) -> dict:
        index, offset = [], 0
        for name, arr in self.tensors.items():
            length = int(arr.size) * 4
            index.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "length": length})
            offset += length
        return {
            "format": FORMAT,
            "version": VERSION,
            "net_config": self.net_config,
            "train_config": self.train_config,
            "domain_spec": self.domain_spec,
            "signatures": [s.to_json() for s in self.signatures],
            "meta": self.meta,
            "tensors": index,
        }

    def blob(self) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.tensors.values())

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if not k.startswith("optim/")}

    def build_model(self, dtype=torch.float32) -> MLNSwinUnet:
        model = MLNSwinUnet(NetConfig.from_dict(self.net_config))
        state = self.model_state()
        expected = set(model.state_dict())
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise IntegrityError(f"tensor set does not match the network: missing={missing[:5]} extra={extra[:5]}")
        model.load_state_dict(state)
        return model.to(dtype).eval()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    manifest = json.dumps(ckpt.manifest(), indent=1, sort_keys=True).encode()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in (("manifest.json", manifest), ("weights.bin", ckpt.blob())):
            info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    return path


def read_archive(path) -> tuple[dict, bytes]:
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if not {"manifest.json", "weights.bin"} <= names:
                raise IntegrityError(f"{path}: archive lacks manifest.json or weights.bin")
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("weights.bin")
    except (zipfile.BadZipFile, zipfile.LargeZipFile, EOFError, OSError, KeyError) as exc:
        raise IntegrityError(f"{path}: unreadable checkpoint archive ({exc})") from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: manifest is not valid JSON ({exc})") from None
    return manifest, blob


def validate_index(index: list[dict], blob_len: int):
    """Offsets must be non-overlapping, consistent with shapes, and tile the blob exactly."""
    pos = 0
    for rec in sorted(index, key=lambda r: r["offset"]):
        if rec.get("dtype") != "float32":
            raise IntegrityError(f"tensor {rec.get('name')}: unsupported dtype {rec.get('dtype')}")
        n = int(np.prod(rec["shape"], dtype=np.int64)) if rec["shape"] else 1
        if rec["length"] != 4 * n:
            raise IntegrityError(f"tensor {rec['name']}: length {rec['length']} does not match shape {rec['shape']}")
        if rec["offset"] < pos:
            raise IntegrityError(f"tensor {rec['name']}: overlaps the previous tensor")
        if rec["offset"] > pos:
            raise IntegrityError(f"tensor {rec['name']}: gap before offset {rec['offset']}")
        pos = rec["offset"] + rec["length"]
    if pos != blob_len:
        raise IntegrityError(f"tensor index covers {pos} bytes but weights.bin holds {blob_len}")


def load_checkpoint(path) -> Checkpoint:
    manifest, blob = read_archive(path)
    if manifest.get("format") != FORMAT:
        raise IntegrityError(f"{path}: not an MLN checkpoint")
    try:
        index = manifest["tensors"]
        validate_index(index, len(blob))
        k = int(manifest["net_config"]["num_domains"])
        sigs = [DomainSignature.from_json(s) for s in manifest["signatures"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"{path}: malformed manifest ({exc})") from None
    if len(sigs) != k:
        raise IntegrityError(f"{path}: {len(sigs)} signatures stored for {k} domains")
    if sorted(s.domain for s in sigs) != list(range(k)):
        raise IntegrityError(f"{path}: signature domain labels are not 0..{k - 1}")
    if len(manifest.get("domain_spec", [])) != k:
        raise IntegrityError(f"{path}: domain spec length does not match {k} domains")
    tensors = {}
    for rec in index:
        raw = np.frombuffer(blob, dtype="<f4", count=rec["length"] // 4, offset=rec["offset"])
        tensors[rec["name"]] = raw.reshape(rec["shape"]).astype(np.float32)
    return Checkpoint(
        net_config=manifest["net_config"],
        train_config=manifest["train_config"],
        domain_spec=manifest["domain_spec"],
        signatures=sorted(sigs, key=lambda s: s.domain),
        tensors=tensors,
        meta=manifest.get("meta", {}),
    )
