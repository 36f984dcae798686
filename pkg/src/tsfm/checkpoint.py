"""``.tsfm`` checkpoint container.

Layout: 8-byte magic, u32 format version, u64 manifest length, UTF-8 JSON
manifest, then every tensor as raw little-endian float32 in manifest order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FingerprintMismatch, IncompatibleVersion
from .model import TSFM, ModelConfig, build

MAGIC = b"TSFMCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    weights: dict
    config: ModelConfig
    epoch: int = 0
    best_metric: float | None = None
    format_version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    @property
    def config_fingerprint(self) -> str:
        return self.config.fingerprint()

    @classmethod
    def from_model(cls, model: TSFM, epoch=0, best_metric=None, **extra) -> "Checkpoint":
        weights = {
            k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()
        }
        return cls(weights, model.config, int(epoch), best_metric, FORMAT_VERSION, dict(extra))

    def to_model(self, seed=0, dtype=torch.float32) -> TSFM:
        model = build(self.config, seed=seed, dtype=dtype)
        load_into(model, self)
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    best = ckpt.best_metric
    if best is not None and not math.isfinite(best):
        best = None
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "config_fingerprint": ckpt.config_fingerprint,
        "epoch": int(ckpt.epoch),
        "best_metric": best,
        "extra": ckpt.extra,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "dtype": "float32"} for name, arr in ckpt.weights.items()
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for arr in ckpt.weights.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise IncompatibleVersion(f"{path}: not a tsfm checkpoint")
    version, mlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise IncompatibleVersion(f"{path}: checkpoint format {version}, expected {FORMAT_VERSION}")
    try:
        manifest = json.loads(raw[20:20 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IncompatibleVersion(f"{path}: corrupt or truncated manifest") from exc
    config = ModelConfig.from_dict(manifest["config"])
    if config.fingerprint() != manifest["config_fingerprint"]:
        raise IncompatibleVersion(f"{path}: manifest fingerprint does not match its config")
    pos = 20 + mlen
    weights = {}
    for t in manifest["tensors"]:
        n = math.prod(t["shape"])
        if pos + 4 * n > len(raw):
            raise IncompatibleVersion(f"{path}: truncated at tensor {t['name']!r}")
        weights[t["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(t["shape"]).astype(np.float32)
        pos += 4 * n
    if pos != len(raw):
        raise IncompatibleVersion(f"{path}: {len(raw) - pos} trailing bytes")
    best = manifest.get("best_metric")
    return Checkpoint(weights, config, manifest["epoch"], best, version, manifest.get("extra", {}))


def load_into(model: TSFM, ckpt: Checkpoint) -> TSFM:
    """Copy checkpoint weights into a model of the identical configuration."""
    if model.config.fingerprint() != ckpt.config_fingerprint:
        raise FingerprintMismatch(
            f"checkpoint config {ckpt.config_fingerprint} ({ckpt.config.preset_name}) does not match model "
            f"config {model.config.fingerprint()} ({model.config.preset_name}); use transfer surgery instead"
        )
    state = model.state_dict()
    if set(state) != set(ckpt.weights):
        raise FingerprintMismatch("checkpoint tensor names differ from the model")
    with torch.no_grad():
        for name, tensor in state.items():
            arr = ckpt.weights[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise FingerprintMismatch(f"{name}: shape {arr.shape} != {tuple(tensor.shape)}")
            tensor.copy_(torch.from_numpy(arr))
    return model
