"""Training objective, optimizer, schedule and the epoch loop."""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from . import datapool, volumeio
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import AllClassesMasked, DivergedLoss, NonFiniteGradient
from .model import TSFM

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "masked_bce",
    "batch_dice_loss",
    "total_loss",
    "poly_lr",
    "sgd_nesterov_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class TrainConfig:
    epochs: int = 1000
    iters_per_epoch: int = 250
    batch_size: int = 2
    lr0: float = 1e-3
    momentum: float = 0.99
    weight_decay: float = 1e-3
    poly_exponent: float = 0.9
    dice_eps: float = 1e-5
    seed: int = 0
    oversample_foreground: float = 0.33
    val_fraction: float = 0.1
    val_every: int = 1
    val_overlap: float = 0.5

    def __post_init__(self):
        if self.epochs < 0 or self.iters_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, iters_per_epoch >= 1 and batch_size >= 1 are required")
        if self.lr0 <= 0 or self.weight_decay < 0 or self.dice_eps < 0:
            raise ValueError("lr0 must be positive; weight_decay and dice_eps non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.poly_exponent <= 0:
            raise ValueError("poly_exponent must be positive")

    @classmethod
    def from_mapping(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**dict(d))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    bce: torch.Tensor
    dice: torch.Tensor
    total: torch.Tensor
    active_class_count: int

    def as_floats(self) -> dict:
        return {"bce": self.bce.item(), "dice": self.dice.item(), "total": self.total.item()}


# ---------------------------------------------------------------- losses


def _mask_tensor(class_mask, logits):
    mask = torch.as_tensor(np.asarray(class_mask, dtype=bool))
    if mask.dim() == 1:
        if mask.shape[0] != logits.shape[1]:
            raise ValueError(f"class mask length {mask.shape[0]} != {logits.shape[1]} channels")
        mask = mask.unsqueeze(0).expand(logits.shape[0], -1)
    if tuple(mask.shape) != tuple(logits.shape[:2]):
        raise ValueError(f"class mask shape {tuple(mask.shape)} does not match logits {tuple(logits.shape[:2])}")
    return mask


def masked_bce(logits, target_onehot, class_mask):
    """Mean binary cross-entropy over masked-in (sample, class) channels and all voxels."""
    if logits.shape != target_onehot.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs target {tuple(target_onehot.shape)}")
    mask = _mask_tensor(class_mask, logits)
    if not mask.any():
        warnings.warn("all classes masked out of the BCE term", AllClassesMasked, stacklevel=2)
        return logits.sum() * 0.0
    z = logits.flatten(2)[mask]
    t = target_onehot.flatten(2)[mask].to(z.dtype)
    return F.binary_cross_entropy_with_logits(z, t, reduction="mean")


def batch_dice_loss(logits, target_onehot, class_mask, eps=1e-5):
    """Soft Dice per masked-in class, pooled over every voxel of every sample in the batch."""
    if logits.shape != target_onehot.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs target {tuple(target_onehot.shape)}")
    mask = _mask_tensor(class_mask, logits)
    classes = [c for c in range(logits.shape[1]) if mask[:, c].any()]
    if not classes:
        warnings.warn("all classes masked out of the Dice term", AllClassesMasked, stacklevel=2)
        return logits.sum() * 0.0
    zs = logits.flatten(2)
    ts = target_onehot.flatten(2).to(zs.dtype)
    losses = []
    for c in classes:
        sel = mask[:, c]
        p = torch.sigmoid(zs[sel, c])
        t = ts[sel, c]
        inter = (p * t).sum()
        losses.append(1.0 - (2.0 * inter + eps) / (p.sum() + t.sum() + eps))
    return torch.stack(losses).mean()


def total_loss(logits, target_onehot, class_mask, cfg: TrainConfig | None = None) -> LossBreakdown:
    eps = cfg.dice_eps if cfg is not None else 1e-5
    mask = _mask_tensor(class_mask, logits)
    active = int(mask.any(dim=0).sum())
    with warnings.catch_warnings():
        if active == 0:
            warnings.simplefilter("ignore", AllClassesMasked)
        bce = masked_bce(logits, target_onehot, mask)
        dice = batch_dice_loss(logits, target_onehot, mask, eps)
    if active == 0:
        warnings.warn("all classes masked; loss is zero", AllClassesMasked, stacklevel=2)
    return LossBreakdown(bce, dice, bce + dice, active)


def one_hot(labels, num_channels: int):
    """(B, D, H, W) integer labels -> (B, C+1, D, H, W) float one-hot."""
    lab = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    return F.one_hot(lab, num_channels).permute(0, 4, 1, 2, 3).to(torch.float32)


# ---------------------------------------------------------------- optimizer and schedule


def poly_lr(epoch, cfg: TrainConfig) -> float:
    if cfg.epochs == 0:
        return cfg.lr0
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr0 * (1.0 - epoch / cfg.epochs) ** cfg.poly_exponent


def _all_finite(g) -> bool:
    if isinstance(g, torch.Tensor):
        return bool(torch.isfinite(g).all())
    return bool(np.all(np.isfinite(g)))


def sgd_nesterov_step(weights: Mapping, grads: Mapping, velocity: Mapping, lr, momentum, weight_decay):
    """One SGD step with Nesterov momentum and weight decay folded into the gradient.

    ``g = grad + wd*w;  v' = mu*v + g;  w' = w - lr*(g + mu*v')``

    Works on dicts of torch tensors, numpy arrays or floats; returns new dicts.
    Raises ``NonFiniteGradient`` before touching anything if a gradient is NaN/Inf.
    """
    for name, g in grads.items():
        if not _all_finite(g):
            raise NonFiniteGradient(name)
    new_w, new_v = {}, {}
    for name, w in weights.items():
        if name not in grads:
            new_w[name], new_v[name] = w, velocity.get(name, 0.0 * w)
            continue
        g = grads[name] + weight_decay * w
        v = momentum * velocity.get(name, 0.0 * w) + g
        new_w[name] = w - lr * (g + momentum * v)
        new_v[name] = v
    return new_w, new_v


# ---------------------------------------------------------------- data


def split_cases(manifest: datapool.PoolManifest, val_fraction: float, seed: int):
    """Seeded per-dataset train/validation split; returns (train indices, val indices)."""
    train_idx, val_idx = [], []
    for di, spec in enumerate(manifest.datasets):
        idx = [c.case_index for c in manifest.cases if c.dataset_id == spec.dataset_id]
        n_val = int(math.floor(len(idx) * val_fraction))
        if n_val >= len(idx):
            n_val = len(idx) - 1
        rng = np.random.default_rng([int(seed), 7919, di])
        perm = rng.permutation(len(idx))
        val_idx += sorted(idx[i] for i in perm[:n_val])
        train_idx += sorted(idx[i] for i in perm[n_val:])
    return sorted(train_idx), sorted(val_idx)


class CaseStore:
    """Lazily loads cases, remapping labels into pool class ids once per case."""

    def __init__(self, manifest: datapool.PoolManifest, volumes: Mapping | None = None):
        self.manifest = manifest
        self._given = dict(volumes or {})
        self._cache: dict = {}

    def get(self, case_index: int) -> volumeio.Volume:
        if case_index not in self._cache:
            case = self.manifest.cases[case_index]
            if case_index in self._given:
                vol = self._given[case_index]
            else:
                spec = self.manifest.dataset(case.dataset_id)
                vol = volumeio.read_case(case.image, case.label, spec.modality)
            if vol.labels is not None:
                labels = datapool.remap_labels(vol.labels, self.manifest.remap, case.dataset_id)
                vol = volumeio.Volume(vol.data.astype(np.float32), vol.spacing, vol.modality, labels, vol.meta)
            self._cache[case_index] = (vol, np.flatnonzero(vol.labels) if vol.labels is not None else None)
        return self._cache[case_index][0]

    def foreground(self, case_index: int):
        self.get(case_index)
        return self._cache[case_index][1]


# ---------------------------------------------------------------- loop


def _validate(model, store, val_cases, cfg):
    from .infereval import binarize, dice, sliding_window_predict

    scores = []
    for idx in val_cases:
        vol = store.get(idx)
        case = store.manifest.cases[idx]
        mask = datapool.class_presence_mask(store.manifest, case.dataset_id)
        pm = sliding_window_predict(model, vol, model.config.patch_size, cfg.val_overlap, "gaussian")
        masks = binarize(pm, 0.5)
        for c in range(1, len(mask)):
            if mask[c]:
                scores.append(dice(masks[c], vol.labels == c))
    return float(np.mean(scores)) if scores else float("nan")


def train(
    model: TSFM,
    pool: datapool.PoolManifest,
    cfg: TrainConfig,
    callbacks: Iterable[Callable[[dict], None]] = (),
    out_dir=None,
    volumes: Mapping | None = None,
    frozen: Iterable[str] = (),
    tag: str = "train",
) -> Checkpoint:
    """Patch-based training on a dataset pool; returns the best checkpoint.

    Every iteration draws ``batch_size`` cases through the pool sampler, crops
    one patch per case (foreground-oversampled), and takes one Nesterov step at
    the epoch's poly-decayed learning rate. After each epoch ``latest.tsfm`` is
    written and the model is scored on the validation split; the best score is
    kept as ``best.tsfm``. When a pool has too few cases to hold out any, the
    training cases are used for model selection.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    callbacks = list(callbacks)
    frozen = set(frozen)
    num_channels = model.config.num_classes + 1
    if pool.num_classes + 1 > num_channels:
        raise ValueError(f"pool has {pool.num_classes} classes but the model head emits {num_channels - 1}")

    train_idx, val_idx = split_cases(pool, cfg.val_fraction, cfg.seed)
    if not val_idx:
        val_idx = list(train_idx)
    store = CaseStore(pool, volumes)
    train_pool = pool.subset(train_idx)
    presence = {
        s.dataset_id: np.pad(datapool.class_presence_mask(pool, s.dataset_id), (0, num_channels - pool.num_classes - 1))
        for s in pool.datasets
    }

    params = {n: p for n, p in model.named_parameters() if n not in frozen}
    for n, p in model.named_parameters():
        p.requires_grad_(n not in frozen)
    velocity = {n: torch.zeros_like(p) for n, p in params.items()}

    best = Checkpoint.from_model(model, epoch=0, best_metric=None)
    if cfg.epochs == 0:
        if out is not None:
            save_checkpoint(best, out / "best.tsfm")
        return best
    best_score = -math.inf
    state = datapool.SamplerState(cfg.seed)
    log_fh = open(out / f"{tag}_log.ndjson", "w", encoding="utf-8") if out is not None else None
    bad_steps = 0
    draw = 0
    try:
        for epoch in range(cfg.epochs):
            lr = poly_lr(epoch, cfg)
            model.train()
            for it in range(cfg.iters_per_epoch):
                t0 = time.perf_counter()
                images, labels, masks = [], [], []
                for _ in range(cfg.batch_size):
                    k, state = datapool.sample_case(state, train_pool)
                    idx = train_idx[k]
                    vol = store.get(idx)
                    rng = np.random.default_rng([int(cfg.seed), 104729, draw])
                    draw += 1
                    center = volumeio.choose_center(
                        vol, model.config.patch_size, cfg.oversample_foreground, rng, _fg=store.foreground(idx)
                    )
                    patch = volumeio.extract_patch(vol, model.config.patch_size, center=center)
                    images.append(patch.image)
                    labels.append(patch.label.astype(np.int64))
                    masks.append(presence[pool.cases[idx].dataset_id])
                x = torch.from_numpy(np.stack(images)).to(next(model.parameters()).dtype)
                target = one_hot(np.stack(labels), num_channels).to(x.dtype)
                logits = model(x)
                loss = total_loss(logits, target, np.stack(masks), cfg)
                if not torch.isfinite(loss.total):
                    bad_steps += 1
                    if bad_steps >= 2:
                        raise DivergedLoss(f"non-finite loss at epoch {epoch} iteration {it}")
                    model.zero_grad(set_to_none=True)
                    continue
                bad_steps = 0
                model.zero_grad(set_to_none=True)
                loss.total.backward()
                with torch.no_grad():
                    grads = {n: p.grad if p.grad is not None else torch.zeros_like(p) for n, p in params.items()}
                    weights = {n: p.detach() for n, p in params.items()}
                    new_w, velocity = sgd_nesterov_step(weights, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
                    for n, p in params.items():
                        p.copy_(new_w[n])
                record = {"tag": tag, "epoch": epoch, "iter": it, "lr": lr, **loss.as_floats(),
                          "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                for cb in callbacks:
                    cb(record)

            model.eval()
            latest = Checkpoint.from_model(model, epoch=epoch + 1, best_metric=best_score if best_score > -math.inf else None)
            if out is not None:
                save_checkpoint(latest, out / "latest.tsfm")
            last_epoch = epoch + 1 == cfg.epochs
            if cfg.val_every and ((epoch + 1) % cfg.val_every == 0 or last_epoch):
                with torch.no_grad():
                    score = _validate(model, store, val_idx, cfg)
                for cb in callbacks:
                    cb({"tag": tag, "epoch": epoch, "event": "validation", "mean_dice": score})
                if math.isfinite(score) and score > best_score:
                    best_score = score
                    best = Checkpoint.from_model(model, epoch=epoch + 1, best_metric=score)
                    if out is not None:
                        save_checkpoint(best, out / "best.tsfm")
            elif not cfg.val_every:
                best = latest
                if out is not None:
                    save_checkpoint(best, out / "best.tsfm")
    finally:
        if log_fh is not None:
            log_fh.close()
        for p in model.parameters():
            p.requires_grad_(True)
    if best_score == -math.inf and cfg.val_every:
        best = Checkpoint.from_model(model, epoch=cfg.epochs, best_metric=None)
        if out is not None:
            save_checkpoint(best, out / "best.tsfm")
    return best
