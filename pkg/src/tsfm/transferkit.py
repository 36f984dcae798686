"""Transfer a pretrained checkpoint to a downstream configuration.

CNN weights are copied bit-exactly. Only the transformer bottleneck adapts:
positional embeddings are trilinearly resampled when the token grid changes,
and the output head is re-initialized when the class count changes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .checkpoint import Checkpoint
from .datapool import PoolManifest
from .errors import ArchitectureMismatch, PlanStale
from .losstrain import TrainConfig, train
from .model import HEAD_PREFIX, POS_EMBED, TRANSFORMER_PREFIX, TSFM, ModelConfig, build

FINETUNE_BUDGETS = (10, 20, 50, 100)


@dataclass
class SurgeryPlan:
    copied: list = field(default_factory=list)
    interpolated: list = field(default_factory=list)  # (name, old grid, new grid)
    reinitialized: list = field(default_factory=list)  # (name, reason)
    source_fingerprint: str = ""
    target_fingerprint: str = ""
    shapes: dict = field(default_factory=dict)

    def names(self) -> list:
        return self.copied + [n for n, _, _ in self.interpolated] + [n for n, _ in self.reinitialized]

    def to_json(self) -> str:
        doc = {
            "source_fingerprint": self.source_fingerprint,
            "target_fingerprint": self.target_fingerprint,
            "copied": [{"name": n, "shape": self.shapes[n]} for n in self.copied],
            "interpolated": [
                {"name": n, "shape": self.shapes[n], "old_grid": list(o), "new_grid": list(g)}
                for n, o, g in self.interpolated
            ],
            "reinitialized": [{"name": n, "shape": self.shapes[n], "reason": r} for n, r in self.reinitialized],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


@dataclass
class FinetuneBudget:
    epochs: int
    iters_per_epoch: int = 250
    lr0: float = 1e-3

    def __post_init__(self):
        if self.epochs < 0 or self.iters_per_epoch < 1 or self.lr0 <= 0:
            raise ValueError("fine-tuning budget values must be positive")

    def train_config(self, base: TrainConfig | None = None) -> TrainConfig:
        base = base or TrainConfig()
        return replace(base, epochs=self.epochs, iters_per_epoch=self.iters_per_epoch, lr0=self.lr0)


def _target_shapes(config: ModelConfig) -> dict:
    with torch.device("meta"):
        model = TSFM(config)
    return {k: tuple(v.shape) for k, v in model.state_dict().items()}


def is_cnn_weight(name: str) -> bool:
    return not (name.startswith(TRANSFORMER_PREFIX) or name.startswith(HEAD_PREFIX))


def plan_surgery(source: Checkpoint, target_config: ModelConfig) -> SurgeryPlan:
    target_config.validate()
    src_cfg = source.config
    for attr in ("num_stages", "base_channels", "in_channels", "blocks_per_stage"):
        if getattr(src_cfg, attr) != getattr(target_config, attr):
            raise ArchitectureMismatch(
                f"{attr} differs ({getattr(src_cfg, attr)} vs {getattr(target_config, attr)}); CNN weights cannot transfer"
            )
    target = _target_shapes(target_config)
    plan = SurgeryPlan(source_fingerprint=source.config_fingerprint, target_fingerprint=target_config.fingerprint())
    plan.shapes = {k: list(v) for k, v in target.items()}
    for name, shape in target.items():
        src = source.weights.get(name)
        if name.startswith(HEAD_PREFIX) and src_cfg.num_classes != target_config.num_classes:
            plan.reinitialized.append((name, "class-count-change"))
        elif src is not None and tuple(src.shape) == shape:
            plan.copied.append(name)
        elif name == POS_EMBED and src is not None and src.shape[-1] == shape[-1]:
            plan.interpolated.append((name, tuple(src_cfg.token_grid), tuple(target_config.token_grid)))
        elif not is_cnn_weight(name):
            plan.reinitialized.append((name, "shape-incompatible"))
        else:
            raise ArchitectureMismatch(f"CNN weight {name!r} has no shape-compatible source")
    return plan


def interpolate_pos_embed(pos_embed: np.ndarray, old_grid, new_grid) -> np.ndarray:
    """Resample a (1, N, hidden) embedding over its 3D token grid (align_corners=False)."""
    hidden = pos_embed.shape[-1]
    grid = pos_embed.reshape(tuple(old_grid) + (hidden,)).astype(np.float64)
    out = np.stack([kernels.resample_linear(grid[..., h], tuple(new_grid)) for h in range(hidden)], axis=-1)
    return out.reshape(1, -1, hidden).astype(np.float32)


def apply_surgery(plan: SurgeryPlan, source: Checkpoint, target_model: TSFM, seed: int = 0) -> TSFM:
    if plan.target_fingerprint != target_model.config.fingerprint() or plan.source_fingerprint != source.config_fingerprint:
        raise PlanStale("surgery plan was made for a different source or target configuration")
    fresh = build(target_model.config, seed=seed)
    fresh_state = fresh.state_dict()
    state = target_model.state_dict()
    with torch.no_grad():
        for name in plan.copied:
            state[name].copy_(torch.from_numpy(source.weights[name]))
        for name, old, new in plan.interpolated:
            state[name].copy_(torch.from_numpy(interpolate_pos_embed(source.weights[name], old, new)))
        for name, _ in plan.reinitialized:
            state[name].copy_(fresh_state[name])
    return target_model


def transfer(source: Checkpoint, target_config: ModelConfig, seed: int = 0):
    """Plan and apply surgery into a freshly built target model; returns (model, plan)."""
    plan = plan_surgery(source, target_config)
    model = build(target_config, seed=seed)
    return apply_surgery(plan, source, model, seed), plan


def cnn_parameter_names(model: TSFM) -> list:
    return [n for n, _ in model.named_parameters() if is_cnn_weight(n)]


def finetune(
    model: TSFM,
    pool: PoolManifest,
    budget: FinetuneBudget,
    base_config: TrainConfig | None = None,
    freeze_cnn: bool = False,
    out_dir=None,
    volumes=None,
    callbacks=(),
) -> Checkpoint:
    """Budgeted fine-tuning; the poly schedule is re-based to ``budget.epochs``."""
    cfg = budget.train_config(base_config)
    frozen = cnn_parameter_names(model) if freeze_cnn else ()
    return train(model, pool, cfg, callbacks=callbacks, out_dir=out_dir, volumes=volumes, frozen=frozen, tag="finetune")
