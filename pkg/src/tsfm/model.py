"""Resblock-backbone / transformer-bottleneck U-shaped segmentation network.

Layout for ``S`` stages with channels ``c_s = base * 2**s``::

    stem (Conv-IN-LeakyReLU)
    encoder[s], s < S-1:  blocks[s] x ResBlock(c_s)  ->  DownBlock(c_s -> c_{s+1})
    bottleneck:           blocks[S-1] x ResBlock(c_{S-1})  ->  transformer (residual)
    decoder[s], s < S-1:  Upsample(c_{s+1} -> c_s) ++ skip  ->  ResBlock(2c_s -> c_s), (blocks[s]-1) x ResBlock(c_s)
    head:                 1x1x1 conv -> C+1 logits
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    ConfigInvariantViolation,
    DivisibilityError,
    OddSpatialDim,
    ShapeMismatch,
    SkipShapeMismatch,
    TokenCountMismatch,
)

NEG_SLOPE = 0.01
IN_EPS = 1e-5
LN_EPS = 1e-6

TRANSFORMER_PREFIX = "bottleneck.transformer."
POS_EMBED = TRANSFORMER_PREFIX + "pos_embed"
HEAD_PREFIX = "head."


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 12
    hidden: int = 768
    heads: int = 12
    mlp_ratio: int = 4
    pos_tokens: int = 0  # 0: derive from the patch size


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    num_stages: int = 5
    base_channels: int = 32
    blocks_per_stage: tuple = (1, 1, 1, 1, 1)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    patch_size: tuple = (112, 160, 192)
    in_channels: int = 1
    preset_name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if isinstance(self.transformer, dict):
            object.__setattr__(self, "transformer", TransformerConfig(**self.transformer))
        if self.transformer.pos_tokens == 0 and len(self.patch_size) == 3 and self.num_stages >= 1:
            grid = self._grid_unchecked()
            object.__setattr__(self, "transformer", replace(self.transformer, pos_tokens=math.prod(grid)))

    def _grid_unchecked(self):
        f = 2 ** (self.num_stages - 1)
        return tuple(p // f for p in self.patch_size)

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    @property
    def token_grid(self) -> tuple:
        return self._grid_unchecked()

    def validate(self) -> "ModelConfig":
        t = self.transformer
        problems = []
        if self.in_channels < 1 or self.num_classes < 1 or self.base_channels < 1:
            problems.append("in_channels, num_classes and base_channels must be positive")
        if self.num_stages < 2:
            problems.append(f"num_stages must be >= 2, got {self.num_stages}")
        if len(self.blocks_per_stage) != self.num_stages or any(b < 1 for b in self.blocks_per_stage):
            problems.append(f"blocks_per_stage must hold {self.num_stages} positive ints, got {self.blocks_per_stage}")
        if len(self.patch_size) != 3:
            problems.append(f"patch_size must be 3D, got {self.patch_size}")
        else:
            f = 2 ** (self.num_stages - 1)
            bad = [p for p in self.patch_size if p < f or p % f]
            if bad:
                problems.append(f"patch_size {self.patch_size} not divisible by 2^(S-1)={f}")
        if t.layers < 1 or t.hidden < 1 or t.heads < 1 or t.mlp_ratio < 1:
            problems.append("transformer dimensions must be positive")
        elif t.hidden % t.heads:
            problems.append(f"hidden {t.hidden} not divisible by heads {t.heads}")
        if not problems and t.pos_tokens != math.prod(self.token_grid):
            problems.append(f"pos_tokens {t.pos_tokens} != bottleneck grid {self.token_grid}")
        if problems:
            raise ConfigInvariantViolation("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["transformer"] = TransformerConfig(**d.get("transformer", {}))
        return cls(**d)

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("preset_name", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_presets() -> dict:
    text = resources.files(__package__).joinpath("presets.json").read_text(encoding="utf-8")
    return json.loads(text)


def preset(name: str, **overrides) -> ModelConfig:
    presets = load_presets()
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    d = dict(presets[name])
    d.update(overrides)
    d["preset_name"] = name
    if "patch_size" in overrides:
        t = dict(d.get("transformer", {}))
        t["pos_tokens"] = 0
        d["transformer"] = t
    return ModelConfig.from_dict(d).validate()


# ---------------------------------------------------------------- blocks


def _conv3(cin, cout, stride=1):
    return nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=True)


def _norm(c):
    return nn.InstanceNorm3d(c, eps=IN_EPS, affine=True, track_running_stats=False)


class Stem(nn.Module):
    """Block A: a single Conv-IN-LeakyReLU."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = _conv3(cin, cout)
        self.norm = _norm(cout)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), NEG_SLOPE)


class ResBlock(nn.Module):
    """Pre-activation residual block: ``shortcut(x) + conv(act(norm(conv(act(norm(x))))))``.

    With ``stride=2`` and ``cout=2*cin`` this is the downsampling block (C).
    A 1x1x1 projection shortcut is used whenever the shape changes.
    """

    def __init__(self, cin, cout=None, stride=1):
        super().__init__()
        cout = cin if cout is None else cout
        self.cin, self.cout, self.stride = cin, cout, stride
        self.norm1 = _norm(cin)
        self.conv1 = _conv3(cin, cout, stride)
        self.norm2 = _norm(cout)
        self.conv2 = _conv3(cout, cout)
        self.shortcut = nn.Conv3d(cin, cout, 1, stride=stride) if (cin != cout or stride != 1) else None

    def residual(self, x):
        h = self.conv1(F.leaky_relu(self.norm1(x), NEG_SLOPE))
        return self.conv2(F.leaky_relu(self.norm2(h), NEG_SLOPE))

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.cin:
            raise ShapeMismatch(f"expected (N,{self.cin},D,H,W) input, got {tuple(x.shape)}")
        if self.stride == 2 and any(s % 2 for s in x.shape[2:]):
            raise OddSpatialDim(f"downsampling needs even spatial dims, got {tuple(x.shape[2:])}")
        skip = x if self.shortcut is None else self.shortcut(x)
        return skip + self.residual(x)


class Upsample(nn.Module):
    """Block E: trilinear x2, 1x1x1 conv halving channels, concatenation with the skip."""

    def __init__(self, cin):
        super().__init__()
        self.cin = cin
        self.conv = nn.Conv3d(cin, cin // 2, 1)

    def forward(self, x, skip):
        want = (x.shape[0], self.cin // 2) + tuple(2 * s for s in x.shape[2:])
        if x.shape[1] != self.cin or tuple(skip.shape) != want:
            raise SkipShapeMismatch(f"input {tuple(x.shape)} and skip {tuple(skip.shape)} do not pair")
        up = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        return torch.cat([self.conv(up), skip], dim=1)


class Attention(nn.Module):
    def __init__(self, hidden, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)

    def forward(self, x):
        n, t, h = x.shape
        q, k, v = self.qkv(x).reshape(n, t, 3, self.heads, h // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(h // self.heads)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(n, t, h))


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer."""

    def __init__(self, hidden, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, eps=LN_EPS)
        self.attn = Attention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden, eps=LN_EPS)
        self.fc1 = nn.Linear(hidden, hidden * mlp_ratio)
        self.fc2 = nn.Linear(hidden * mlp_ratio, hidden)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class TransformerBottleneck(nn.Module):
    """Block D: tokens are the bottleneck voxels; output is added back to the input."""

    def __init__(self, channels, cfg: TransformerConfig, grid):
        super().__init__()
        self.channels = channels
        self.grid = tuple(grid)
        self.in_proj = nn.Conv3d(channels, cfg.hidden, 1)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.pos_tokens, cfg.hidden))
        self.layers = nn.ModuleList(EncoderLayer(cfg.hidden, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.hidden, eps=LN_EPS)
        self.out_proj = nn.Linear(cfg.hidden, channels)

    def positional(self, grid, interpolate=False):
        if tuple(grid) == self.grid:
            return self.pos_embed
        if not interpolate:
            raise TokenCountMismatch(
                f"bottleneck grid {tuple(grid)} ({math.prod(grid)} tokens) != trained grid {self.grid} "
                f"({self.pos_embed.shape[1]} tokens)"
            )
        h = self.pos_embed.shape[-1]
        pe = self.pos_embed.reshape(1, *self.grid, h).permute(0, 4, 1, 2, 3)
        pe = F.interpolate(pe, size=tuple(grid), mode="trilinear", align_corners=False)
        return pe.permute(0, 2, 3, 4, 1).reshape(1, -1, h)

    def forward(self, x, interpolate_pos=False):
        if x.dim() != 5 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"expected (N,{self.channels},d,h,w) input, got {tuple(x.shape)}")
        n, c, d, hh, w = x.shape
        tokens = self.in_proj(x).flatten(2).transpose(1, 2)
        tokens = tokens + self.positional((d, hh, w), interpolate_pos)
        for layer in self.layers:
            tokens = layer(tokens)
        out = self.out_proj(self.norm(tokens))
        return x + out.transpose(1, 2).reshape(n, c, d, hh, w)


class Bottleneck(nn.Module):
    def __init__(self, channels, n_blocks, tcfg, grid):
        super().__init__()
        self.blocks = nn.ModuleList(ResBlock(channels) for _ in range(n_blocks))
        self.transformer = TransformerBottleneck(channels, tcfg, grid)

    def forward(self, x, interpolate_pos=False):
        for b in self.blocks:
            x = b(x)
        return self.transformer(x, interpolate_pos)


class EncoderStage(nn.Module):
    def __init__(self, channels, n_blocks):
        super().__init__()
        self.blocks = nn.ModuleList(ResBlock(channels) for _ in range(n_blocks))
        self.down = ResBlock(channels, 2 * channels, stride=2)

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x, self.down(x)


class DecoderStage(nn.Module):
    def __init__(self, channels, n_blocks):
        super().__init__()
        self.up = Upsample(2 * channels)
        self.blocks = nn.ModuleList([ResBlock(2 * channels, channels)] + [ResBlock(channels) for _ in range(n_blocks - 1)])

    def forward(self, x, skip):
        x = self.up(x, skip)
        for b in self.blocks:
            x = b(x)
        return x


class TSFM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        S, c = config.num_stages, config.channels
        self.stem = Stem(config.in_channels, c(0))
        self.encoder = nn.ModuleList(EncoderStage(c(s), config.blocks_per_stage[s]) for s in range(S - 1))
        self.bottleneck = Bottleneck(c(S - 1), config.blocks_per_stage[S - 1], config.transformer, config.token_grid)
        self.decoder = nn.ModuleList(DecoderStage(c(s), config.blocks_per_stage[s]) for s in range(S - 1))
        self.head = nn.Conv3d(c(0), config.num_classes + 1, 1)

    def forward(self, x, interpolate_pos=False):
        f = 2 ** (self.config.num_stages - 1)
        if x.dim() != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatch(f"expected (N,{self.config.in_channels},D,H,W) input, got {tuple(x.shape)}")
        if any(s % f for s in x.shape[2:]):
            raise DivisibilityError(f"spatial dims {tuple(x.shape[2:])} not divisible by {f}")
        x = self.stem(x)
        skips = []
        for stage in self.encoder:
            skip, x = stage(x)
            skips.append(skip)
        x = self.bottleneck(x, interpolate_pos)
        for s in reversed(range(len(self.decoder))):
            x = self.decoder[s](x, skips[s])
        return self.head(x)

    def named_weights(self) -> dict:
        return {k: v for k, v in self.state_dict().items()}


# ---------------------------------------------------------------- functional entry points


def resblock_forward(x, block: ResBlock):
    return block(x)


def downsample_forward(x, block: ResBlock):
    if block.stride != 2:
        raise ShapeMismatch("block is not a downsampling block")
    return block(x)


def upsample_forward(x, skip, block: Upsample):
    return block(x, skip)


def bottleneck_forward(x, block: TransformerBottleneck, interpolate_pos=False):
    return block(x, interpolate_pos)


def forward(model: TSFM, batch):
    return model(batch)


# ---------------------------------------------------------------- initialization


def init_weights(model: nn.Module, seed: int = 0) -> nn.Module:
    """Kaiming-normal convs (LeakyReLU gain), truncated-normal(0.02) linears and
    positional embeddings, identity norms, zero biases, zero transformer output
    projection. Deterministic for a given seed."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, m in model.named_modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, a=NEG_SLOPE, nonlinearity="leaky_relu", generator=g)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04, generator=g)
                nn.init.zeros_(m.bias)
            elif isinstance(m, (nn.InstanceNorm3d, nn.LayerNorm)):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            if isinstance(m, TransformerBottleneck):
                nn.init.trunc_normal_(m.pos_embed, std=0.02, a=-0.04, b=0.04, generator=g)
        for m in model.modules():
            if isinstance(m, TransformerBottleneck):
                nn.init.zeros_(m.out_proj.weight)
                nn.init.zeros_(m.out_proj.bias)
    return model


def build(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> TSFM:
    model = TSFM(config)
    init_weights(model, seed)
    return model.to(dtype)


# ---------------------------------------------------------------- analytic parameter count


def _conv(k, cin, cout):
    return k ** 3 * cin * cout + cout


def _resblock(cin, cout=None, stride=1):
    cout = cin if cout is None else cout
    n = 2 * cin + _conv(3, cin, cout) + 2 * cout + _conv(3, cout, cout)
    if cin != cout or stride != 1:
        n += _conv(1, cin, cout)
    return n


def _transformer(channels, t: TransformerConfig):
    h, m = t.hidden, t.hidden * t.mlp_ratio
    layer = 4 * h + (3 * h * h + 3 * h) + (h * h + h) + (h * m + m) + (m * h + h)
    return _conv(1, channels, h) + t.pos_tokens * h + t.layers * layer + 2 * h + (h * channels + channels)


def param_count(config: ModelConfig) -> int:
    """Exact trainable-parameter total, computed without allocating weights."""
    config.validate()
    S, c, blocks = config.num_stages, config.channels, config.blocks_per_stage
    n = _conv(3, config.in_channels, c(0)) + 2 * c(0)
    for s in range(S - 1):
        n += blocks[s] * _resblock(c(s)) + _resblock(c(s), c(s + 1), 2)
        n += _conv(1, c(s + 1), c(s)) + _resblock(2 * c(s), c(s)) + (blocks[s] - 1) * _resblock(c(s))
    n += blocks[S - 1] * _resblock(c(S - 1)) + _transformer(c(S - 1), config.transformer)
    n += _conv(1, c(0), config.num_classes + 1)
    return n


def param_breakdown(config: ModelConfig) -> dict:
    S, c, blocks = config.num_stages, config.channels, config.blocks_per_stage
    enc = sum(blocks[s] * _resblock(c(s)) + _resblock(c(s), c(s + 1), 2) for s in range(S - 1))
    dec = sum(
        _conv(1, c(s + 1), c(s)) + _resblock(2 * c(s), c(s)) + (blocks[s] - 1) * _resblock(c(s)) for s in range(S - 1)
    )
    return {
        "stem": _conv(3, config.in_channels, c(0)) + 2 * c(0),
        "encoder": enc,
        "bottleneck_cnn": blocks[S - 1] * _resblock(c(S - 1)),
        "transformer": _transformer(c(S - 1), config.transformer),
        "decoder": dec,
        "head": _conv(1, c(0), config.num_classes + 1),
        "total": param_count(config),
    }


def enumerate_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
