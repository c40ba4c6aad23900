"""Hierarchical Siamese change-detection network.

Both acquisitions pass through one shared residual encoder. At the deepest
``diff_block_levels`` stages the two feature maps are compared by a
difference block (absolute difference followed by a small pre-norm
transformer over spatial tokens); shallower stages are forwarded as
concatenated skips. A chain of up-sampling decoders fuses the levels back to
full resolution, where a final merge with stride-1 stem features precedes a
1x1 projection to per-class logits.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidInputError


@dataclass
class ModelConfig:
    input_side: int = 512
    in_channels: int = 3
    num_classes: int = 5
    stage_channels: list[int] = field(default_factory=lambda: [64, 128, 256, 256])
    stem_channels: int = 32
    diff_block_levels: int = 3
    attn_layers_per_diff_block: int = 2
    attn_heads: int = 4
    mlp_ratio: int = 4
    # 128 x 128 tokens, i.e. the second stage of a 512 input
    max_attn_tokens: int = 16384
    upsample: str = "bilinear"
    # smooth by default so finite-difference gradient checks are meaningful
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]

    @classmethod
    def reduced(cls, input_side: int = 128, **overrides) -> "ModelConfig":
        """Desk-scale configuration used by tests and the synthetic fixture."""
        kw = dict(input_side=input_side, stage_channels=[16, 32, 64, 64], stem_channels=8)
        kw.update(overrides)
        return cls(**kw)

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def diff_levels(self) -> list[int]:
        return list(range(self.num_stages - self.diff_block_levels, self.num_stages))

    def stage_side(self, stage: int, side: Optional[int] = None) -> int:
        return (side or self.input_side) // 2 ** (stage + 1)

    def validate(self) -> "ModelConfig":
        if not self.stage_channels:
            raise ConfigurationError("stage_channels must not be empty")
        if any(c <= 0 for c in self.stage_channels):
            raise ConfigurationError(f"stage_channels must be positive: {self.stage_channels}")
        if self.input_side % 2 ** self.num_stages:
            raise ConfigurationError(
                f"input_side {self.input_side} not divisible by 2**{self.num_stages}"
            )
        if not 0 <= self.diff_block_levels <= self.num_stages - 1:
            raise ConfigurationError(
                f"diff_block_levels must be in [0, {self.num_stages - 1}], "
                f"got {self.diff_block_levels}"
            )
        for s in self.diff_levels:
            if self.stage_channels[s] % self.attn_heads:
                raise ConfigurationError(
                    f"attn_heads {self.attn_heads} does not divide stage {s} "
                    f"width {self.stage_channels[s]}"
                )
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.upsample not in ("bilinear", "transpose"):
            raise ConfigurationError(f"unknown upsample mode {self.upsample!r}")
        if self.num_classes < 2 or self.in_channels < 1 or self.stem_channels < 1:
            raise ConfigurationError("num_classes >= 2, in_channels >= 1, stem_channels >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


ACTIVATIONS = {"gelu": nn.GELU, "relu": nn.ReLU}


class FeaturePyramid(NamedTuple):
    full: torch.Tensor
    stages: list[torch.Tensor]


def conv3x3(cin, cout, stride=1, bias=True):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=bias)


class ResidualBlock(nn.Module):
    def __init__(self, channels, act="gelu"):
        super().__init__()
        self.conv1 = conv3x3(channels, channels, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = conv3x3(channels, channels, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)
        self.act = ACTIVATIONS[act]()

    def forward(self, x):
        y = self.act(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return self.act(x + y)


class EncoderStage(nn.Module):
    def __init__(self, cin, cout, act="gelu"):
        super().__init__()
        self.down = conv3x3(cin, cout, stride=2, bias=False)
        self.bn = nn.BatchNorm2d(cout)
        self.act = ACTIVATIONS[act]()
        self.block1 = ResidualBlock(cout, act)

    def forward(self, x):
        return self.block1(self.act(self.bn(self.down(x))))


class Stem(nn.Sequential):
    def __init__(self, cin, cout, act="gelu"):
        super().__init__(
            conv3x3(cin, cout, bias=False),
            nn.BatchNorm2d(cout),
            ACTIVATIONS[act](),
            conv3x3(cout, cout, bias=False),
            nn.BatchNorm2d(cout),
            ACTIVATIONS[act](),
        )


class SiameseEncoder(nn.Module):
    """Shared-weight feature extractor; one instance serves both dates."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_stages = cfg.num_stages
        self.stem = Stem(cfg.in_channels, cfg.stem_channels, cfg.activation)
        widths = [cfg.stem_channels] + cfg.stage_channels
        self.stages = nn.ModuleList(
            EncoderStage(widths[i], widths[i + 1], cfg.activation) for i in range(cfg.num_stages)
        )

    def forward(self, x) -> FeaturePyramid:
        side = x.shape[-1]
        if x.shape[-2] != side or side % 2 ** self.num_stages:
            raise ConfigurationError(
                f"input {tuple(x.shape[-2:])} must be square with side divisible "
                f"by 2**{self.num_stages}"
            )
        full = self.stem(x)
        stages = []
        h = full
        for stage in self.stages:
            h = stage(h)
            stages.append(h)
        return FeaturePyramid(full, stages)


def raw_difference(f_pre, f_post):
    if f_pre.shape != f_post.shape:
        raise InvalidInputError(
            f"feature shapes differ: {tuple(f_pre.shape)} vs {tuple(f_post.shape)}"
        )
    return torch.abs(f_pre - f_post)


class SelfAttention(nn.Module):
    def __init__(self, dim, heads, bias=True):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=bias)
        self.proj = nn.Linear(dim, dim, bias=bias)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class TransformerLayer(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4, bias=True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, bias=bias)
        self.attn = SelfAttention(dim, heads, bias=bias)
        self.norm2 = nn.LayerNorm(dim, bias=bias)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio, bias=bias),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim, bias=bias),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DifferenceBlock(nn.Module):
    """|pre - post| followed by self-attention over the spatial positions.

    A depthwise convolution adds position information before tokenisation so
    the block works at any spatial size up to ``max_tokens`` positions.
    """

    def __init__(self, channels, layers=2, heads=4, mlp_ratio=4, max_tokens=16384, bias=True):
        super().__init__()
        self.max_tokens = max_tokens
        self.pos = nn.Conv2d(channels, channels, 3, padding=1, groups=channels, bias=bias)
        self.layers = nn.ModuleList(
            TransformerLayer(channels, heads, mlp_ratio, bias=bias) for _ in range(layers)
        )

    def forward(self, f_pre, f_post):
        d = raw_difference(f_pre, f_post)
        b, c, h, w = d.shape
        if h * w > self.max_tokens:
            raise ConfigurationError(
                f"difference block at {h}x{w} needs {h * w} tokens, capacity is "
                f"{self.max_tokens}; use a smaller input_side or raise max_attn_tokens"
            )
        x = d + self.pos(d)
        tokens = x.flatten(2).transpose(1, 2)
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens.transpose(1, 2).reshape(b, c, h, w)


class DecoderBlock(nn.Module):
    """Up-sample the coarse input 2x, concatenate the finer one, two convs."""

    def __init__(self, coarse_ch, fine_ch, out_ch, upsample="bilinear", act="gelu"):
        super().__init__()
        if upsample == "transpose":
            self.up = nn.ConvTranspose2d(coarse_ch, coarse_ch, 2, stride=2)
        else:
            self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.conv1 = conv3x3(coarse_ch + fine_ch, out_ch, bias=False)
        self.norm = nn.BatchNorm2d(out_ch)
        self.conv2 = conv3x3(out_ch, out_ch)
        self.act = ACTIVATIONS[act]()

    def forward(self, coarse, fine):
        if (
            coarse.shape[0] != fine.shape[0]
            or fine.shape[-2] != 2 * coarse.shape[-2]
            or fine.shape[-1] != 2 * coarse.shape[-1]
        ):
            raise InvalidInputError(
                f"decoder expects fine side = 2 x coarse side, got "
                f"{tuple(coarse.shape)} and {tuple(fine.shape)}"
            )
        x = torch.cat([self.up(coarse), fine], dim=1)
        x = self.act(self.norm(self.conv1(x)))
        return self.act(self.conv2(x))


class ChangeNet(nn.Module):
    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        cfg = (cfg or ModelConfig()).validate()
        self.cfg = cfg
        ch = cfg.stage_channels
        self.encoder = SiameseEncoder(cfg)
        self.diff_levels = cfg.diff_levels
        self.diff_blocks = nn.ModuleDict(
            {
                f"level{s}": DifferenceBlock(
                    ch[s],
                    layers=cfg.attn_layers_per_diff_block,
                    heads=cfg.attn_heads,
                    mlp_ratio=cfg.mlp_ratio,
                    max_tokens=cfg.max_attn_tokens,
                )
                for s in self.diff_levels
            }
        )
        fused = [c if s in self.diff_levels else 2 * c for s, c in enumerate(ch)]
        self.decoders = nn.ModuleList()
        coarse = fused[-1]
        for s in range(cfg.num_stages - 2, -1, -1):
            self.decoders.append(
                DecoderBlock(coarse, fused[s], ch[s], cfg.upsample, cfg.activation)
            )
            coarse = ch[s]
        self.final = DecoderBlock(
            coarse, 2 * cfg.stem_channels, cfg.stem_channels, cfg.upsample, cfg.activation
        )
        self.head = nn.Conv2d(cfg.stem_channels, cfg.num_classes, 1)
        init_parameters(self, cfg.seed)

    def encode(self, image) -> FeaturePyramid:
        return self.encoder(image)

    def fuse(self, p_pre: FeaturePyramid, p_post: FeaturePyramid) -> list[torch.Tensor]:
        fused = []
        for s, (a, b) in enumerate(zip(p_pre.stages, p_post.stages)):
            if s in self.diff_levels:
                fused.append(self.diff_blocks[f"level{s}"](a, b))
            else:
                fused.append(torch.cat([a, b], dim=1))
        return fused

    def forward(self, pre, post):
        if pre.shape != post.shape:
            raise InvalidInputError(
                f"pre {tuple(pre.shape)} and post {tuple(post.shape)} differ in shape"
            )
        squeeze = pre.dim() == 3
        if squeeze:
            pre, post = pre.unsqueeze(0), post.unsqueeze(0)
        b = pre.shape[0]
        # one pass over both dates so normalisation statistics are shared
        pyramid = self.encode(torch.cat([pre, post], dim=0))
        p_pre = FeaturePyramid(pyramid.full[:b], [f[:b] for f in pyramid.stages])
        p_post = FeaturePyramid(pyramid.full[b:], [f[b:] for f in pyramid.stages])
        fused = self.fuse(p_pre, p_post)
        x = fused[-1]
        for dec, skip in zip(self.decoders, reversed(fused[:-1])):
            x = dec(x, skip)
        x = self.final(x, torch.cat([p_pre.full, p_post.full], dim=1))
        logits = self.head(x)
        return logits[0] if squeeze else logits


def init_parameters(model: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, m in model.named_modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight, generator=gen)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
                if m.weight is not None:
                    nn.init.ones_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)


def build_model(cfg: Optional[ModelConfig] = None) -> ChangeNet:
    return ChangeNet(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
