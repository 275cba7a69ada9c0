"""One-input multi-output generator and multi-task patch discriminator.

The generator is an encoder / residual-bottleneck / decoder whose final
stage concatenates the raw input image with the full-resolution decoder
features (64 + n_c channels) and applies one 7x7 convolution per
(attribute, value) output head with tanh. The discriminator is a
no-normalization strided conv trunk with an unbounded patch critic head
and one logit head per attribute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .data import AttributeSchema


class ModelConfigError(ValueError):
    """Invalid architecture configuration."""


def default_disc_depth(image_size: int) -> int:
    """log2(size) - 3, clamped to [3, 6]; keeps the trunk at least 2x2."""
    return int(min(6, max(3, math.log2(image_size) - 3)))


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int
    schema: AttributeSchema
    n_channels: int = 3
    base_width: int = 64
    n_residual_blocks: int = 6
    residual_mode: str = "adapted"  # adapted | original | none

    def __post_init__(self):
        if self.image_size % 4 != 0:
            raise ModelConfigError(
                f"image size must be divisible by 4, got {self.image_size}"
            )
        if self.residual_mode not in ("adapted", "original", "none"):
            raise ModelConfigError(f"unknown residual mode {self.residual_mode!r}")


@dataclass(frozen=True)
class DiscriminatorConfig:
    image_size: int
    schema: AttributeSchema
    n_channels: int = 3
    base_width: int = 64
    depth: int | None = None
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.depth is None:
            object.__setattr__(self, "depth", default_disc_depth(self.image_size))
        if self.image_size // 2**self.depth < 1:
            raise ModelConfigError(
                f"depth {self.depth} collapses a {self.image_size}px input below 1x1; "
                "lower the depth"
            )

    @property
    def trunk_size(self) -> int:
        return self.image_size // 2**self.depth


class GeneratorOutputs:
    """All translated batches from one forward pass, ordered by schema."""

    def __init__(self, schema: AttributeSchema, outputs: list[torch.Tensor]):
        if len(outputs) != schema.total_outputs:
            raise ModelConfigError(
                f"expected {schema.total_outputs} heads, got {len(outputs)}"
            )
        self.schema = schema
        self.flat = outputs

    def __len__(self) -> int:
        return len(self.flat)

    def select(self, attribute: int, value: int) -> torch.Tensor:
        return self.flat[self.schema.head_offset(attribute, value)]

    def for_attribute(self, attribute: int) -> list[torch.Tensor]:
        off = self.schema.head_offset(attribute, 0)
        return self.flat[off : off + self.schema.cardinalities[attribute]]

    def stacked(self) -> torch.Tensor:
        """Concatenate all heads along the batch axis (head-major blocks)."""
        return torch.cat(self.flat, dim=0)


class ResidualBlock(nn.Module):
    """3x3 same-resolution conv refinement with identity skip."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, 1, 1)
        self.norm = nn.InstanceNorm2d(channels, affine=True, eps=1e-5)

    def forward(self, x):
        return x + self.norm(torch.relu(self.conv(x)))


def _conv_block(in_ch: int, out_ch: int, kernel: int, stride: int) -> list[nn.Module]:
    pad = kernel // 2 if stride == 1 else 1
    return [
        nn.Conv2d(in_ch, out_ch, kernel, stride, pad),
        nn.ReLU(inplace=True),
        nn.InstanceNorm2d(out_ch, affine=True, eps=1e-5),
    ]


def _deconv_block(in_ch: int, out_ch: int) -> list[nn.Module]:
    return [
        nn.ConvTranspose2d(in_ch, out_ch, 4, 2, 1),
        nn.ReLU(inplace=True),
        nn.InstanceNorm2d(out_ch, affine=True, eps=1e-5),
    ]


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        base, n_c = config.base_width, config.n_channels
        self.encoder = nn.Sequential(
            *_conv_block(n_c, base, 7, 1),
            *_conv_block(base, base * 2, 4, 2),
            *_conv_block(base * 2, base * 4, 4, 2),
        )
        self.bottleneck = nn.Sequential(
            *[ResidualBlock(base * 4) for _ in range(config.n_residual_blocks)]
        )
        self.decoder = nn.Sequential(
            *_deconv_block(base * 4, base * 2),
            *_deconv_block(base * 2, base),
        )
        head_in = base + n_c if config.residual_mode == "adapted" else base
        self.heads = nn.ModuleList(
            nn.Conv2d(head_in, n_c, 7, 1, 3)
            for _ in range(config.schema.total_outputs)
        )
        self.apply(init_weights)

    def forward(self, x: torch.Tensor, zero_input_skip: bool = False) -> GeneratorOutputs:
        if x.shape[-1] != self.config.image_size or x.shape[1] != self.config.n_channels:
            raise ModelConfigError(
                f"input shape {tuple(x.shape)} does not match config "
                f"({self.config.n_channels}ch, {self.config.image_size}px)"
            )
        feat = self.decoder(self.bottleneck(self.encoder(x)))
        mode = self.config.residual_mode
        if mode == "adapted":
            skip = torch.zeros_like(x) if zero_input_skip else x
            feat = torch.cat([skip, feat], dim=1)
            outs = [torch.tanh(head(feat)) for head in self.heads]
        elif mode == "original":
            # linear-sum residual learning: the head emits a residual image
            outs = [
                torch.clamp(x + torch.tanh(head(feat)), -1.0, 1.0)
                for head in self.heads
            ]
        else:
            outs = [torch.tanh(head(feat)) for head in self.heads]
        return GeneratorOutputs(self.config.schema, outs)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# paper-scale channel ladder; truncated (or scaled by base_width) per depth
_DISC_WIDTH_MULTIPLIERS = (1, 2, 4, 8, 8, 16)


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        widths = [config.base_width * m for m in _DISC_WIDTH_MULTIPLIERS[: config.depth]]
        layers: list[nn.Module] = []
        in_ch = config.n_channels
        for w in widths:
            layers += [
                nn.Conv2d(in_ch, w, 5, 2, 2),
                nn.LeakyReLU(config.leaky_slope, inplace=True),
            ]
            in_ch = w
        self.trunk = nn.Sequential(*layers)
        self.critic_head = nn.Conv2d(in_ch, 1, 3, 1, 1)
        self.cls_heads = nn.ModuleList(
            nn.Conv2d(in_ch, m, config.trunk_size, 1, 0)
            for m in config.schema.cardinalities
        )
        self.apply(init_weights)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Returns (critic map (b,1,s,s), per-attribute logits (b, m_j))."""
        t = self.trunk(x)
        critic = self.critic_head(t)
        logits = [head(t).flatten(1) for head in self.cls_heads]
        return critic, logits

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_weights(module: nn.Module) -> None:
    """DCGAN-style init: conv weights N(0, 0.02), biases zero."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.InstanceNorm2d) and module.affine:
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_generator(config: GeneratorConfig) -> Generator:
    return Generator(config)


def build_discriminator(config: DiscriminatorConfig) -> Discriminator:
    return Discriminator(config)


def translate(
    gen: Generator, x: torch.Tensor, attribute: int, target: int
) -> torch.Tensor:
    """Pick the (attribute, target) output of a single forward pass."""
    gen.config.schema.check_value(attribute, target)
    with torch.no_grad():
        return gen(x).select(attribute, target)
