"""Generators, discriminators and the fusion network.

Generators follow the multi-domain translation convention: the target label
is broadcast to constant spatial channels, concatenated with the image and
pushed through an encoder / residual / decoder stack with a bounded output.
Discriminators are patch-style stacks of stride-2 convolutions with a
realness map head and a global-pooled class head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .labels import NUM_EXPRESSIONS, ExpressionLabel, broadcast_batch

GENERATOR_KEYS = ("global", "le", "re", "n", "m")
DISCRIMINATOR_KEYS = ("global", "fusion", "le", "re", "n", "m")


def _norm(ch: int) -> nn.InstanceNorm2d:
    return nn.InstanceNorm2d(ch, affine=True, track_running_stats=False)


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1, bias=False),
            _norm(ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, padding=1, bias=False),
            _norm(ch),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Encoder-decoder translator: (B, 3+d, H, H) -> (B, 3, H, H) in [-1, 1]."""

    def __init__(self, resolution: int, label_dim: int, base: int = 16, n_res: int = 6):
        super().__init__()
        self.resolution = resolution
        self.label_dim = label_dim
        c = base
        layers: list[nn.Module] = [
            nn.Conv2d(3 + label_dim, c, 7, padding=3, bias=False),
            _norm(c),
            nn.ReLU(inplace=True),
        ]
        for _ in range(2):  # downsampling
            layers += [nn.Conv2d(c, c * 2, 4, stride=2, padding=1, bias=False), _norm(c * 2), nn.ReLU(inplace=True)]
            c *= 2
        layers += [ResidualBlock(c) for _ in range(n_res)]
        for _ in range(2):  # upsampling
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(c, c // 2, 3, padding=1, bias=False),
                _norm(c // 2),
                nn.ReLU(inplace=True),
            ]
            c //= 2
        layers += [nn.Conv2d(c, 3, 7, padding=3), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Discriminator(nn.Module):
    """Patch discriminator with an auxiliary class head."""

    def __init__(self, resolution: int, label_dim: int, base: int = 16, n_stages: int = 4):
        super().__init__()
        self.resolution = resolution
        self.label_dim = label_dim
        self.n_stages = n_stages
        c = base
        layers: list[nn.Module] = [nn.Conv2d(3, c, 4, stride=2, padding=1), nn.LeakyReLU(0.01)]
        for _ in range(n_stages - 1):
            layers += [nn.Conv2d(c, c * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.01)]
            c *= 2
        self.features = nn.Sequential(*layers)
        self.realness = nn.Conv2d(c, 1, 3, padding=1)
        feat = resolution // (2**n_stages)
        self.cls_head = nn.Conv2d(c, label_dim, feat)

    def forward(self, x):
        h = self.features(x)
        return self.realness(h), self.cls_head(h).flatten(1)


class FusionNetwork(nn.Module):
    """Exactly two convolution blocks, four residual blocks, one final conv."""

    def __init__(self, base: int = 32):
        super().__init__()
        self.conv_block_1 = nn.Sequential(
            nn.Conv2d(6, base, 7, padding=3, bias=False), _norm(base), nn.ReLU(inplace=True)
        )
        self.conv_block_2 = nn.Sequential(
            nn.Conv2d(base, base, 3, padding=1, bias=False), _norm(base), nn.ReLU(inplace=True)
        )
        self.residual_blocks = nn.Sequential(*[ResidualBlock(base) for _ in range(4)])
        self.final_conv = nn.Conv2d(base, 3, 7, padding=3)

    def forward(self, x):
        h = self.conv_block_1(x)
        h = self.conv_block_2(h)
        h = self.residual_blocks(h)
        return torch.tanh(self.final_conv(h))

    def layer_manifest(self) -> list[str]:
        return (
            ["conv_block", "conv_block"]
            + ["residual_block"] * len(self.residual_blocks)
            + ["conv"]
        )


@dataclass
class NetworkConfig:
    image_size: int = 64
    part_size: int = 32
    label_dim: int = NUM_EXPRESSIONS
    gen_base: int = 16
    disc_base: int = 16
    fusion_base: int = 32
    n_res_global: int = 6
    n_res_local: int = 3
    disc_stages: int = 4
    seed: int = 0

    def validate(self) -> None:
        bad = []
        if self.label_dim < 1:
            bad.append("label_dim")
        if self.image_size < 8 or self.image_size % (2**self.disc_stages):
            bad.append("image_size")
        if self.part_size < 8 or self.part_size % (2**self.disc_stages):
            bad.append("part_size")
        for key in ("gen_base", "disc_base", "fusion_base", "n_res_global", "n_res_local", "disc_stages"):
            if getattr(self, key) < 1:
                bad.append(key)
        if bad:
            raise ConfigError(f"invalid network config values for keys: {', '.join(bad)}")


@dataclass
class NetworkBundle:
    generators: dict[str, Generator]
    discriminators: dict[str, Discriminator]
    fusion: FusionNetwork
    config: NetworkConfig = field(default_factory=NetworkConfig)

    def all_modules(self) -> dict[str, nn.Module]:
        out: dict[str, nn.Module] = {f"gen_{k}": v for k, v in self.generators.items()}
        out.update({f"disc_{k}": v for k, v in self.discriminators.items()})
        out["fusion"] = self.fusion
        return out


def deterministic_init_(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (1.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d)) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_networks(config: NetworkConfig) -> NetworkBundle:
    config.validate()
    generators: dict[str, Generator] = {}
    discriminators: dict[str, Discriminator] = {}
    for i, key in enumerate(GENERATOR_KEYS):
        res = config.image_size if key == "global" else config.part_size
        n_res = config.n_res_global if key == "global" else config.n_res_local
        g = Generator(res, config.label_dim, base=config.gen_base, n_res=n_res)
        deterministic_init_(g, config.seed * 1000 + i)
        generators[key] = g
    for i, key in enumerate(DISCRIMINATOR_KEYS):
        res = config.image_size if key in ("global", "fusion") else config.part_size
        d = Discriminator(res, config.label_dim, base=config.disc_base, n_stages=config.disc_stages)
        deterministic_init_(d, config.seed * 1000 + 100 + i)
        discriminators[key] = d
    fusion = FusionNetwork(base=config.fusion_base)
    deterministic_init_(fusion, config.seed * 1000 + 200)
    return NetworkBundle(generators=generators, discriminators=discriminators, fusion=fusion, config=config)


def gen_translate(g: Generator, image: torch.Tensor, label) -> torch.Tensor:
    if image.shape[-1] != g.resolution or image.shape[-2] != g.resolution:
        raise ValueError(
            f"generator expects {g.resolution}x{g.resolution} input, got {tuple(image.shape[-2:])}"
        )
    if isinstance(label, ExpressionLabel):
        if label.dim != g.label_dim:
            raise ValueError(f"label dim {label.dim} != generator label dim {g.label_dim}")
        channels = label.broadcast(image.shape[-2], image.shape[-1]).to(image.dtype)
        channels = channels.unsqueeze(0).expand(image.shape[0], -1, -1, -1)
    else:
        channels = broadcast_batch(label, g.label_dim, image.shape[-2], image.shape[-1]).to(image.dtype)
    return g(torch.cat([image, channels], dim=1))


def disc_forward(dsc: Discriminator, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if image.shape[-1] != dsc.resolution or image.shape[-2] != dsc.resolution:
        raise ValueError(
            f"discriminator expects {dsc.resolution}x{dsc.resolution} input, got {tuple(image.shape[-2:])}"
        )
    return dsc(image)


def fuse(f: FusionNetwork, global_out: torch.Tensor, local_out: torch.Tensor) -> torch.Tensor:
    if global_out.shape != local_out.shape or global_out.shape[1] != 3:
        raise ValueError(
            f"fusion inputs must both be (B, 3, H, W); got {tuple(global_out.shape)} and {tuple(local_out.shape)}"
        )
    return f(torch.cat([global_out, local_out], dim=1))
