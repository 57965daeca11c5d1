"""Trainable segmentation network with a tempered-softmax mask head.

The network predicts per-pixel class logits; the tempered softmax turns them
into a differentiable soft class assignment, and class groups compose the
four region masks (left eye, right eye, nose, mouth) that condition the
local generators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError
from .toyfaces import (
    INNER_MOUTH,
    LEFT_BROW,
    LEFT_EYE,
    LOWER_LIP,
    NOSE,
    NUM_CLASSES,
    RIGHT_BROW,
    RIGHT_EYE,
    UPPER_LIP,
)

REGIONS = ("le", "re", "n", "m")

DEFAULT_GROUPING: dict[str, frozenset[int]] = {
    "le": frozenset({LEFT_EYE, LEFT_BROW}),
    "re": frozenset({RIGHT_EYE, RIGHT_BROW}),
    "n": frozenset({NOSE}),
    "m": frozenset({UPPER_LIP, INNER_MOUTH, LOWER_LIP}),
}

DEFAULT_TEMPERATURE = 10.0


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class SegNetwork(nn.Module):
    """Small encoder-decoder with 3 downsampling stages and skip connections."""

    downsample_factor = 8

    def __init__(self, num_classes: int = NUM_CLASSES, base: int = 16):
        super().__init__()
        self.num_classes = num_classes
        c0, c1, c2, c3 = base, base + 8, base * 3, base * 4
        self.enc0 = _conv(3, c0)
        self.enc1 = _conv(c0, c1, stride=2)
        self.enc2 = _conv(c1, c2, stride=2)
        self.enc3 = _conv(c2, c3, stride=2)
        self.mid = _conv(c3, c3)
        self.dec3 = _conv(c3 + c2, c2)
        self.dec2 = _conv(c2 + c1, c1)
        self.dec1 = _conv(c1 + c0, c0)
        self.head = nn.Conv2d(c0, num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e0 = F.relu(self.enc0(x))
        e1 = F.relu(self.enc1(e0))
        e2 = F.relu(self.enc2(e1))
        e3 = F.relu(self.enc3(e2))
        m = F.relu(self.mid(e3))
        d3 = F.relu(self.dec3(torch.cat([_up(m), e2], dim=1)))
        d2 = F.relu(self.dec2(torch.cat([_up(d3), e1], dim=1)))
        d1 = F.relu(self.dec1(torch.cat([_up(d2), e0], dim=1)))
        return self.head(d1)


def _up(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")


def build_segnet(num_classes: int = NUM_CLASSES, seed: int = 0, base: int = 16) -> SegNetwork:
    gen = torch.Generator().manual_seed(seed)
    net = SegNetwork(num_classes=num_classes, base=base)
    with torch.no_grad():
        for p in net.parameters():
            if p.dim() > 1:
                # Kaiming-style fan-in scaling with an explicit generator
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
            else:
                p.zero_()
    return net


@dataclass
class SoftMaskStack:
    probs: torch.Tensor  # (B, c, H, W), channel sums = 1
    temperature: float


@dataclass
class RegionMasks:
    masks: torch.Tensor  # (B, 4, H, W) in region order REGIONS
    grouping: dict[str, frozenset[int]] = field(default_factory=lambda: dict(DEFAULT_GROUPING))


def seg_forward(net: SegNetwork, images: torch.Tensor) -> torch.Tensor:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (batch, 3, h, w) images, got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    d = net.downsample_factor
    if h % d or w % d:
        raise ValueError(f"spatial size {h}x{w} must be divisible by {d}")
    return net(images)


def tempered_softmax(logits: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> SoftMaskStack:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits passed to tempered_softmax")
    probs = F.softmax(temperature * logits, dim=1)
    return SoftMaskStack(probs=probs, temperature=temperature)


def group_masks(soft: SoftMaskStack, grouping: dict[str, frozenset[int]] | None = None) -> RegionMasks:
    grouping = dict(DEFAULT_GROUPING) if grouping is None else {k: frozenset(v) for k, v in grouping.items()}
    if set(grouping) != set(REGIONS):
        raise ValueError(f"grouping must cover exactly regions {REGIONS}, got {sorted(grouping)}")
    c = soft.probs.shape[1]
    seen: set[int] = set()
    for region, classes in grouping.items():
        for k in classes:
            if not 0 <= k < c:
                raise ValueError(f"class index {k} in region {region!r} out of range [0, {c})")
            if k in seen:
                raise ValueError(f"class index {k} appears in more than one region group")
            seen.add(k)
    masks = torch.stack(
        [sum(soft.probs[:, k] for k in sorted(grouping[r])) for r in REGIONS], dim=1
    )
    return RegionMasks(masks=masks, grouping=grouping)


def hard_labels(soft: SoftMaskStack) -> torch.Tensor:
    """Per-pixel argmax over channels; ties break to the lowest class index."""
    with torch.no_grad():
        return soft.probs.argmax(dim=1)
