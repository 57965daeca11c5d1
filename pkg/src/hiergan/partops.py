"""Differentiable part extraction and stitching.

Pixels flow through mask multiplication and bilinear resampling, so gradients
reach both the image and the segmentation masks. Crop geometry is computed
from the hard label map and carries no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .segmentation import REGIONS, RegionMasks

MARGIN = 0.10  # box expansion per side, fraction of the tight extent
MIN_BOX = 4


@dataclass(frozen=True)
class CropBox:
    region: str
    top: int
    left: int
    height: int
    width: int
    valid: bool = True

    def __post_init__(self):
        if self.height != self.width:
            raise ValueError(f"crop boxes are square; got {self.height}x{self.width}")
        if self.height < MIN_BOX:
            raise ValueError(f"crop box side must be >= {MIN_BOX}, got {self.height}")
        if self.top < 0 or self.left < 0:
            raise ValueError(f"crop box origin must be non-negative: ({self.top}, {self.left})")


@dataclass
class PartBundle:
    parts: dict[str, torch.Tensor]  # region -> (B, 3, P, P)
    boxes: dict[str, list[CropBox]]  # region -> per-batch-element box
    soft_masks: RegionMasks


def default_priors(height: int, width: int) -> dict[str, CropBox]:
    """Fallback boxes (fractions of the canvas) used when a region's hard
    mask is empty."""

    def box(region, cy, cx, frac):
        size = max(MIN_BOX, int(round(frac * height)))
        size = min(size, height, width)
        top = min(max(int(round(cy * height - size / 2)), 0), height - size)
        left = min(max(int(round(cx * width - size / 2)), 0), width - size)
        return CropBox(region, top, left, size, size, valid=False)

    return {
        "le": box("le", 0.34, 0.30, 0.26),
        "re": box("re", 0.34, 0.70, 0.26),
        "n": box("n", 0.50, 0.50, 0.22),
        "m": box("m", 0.70, 0.50, 0.30),
    }


def bilinear_resize(src: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resampling with half-pixel centres and clamped coordinates.

    Output pixel (i, j) samples the source at
    ((i + 0.5) * H / out_h - 0.5, (j + 0.5) * W / out_w - 0.5).
    Built from differentiable gathers, so the backward pass is the exact
    adjoint of the forward linear map.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = src.shape[-2:]
    if h == out_h and w == out_w:
        return src
    dtype = src.dtype if src.is_floating_point() else torch.get_default_dtype()
    ys = torch.clamp(
        (torch.arange(out_h, dtype=dtype) + 0.5) * (h / out_h) - 0.5, 0, h - 1
    )
    xs = torch.clamp(
        (torch.arange(out_w, dtype=dtype) + 0.5) * (w / out_w) - 0.5, 0, w - 1
    )
    y0 = ys.floor().long()
    x0 = xs.floor().long()
    y1 = torch.clamp(y0 + 1, max=h - 1)
    x1 = torch.clamp(x0 + 1, max=w - 1)
    wy = (ys - y0).reshape(-1, 1)
    wx = (xs - x0).reshape(1, -1)
    top = src[..., y0, :]
    bot = src[..., y1, :]
    tl, tr = top[..., x0], top[..., x1]
    bl, br = bot[..., x0], bot[..., x1]
    return (
        tl * (1 - wy) * (1 - wx)
        + tr * (1 - wy) * wx
        + bl * wy * (1 - wx)
        + br * wy * wx
    )


def _tight_box(region: str, member: torch.Tensor, height: int, width: int) -> CropBox:
    rows = member.any(dim=1).nonzero(as_tuple=True)[0]
    cols = member.any(dim=0).nonzero(as_tuple=True)[0]
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    bh = r1 - r0 + 1
    bw = c1 - c0 + 1
    mr = int(round(MARGIN * bh))
    mc = int(round(MARGIN * bw))
    top, bh = r0 - mr, bh + 2 * mr
    left, bw = c0 - mc, bw + 2 * mc
    # square by expanding the short side around its centre
    size = max(bh, bw, MIN_BOX)
    top -= (size - bh) // 2
    left -= (size - bw) // 2
    size = min(size, height, width)
    top = min(max(top, 0), height - size)
    left = min(max(left, 0), width - size)
    return CropBox(region, top, left, size, size, valid=True)


def extract_parts(
    images: torch.Tensor,
    masks: RegionMasks,
    hard_map: torch.Tensor,
    part_size: int,
    priors: dict[str, CropBox] | None = None,
) -> PartBundle:
    if part_size < MIN_BOX:
        raise ValueError(f"part size must be >= {MIN_BOX}, got {part_size}")
    if images.shape[-2:] != masks.masks.shape[-2:]:
        raise ValueError("images and masks must be spatially aligned")
    batch, _, height, width = images.shape
    if priors is None:
        priors = default_priors(height, width)

    parts: dict[str, torch.Tensor] = {}
    boxes: dict[str, list[CropBox]] = {}
    for i, region in enumerate(REGIONS):
        classes = sorted(masks.grouping[region])
        masked = masks.masks[:, i : i + 1] * images
        region_boxes: list[CropBox] = []
        region_parts: list[torch.Tensor] = []
        for b in range(batch):
            member = torch.zeros_like(hard_map[b], dtype=torch.bool)
            for k in classes:
                member |= hard_map[b] == k
            if member.any():
                box = _tight_box(region, member, height, width)
            else:
                box = priors[region]
            region_boxes.append(box)
            crop = masked[b : b + 1, :, box.top : box.top + box.height, box.left : box.left + box.width]
            region_parts.append(bilinear_resize(crop, part_size, part_size))
        parts[region] = torch.cat(region_parts, dim=0)
        boxes[region] = region_boxes
    return PartBundle(parts=parts, boxes=boxes, soft_masks=masks)


def stitch_parts(
    translated: dict[str, torch.Tensor],
    boxes: dict[str, list[CropBox]],
    masks: RegionMasks,
    canvas: tuple[int, int],
) -> torch.Tensor:
    """Place each translated part back at its box, re-masked by its soft
    region mask; regions are summed onto a zero canvas."""
    height, width = canvas
    some = next(iter(translated.values()))
    batch = some.shape[0]
    out = torch.zeros(batch, 3, height, width, dtype=some.dtype, device=some.device)
    for i, region in enumerate(REGIONS):
        if region not in translated:
            continue
        per_sample = []
        for b in range(batch):
            box = boxes[region][b]
            if box.top + box.height > height or box.left + box.width > width:
                raise ValueError(f"box {box} exceeds canvas {height}x{width}")
            back = bilinear_resize(translated[region][b : b + 1], box.height, box.width)
            local_mask = masks.masks[
                b : b + 1, i : i + 1, box.top : box.top + box.height, box.left : box.left + box.width
            ]
            padded = torch.nn.functional.pad(
                back * local_mask,
                (box.left, width - box.left - box.width, box.top, height - box.top - box.height),
            )
            per_sample.append(padded)
        out = out + torch.cat(per_sample, dim=0)
    return out
