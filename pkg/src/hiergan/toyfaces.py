"""Procedural synthetic face dataset with exact per-pixel class labels.

Every facial part occupies a fixed slot whose footprint depends only on the
identity geometry (never on the expression); the expression moves the brow
stroke, iris height and the lip/inner-mouth partition *inside* those slots.
Consequently two renders of the same seed with different expressions share
the skin pixel set exactly, and all image differences are confined to the
part slots.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DatasetError
from .labels import EXPRESSIONS, NUM_EXPRESSIONS, ExpressionLabel

CLASS_NAMES = (
    "background",
    "skin",
    "left_eye",
    "left_brow",
    "right_eye",
    "right_brow",
    "nose",
    "upper_lip",
    "inner_mouth",
    "lower_lip",
)
NUM_CLASSES = len(CLASS_NAMES)

BACKGROUND, SKIN = 0, 1
LEFT_EYE, LEFT_BROW, RIGHT_EYE, RIGHT_BROW = 2, 3, 4, 5
NOSE, UPPER_LIP, INNER_MOUTH, LOWER_LIP = 6, 7, 8, 9

MIN_CANVAS = 32

# (brow_angle, mouth_curvature, eye_openness) sampling bands per expression.
# Sign regimes are fixed: happy => curvature > 0, sad => curvature < 0,
# angry => brow_angle < 0, neutral => both near zero.
_EXPRESSION_BANDS = {
    "neutral": ((-0.04, 0.04), (-0.06, 0.06), (0.70, 0.90)),
    "happy": ((0.08, 0.20), (0.60, 1.00), (0.60, 0.85)),
    "sad": ((0.18, 0.32), (-1.00, -0.70), (0.45, 0.65)),
    "angry": ((-0.32, -0.18), (-0.35, -0.15), (0.30, 0.50)),
}

_BG_COLOR = np.array([0.13, 0.16, 0.22])
_SCLERA = np.array([0.93, 0.93, 0.90])
_BROW_COLOR = np.array([0.22, 0.13, 0.08])
_UPPER_LIP_COLOR = np.array([0.70, 0.22, 0.25])
_LOWER_LIP_COLOR = np.array([0.80, 0.30, 0.32])
_INNER_MOUTH_COLOR = np.array([0.25, 0.05, 0.08])


@dataclass(frozen=True)
class FaceParams:
    seed: int
    canvas: int
    expression: str
    face_center: tuple[float, float]  # (row, col) px
    face_axes: tuple[float, float]  # (a, b) = (vertical, horizontal) semi-axes px
    skin_tone: tuple[float, float, float]
    iris_color: tuple[float, float, float]
    eye_gap: float  # distance between eye centres, px
    brow_angle: float  # radians; sign fixed by expression
    mouth_curvature: float  # signed; sign fixed by expression
    eye_openness: float  # (0, 1]
    rotation: float  # radians in [-0.15, 0.15]


@dataclass
class ToySample:
    image: torch.Tensor  # (3, canvas, canvas) float32 in [-1, 1]
    class_map: torch.Tensor  # (canvas, canvas) int64 in [0, NUM_CLASSES)
    label: ExpressionLabel
    params: FaceParams | None = None


def sample_params(seed: int, canvas: int = 64, expression: str | None = None) -> FaceParams:
    """Draw identity geometry from ``seed`` and expression params from
    ``(seed, expression)`` so that two expressions of one seed share geometry."""
    if canvas < MIN_CANVAS:
        raise ValueError(f"canvas must be >= {MIN_CANVAS}, got {canvas}")
    if seed < 0:
        raise ValueError(f"seed must be >= 0, got {seed}")

    geo = np.random.default_rng(seed)
    a = canvas * geo.uniform(0.34, 0.42)
    b = canvas * geo.uniform(0.27, 0.34)
    center = (
        canvas / 2 + canvas * geo.uniform(-0.02, 0.02),
        canvas / 2 + canvas * geo.uniform(-0.02, 0.02),
    )
    tone = np.clip(np.array([0.85, 0.65, 0.50]) + geo.uniform(-0.14, 0.14, size=3), 0.30, 1.0)
    iris = np.array([geo.uniform(0.05, 0.35), geo.uniform(0.10, 0.45), geo.uniform(0.20, 0.70)])
    eye_gap = 2.0 * b * geo.uniform(0.40, 0.48)
    rotation = geo.uniform(-0.15, 0.15)

    if expression is None:
        pick = np.random.default_rng([seed, 7919])
        expression = EXPRESSIONS[int(pick.integers(NUM_EXPRESSIONS))]
    if expression not in _EXPRESSION_BANDS:
        raise ValueError(f"unknown expression {expression!r}; expected one of {EXPRESSIONS}")

    expr_rng = np.random.default_rng([seed, EXPRESSIONS.index(expression), 104729])
    (b_lo, b_hi), (c_lo, c_hi), (o_lo, o_hi) = _EXPRESSION_BANDS[expression]
    return FaceParams(
        seed=seed,
        canvas=canvas,
        expression=expression,
        face_center=center,
        face_axes=(a, b),
        skin_tone=tuple(tone),
        iris_color=tuple(iris),
        eye_gap=eye_gap,
        brow_angle=expr_rng.uniform(b_lo, b_hi),
        mouth_curvature=expr_rng.uniform(c_lo, c_hi),
        eye_openness=expr_rng.uniform(o_lo, o_hi),
        rotation=rotation,
    )


def _slot_geometry(p: FaceParams) -> dict:
    c = p.canvas
    a, b = p.face_axes
    return {
        "eye_row": -0.45 * a,
        "eye_dx": p.eye_gap / 2.0,
        "ex": max(0.085 * c, 2.0),
        "ey": max(0.045 * c, 1.5),
        "brow_row": -0.68 * a,
        "bw": max(0.055 * c, 2.0),
        "bh": max(0.022 * c, 1.0),
        "nose_row": -0.05 * a,
        "nh": max(0.045 * c, 1.5),
        "nv": max(0.070 * c, 2.0),
        "mouth_row": 0.45 * a,
        "mw": max(0.150 * c, 3.0),
        "mh": max(0.085 * c, 3.0),
    }


def render_from_params(p: FaceParams) -> ToySample:
    c = p.canvas
    a, b = p.face_axes
    g = _slot_geometry(p)

    rows, cols = np.meshgrid(np.arange(c, dtype=np.float64), np.arange(c, dtype=np.float64), indexing="ij")
    # face-local frame: inverse-rotate pixel offsets around the face centre
    dr0 = rows - p.face_center[0]
    dc0 = cols - p.face_center[1]
    cr, sr = np.cos(p.rotation), np.sin(p.rotation)
    dr = cr * dr0 + sr * dc0
    dc = -sr * dr0 + cr * dc0

    cls = np.zeros((c, c), dtype=np.uint8)
    rgb = np.empty((c, c, 3), dtype=np.float64)
    rgb[:] = _BG_COLOR

    e_r2 = (dr / a) ** 2 + (dc / b) ** 2
    face = e_r2 <= 1.0
    cls[face] = SKIN
    shade = 1.0 - 0.20 * e_r2
    for k in range(3):
        rgb[..., k] = np.where(face, p.skin_tone[k] * shade, rgb[..., k])

    def ellipse(row_off, col_off, sr_, sc_):
        return ((dr - row_off) / sr_) ** 2 + ((dc - col_off) / sc_) ** 2 <= 1.0

    # nose slot (expression-independent)
    nose = ellipse(g["nose_row"], 0.0, g["nv"], g["nh"])
    cls[nose] = NOSE
    for k in range(3):
        rgb[..., k] = np.where(nose, p.skin_tone[k] * 0.82, rgb[..., k])

    # eye and brow slots; the iris and the brow stroke are image-only
    for side, eye_cls, brow_cls in ((-1.0, LEFT_EYE, LEFT_BROW), (1.0, RIGHT_EYE, RIGHT_BROW)):
        ecol = side * g["eye_dx"]
        eye = ellipse(g["eye_row"], ecol, g["ey"], g["ex"])
        cls[eye] = eye_cls
        for k in range(3):
            rgb[..., k] = np.where(eye, _SCLERA[k], rgb[..., k])
        iris = ellipse(g["eye_row"], ecol, max(0.9 * g["ey"] * p.eye_openness, 0.6), 0.45 * g["ex"])
        iris &= eye
        for k in range(3):
            rgb[..., k] = np.where(iris, p.iris_color[k], rgb[..., k])

        brow = (np.abs(dr - g["brow_row"]) <= g["bh"]) & (np.abs(dc - ecol) <= g["bw"])
        cls[brow] = brow_cls
        for k in range(3):
            rgb[..., k] = np.where(brow, p.skin_tone[k] * 0.96, rgb[..., k])
        # stroke: thick segment through the slot centre, tilted by the brow angle
        beta = side * p.brow_angle  # mirrored so the pair slants symmetrically
        pr, pc = dr - g["brow_row"], dc - ecol
        along = pc * np.cos(beta) - pr * np.sin(beta)
        across = pr * np.cos(beta) + pc * np.sin(beta)
        stroke = brow & (np.abs(across) <= max(0.012 * c, 0.8)) & (np.abs(along) <= 0.95 * g["bw"])
        for k in range(3):
            rgb[..., k] = np.where(stroke, _BROW_COLOR[k], rgb[..., k])

    # mouth slot: fixed footprint, partitioned into upper lip / inner / lower lip
    mouth = (np.abs(dr - g["mouth_row"]) <= g["mh"]) & (np.abs(dc) <= g["mw"])
    curv_px = p.mouth_curvature * 0.06 * c
    open_px = max(1, int(round((0.35 + 0.5 * max(p.mouth_curvature, 0.0)) * 0.045 * c)))
    open_px = min(open_px, int(g["mh"]) - 2)
    t = dc / g["mw"]
    dev = -curv_px * (t**2 - 0.5)
    lim = g["mh"] - open_px - 1.0
    midline = g["mouth_row"] + np.clip(dev, -lim, lim)
    inner = mouth & (np.abs(dr - midline) <= open_px)
    upper = mouth & (dr < midline - open_px)
    lower = mouth & (dr > midline + open_px)
    for region, cid, color in (
        (upper, UPPER_LIP, _UPPER_LIP_COLOR),
        (inner, INNER_MOUTH, _INNER_MOUTH_COLOR),
        (lower, LOWER_LIP, _LOWER_LIP_COLOR),
    ):
        cls[region] = cid
        for k in range(3):
            rgb[..., k] = np.where(region, color[k], rgb[..., k])

    u8 = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    image = torch.from_numpy(u8.astype(np.float32) / 255.0 * 2.0 - 1.0).permute(2, 0, 1).contiguous()
    class_map = torch.from_numpy(cls.astype(np.int64))
    label = ExpressionLabel.from_name(p.expression)
    return ToySample(image=image, class_map=class_map, label=label, params=p)


def render_sample(seed: int, canvas: int = 64, expression: str | None = None) -> ToySample:
    return render_from_params(sample_params(seed, canvas, expression))


def render_translated_pair(
    seed: int, canvas: int, source: str, target: str
) -> tuple[ToySample, ToySample]:
    """Ground-truth expression translation oracle: same identity geometry,
    only the expression-dependent params differ. Evaluation-only; the trainer
    is unpaired and never sees this."""
    return (
        render_from_params(sample_params(seed, canvas, source)),
        render_from_params(sample_params(seed, canvas, target)),
    )


def _image_to_u8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().permute(1, 2, 0).numpy()
    return np.round((arr + 1.0) / 2.0 * 255.0).clip(0, 255).astype(np.uint8)


def write_dataset(samples: Sequence[ToySample], dir: str | Path) -> Path:
    root = Path(dir)
    (root / "img").mkdir(parents=True, exist_ok=True)
    (root / "seg").mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "label", "seed"])
        for i, s in enumerate(samples):
            name = f"{i:06d}"
            Image.fromarray(_image_to_u8(s.image)).save(root / "img" / f"{name}.png")
            (root / "seg" / f"{name}.bin").write_bytes(
                s.class_map.numpy().astype(np.uint8).tobytes()
            )
            seed = s.params.seed if s.params is not None else -1
            writer.writerow([f"img/{name}.png", s.label.name, seed])
    return manifest


def read_dataset(dir: str | Path) -> list[ToySample]:
    root = Path(dir)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise DatasetError(f"missing manifest: {manifest}")
    samples: list[ToySample] = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["file", "label", "seed"]:
            raise DatasetError(f"corrupt manifest header in {manifest}: {reader.fieldnames}")
        for row in reader:
            img_path = root / row["file"]
            if not img_path.is_file():
                raise DatasetError(f"manifest entry missing on disk: {img_path}")
            seg_path = root / "seg" / (img_path.stem + ".bin")
            if not seg_path.is_file():
                raise DatasetError(f"manifest entry missing on disk: {seg_path}")
            u8 = np.asarray(Image.open(img_path).convert("RGB"))
            canvas = u8.shape[0]
            raw = np.frombuffer(seg_path.read_bytes(), dtype=np.uint8)
            if raw.size != canvas * canvas:
                raise DatasetError(f"corrupt class map (size {raw.size}): {seg_path}")
            image = torch.from_numpy(u8.astype(np.float32) / 255.0 * 2.0 - 1.0).permute(2, 0, 1).contiguous()
            class_map = torch.from_numpy(raw.reshape(canvas, canvas).astype(np.int64))
            label = ExpressionLabel.from_name(row["label"])
            seed = int(row["seed"])
            params = sample_params(seed, canvas, row["label"]) if seed >= 0 else None
            samples.append(ToySample(image=image, class_map=class_map, label=label, params=params))
    return samples


def generate_dataset(n: int, canvas: int = 64, seed: int = 0) -> list[ToySample]:
    """Render ``n`` samples with per-sample seeds ``seed .. seed+n-1``."""
    return [render_sample(seed + i, canvas) for i in range(n)]
