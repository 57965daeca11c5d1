"""Desk-scale evaluation: toy-EEA, toy-Frechet distance, toy-ID loss, mIoU,
plus the region-ablation and weight-sweep harnesses.

The reference models behind the metrics (expression classifier, identity
embedder) are small CNNs trained on the synthetic dataset; metric names carry
a "toy_" prefix in serialized reports to avoid any claim of comparability
with full-scale numbers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from . import toyfaces, training
from .labels import NUM_EXPRESSIONS
from .networks import deterministic_init_


# --- small reference models ---------------------------------------------------


class SmallCNN(nn.Module):
    def __init__(self, out_dim: int, base: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, base, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(base, base * 2, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(base * 2, base * 4, 4, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Linear(base * 4, out_dim)

    def forward(self, x):
        h = self.features(x).mean(dim=(2, 3))
        return self.head(h)


class Embedder(nn.Module):
    """Unit-norm 64-d embeddings trained with a margin-based identity objective."""

    def __init__(self, dim: int = 64):
        super().__init__()
        self.backbone = SmallCNN(dim)

    def forward(self, x):
        z = self.backbone(x)
        return F.normalize(z, dim=1)


def train_expression_classifier(
    data: training.LoadedDataset, epochs: int = 15, batch: int = 32, seed: int = 0, lr: float = 2e-3
) -> SmallCNN:
    if len(torch.unique(data.labels)) < NUM_EXPRESSIONS:
        raise ValueError(
            f"train set must contain all {NUM_EXPRESSIONS} expression labels"
        )
    model = SmallCNN(NUM_EXPRESSIONS)
    deterministic_init_(model, seed + 31)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 13])
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            sel = torch.from_numpy(order[start : start + batch])
            logits = model(data.images[sel])
            loss = F.cross_entropy(logits, data.labels[sel])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    model.eval()
    return model


def classifier_accuracy(model: SmallCNN, data: training.LoadedDataset) -> float:
    with torch.no_grad():
        preds = []
        for start in range(0, len(data), 128):
            preds.append(model(data.images[start : start + 128]).argmax(dim=1))
    return (torch.cat(preds) == data.labels).float().mean().item()


def train_embedder(
    n_identities: int = 200,
    canvas: int = 64,
    steps: int = 400,
    batch: int = 16,
    seed: int = 0,
    margin: float = 0.5,
) -> Embedder:
    """Triplet-margin training: anchor/positive share identity geometry
    (different expression), negative is another identity."""
    model = Embedder()
    deterministic_init_(model, seed + 47)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    rng = np.random.default_rng([seed, 29])
    for _ in range(steps):
        anchors, positives, negatives = [], [], []
        for _ in range(batch):
            ia, ineg = rng.choice(n_identities, size=2, replace=False)
            ea, ep = rng.choice(NUM_EXPRESSIONS, size=2)
            en = rng.integers(NUM_EXPRESSIONS)
            a, p = toyfaces.render_translated_pair(
                int(ia), canvas, toyfaces.EXPRESSIONS[ea], toyfaces.EXPRESSIONS[ep]
            )
            n_ = toyfaces.render_sample(int(ineg), canvas, toyfaces.EXPRESSIONS[en])
            anchors.append(a.image)
            positives.append(p.image)
            negatives.append(n_.image)
        za = model(torch.stack(anchors))
        zp = model(torch.stack(positives))
        zn = model(torch.stack(negatives))
        d_pos = (1 - (za * zp).sum(dim=1))
        d_neg = (1 - (za * zn).sum(dim=1))
        loss = F.relu(d_pos - d_neg + margin).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    return model


def embed_images(model: Embedder, images: torch.Tensor, batch: int = 128) -> np.ndarray:
    with torch.no_grad():
        chunks = [model(images[s : s + batch]).numpy() for s in range(0, images.shape[0], batch)]
    return np.concatenate(chunks, axis=0)


# --- metrics -------------------------------------------------------------------


def eea(classifier: SmallCNN, translated: torch.Tensor, targets: torch.Tensor) -> float:
    """Fraction of translated images classified as their target label."""
    if translated.shape[0] == 0:
        raise ValueError("eea needs at least one image")
    with torch.no_grad():
        preds = []
        for start in range(0, translated.shape[0], 128):
            preds.append(classifier(translated[start : start + 128]).argmax(dim=1))
    return (torch.cat(preds) == targets).float().mean().item()


def confusion_matrix(classifier: SmallCNN, translated: torch.Tensor, targets: torch.Tensor, d: int) -> np.ndarray:
    with torch.no_grad():
        preds = torch.cat(
            [classifier(translated[s : s + 128]).argmax(dim=1) for s in range(0, translated.shape[0], 128)]
        )
    conf = np.zeros((d, d), dtype=np.int64)
    for t, p in zip(targets.tolist(), preds.tolist()):
        conf[t, p] += 1
    return conf


def preservation_error(confusion: np.ndarray) -> np.ndarray:
    """Per-class misclassification rate of non-target expressions, read off
    the confusion matrix columns."""
    d = confusion.shape[0]
    errors = np.zeros(d)
    for k in range(d):
        off_target = confusion[:, k].sum() - confusion[k, k]
        total = confusion.sum() - confusion[k].sum()
        errors[k] = off_target / total if total else 0.0
    return errors


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}) with 1e-6 diagonal
    regularization; the matrix square root comes from the eigendecomposition
    of the symmetrized product sqrt(S_a) S_b sqrt(S_a)."""
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    dim = feats_a.shape[1]
    for name, f in (("first", feats_a), ("second", feats_b)):
        if f.shape[0] < f.shape[1] + 1:
            raise ValueError(
                f"{name} feature set needs at least dim+1 = {dim + 1} samples, got {f.shape[0]}"
            )
    mu_a, mu_b = feats_a.mean(0), feats_b.mean(0)
    reg = 1e-6 * np.eye(dim)
    cov_a = np.cov(feats_a, rowvar=False) + reg
    cov_b = np.cov(feats_b, rowvar=False) + reg
    sqrt_a = _sqrtm_psd(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)


def id_loss(embedder: Embedder, originals: torch.Tensor, translated: torch.Tensor) -> float:
    """Mean (1 - cosine similarity) between embeddings of source and output."""
    za = embed_images(embedder, originals)
    zb = embed_images(embedder, translated)
    return float(np.mean(1.0 - (za * zb).sum(axis=1)))


def miou(pred: torch.Tensor, true: torch.Tensor, num_classes: int) -> tuple[float, np.ndarray]:
    """Mean IoU over classes present in pred or true; absent classes are
    excluded from the mean and reported as NaN."""
    pred = pred.reshape(-1)
    true = true.reshape(-1)
    per_class = np.full(num_classes, np.nan)
    for k in range(num_classes):
        p = pred == k
        t = true == k
        union = (p | t).sum().item()
        if union == 0:
            continue
        per_class[k] = (p & t).sum().item() / union
    present = ~np.isnan(per_class)
    return float(per_class[present].mean()), per_class


def seg_miou(seg, data: training.LoadedDataset, limit: int | None = None) -> float:
    from .segmentation import seg_forward

    n = len(data) if limit is None else min(limit, len(data))
    scores = []
    with torch.no_grad():
        for start in range(0, n, 64):
            logits = seg_forward(seg, data.images[start : start + 64])
            pred = logits.argmax(dim=1)
            for b in range(pred.shape[0]):
                scores.append(miou(pred[b], data.class_maps[start + b], toyfaces.NUM_CLASSES)[0])
    return float(np.mean(scores))


def diff_heatmap(original: torch.Tensor, translated: torch.Tensor) -> torch.Tensor:
    """Per-pixel mean absolute channel difference, min-max normalized to [0, 1]."""
    diff = (original - translated).abs().mean(dim=0)
    lo, hi = diff.min(), diff.max()
    if hi > lo:
        return (diff - lo) / (hi - lo)
    return torch.zeros_like(diff)


def save_heatmap_png(heatmap: torch.Tensor, path: str | Path) -> None:
    arr = (heatmap.numpy() * 255).round().astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_image_grid(images: list[torch.Tensor], path: str | Path, pad: int = 2) -> None:
    """Write a horizontal strip of (3, H, W) images in [-1, 1] as one PNG."""
    panels = []
    for img in images:
        arr = ((img.clamp(-1, 1) + 1) / 2 * 255).round().to(torch.uint8)
        panels.append(arr.permute(1, 2, 0).numpy())
    h = panels[0].shape[0]
    spacer = np.full((h, pad, 3), 255, dtype=np.uint8)
    row = panels[0]
    for p in panels[1:]:
        row = np.concatenate([row, spacer, p], axis=1)
    Image.fromarray(row).save(path)


# --- end-to-end evaluation ------------------------------------------------------


@dataclass
class EvalReport:
    eea: float
    fd: float
    id_loss: float
    miou: float
    per_class_iou: np.ndarray
    confusion: np.ndarray

    def __post_init__(self):
        assert 0.0 <= self.eea <= 1.0
        assert self.fd >= 0.0
        assert 0.0 <= self.miou <= 1.0

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("toy_eea", self.eea),
            ("toy_fd", self.fd),
            ("toy_id_loss", self.id_loss),
            ("toy_miou", self.miou),
        ]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for name, value in self.rows():
                writer.writerow([name, f"{value:.6f}"])

    def summary(self) -> str:
        return "\n".join(f"{name}: {value:.4f}" for name, value in self.rows())


def translate_batch(
    state: training.TrainState, images: torch.Tensor, targets: torch.Tensor
) -> torch.Tensor:
    """Translated output of a trained state. When the local and fusion
    branches were trained with zero weight (the global-only baseline), the
    meaningful output is the global generator's image."""
    cfg = state.config
    with torch.no_grad():
        out = training.forward_pipeline(
            state.seg, state.nets, images, targets, cfg.temperature, cfg.part_size,
            excluded=cfg.excluded_set(), end_to_end=False,
        )
    if cfg.lambda_local == 0.0 and cfg.lambda_fusion == 0.0:
        return out.x_global
    return out.x_t


def evaluate(
    state: training.TrainState,
    test_data: training.LoadedDataset,
    classifier: SmallCNN,
    embedder: Embedder,
    seed: int = 0,
) -> EvalReport:
    """Translate every test image to a uniformly drawn target expression and
    report toy-EEA / toy-FD / toy-ID / segmentation mIoU."""
    rng = np.random.default_rng([seed, 97])
    targets = torch.from_numpy(rng.integers(NUM_EXPRESSIONS, size=len(test_data)))
    translated = []
    for start in range(0, len(test_data), 32):
        translated.append(
            translate_batch(state, test_data.images[start : start + 32], targets[start : start + 32])
        )
    translated = torch.cat(translated)
    acc = eea(classifier, translated, targets)
    conf = confusion_matrix(classifier, translated, targets, NUM_EXPRESSIONS)
    feats_real = embed_images(embedder, test_data.images)
    feats_fake = embed_images(embedder, translated)
    fd = frechet_distance(feats_real, feats_fake)
    idl = id_loss(embedder, test_data.images, translated)
    seg_score = seg_miou(state.seg, test_data)
    with torch.no_grad():
        from .segmentation import seg_forward

        pred = seg_forward(state.seg, test_data.images[:1]).argmax(dim=1)[0]
    _, per_class = miou(pred, test_data.class_maps[0], toyfaces.NUM_CLASSES)
    return EvalReport(
        eea=acc, fd=fd, id_loss=idl, miou=seg_score, per_class_iou=per_class, confusion=conf
    )


# --- harnesses -------------------------------------------------------------------


def ablate_regions(
    config: training.TrainConfig,
    regions_excluded: frozenset[str],
    train_data: training.LoadedDataset,
    test_data: training.LoadedDataset,
    classifier: SmallCNN,
    embedder: Embedder,
    state: training.TrainState | None = None,
) -> EvalReport:
    cfg = replace(config, exclude_regions=",".join(sorted(regions_excluded)))
    if state is None:
        state = training.train(cfg, data=train_data)
    return evaluate(state, test_data, classifier, embedder, seed=cfg.seed)


def sweep_weights(
    config: training.TrainConfig,
    grid: list[tuple[float, float, float]],
    train_data: training.LoadedDataset,
    test_data: training.LoadedDataset,
    classifier: SmallCNN,
    embedder: Embedder,
    out_csv: str | Path | None = None,
) -> list[dict]:
    """Train once per (lambda_global, lambda_local, lambda_fusion) grid point
    and report toy-EEA / toy-FD per point."""
    rows = []
    for lam_g, lam_l, lam_f in grid:
        cfg = replace(config, lambda_global=lam_g, lambda_local=lam_l, lambda_fusion=lam_f)
        state = training.train(cfg, data=train_data)
        report = evaluate(state, test_data, classifier, embedder, seed=cfg.seed)
        rows.append(
            {"lambda_global": lam_g, "lambda_local": lam_l, "lambda_fusion": lam_f,
             "eea": report.eea, "fd": report.fd}
        )
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return rows
