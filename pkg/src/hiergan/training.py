"""Optimization loop, pipeline wiring, checkpointing and segmentation pretraining.

The generator-side update routes gradients from the local and fusion losses
into the segmentation parameters when end-to-end training is enabled; the
global branch never touches the segmentation network, so its loss contributes
exactly zero gradient to it.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from . import networks as N
from . import partops, segmentation, toyfaces
from .errors import CheckpointError, NumericError
from .segmentation import REGIONS

METRICS_COLUMNS = (
    "iter",
    "network",
    "adv_d",
    "adv_g",
    "cls_d",
    "cls_g",
    "rec",
    "total_d",
    "total_g",
)


@dataclass
class TrainConfig:
    iterations: int = 20_000
    batch: int = 8
    lr: float = 1e-4
    seg_lr: float = 0.0  # learning rate for the segmentation network; 0 = use lr
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_adv: float = 1.0
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    lambda_global: float = 1.0
    lambda_local: float = 1.0
    lambda_fusion: float = 1.0
    temperature: float = segmentation.DEFAULT_TEMPERATURE
    end_to_end: bool = True
    seed: int = 0
    image_size: int = 64
    part_size: int = 32
    label_dim: int = 4
    data_dir: str = ""
    out_dir: str = ""
    checkpoint_interval: int = 1000
    d_steps_per_g: int = 1
    gen_base: int = 16
    disc_base: int = 16
    fusion_base: int = 32
    n_res_global: int = 6
    n_res_local: int = 3
    disc_stages: int = 4
    seg_base: int = 16
    exclude_regions: str = ""  # comma-separated subset of le,re,n,m
    deterministic: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.seg_lr < 0:
            raise ValueError(f"seg_lr must be >= 0, got {self.seg_lr}")
        for region in self.excluded_set():
            if region not in REGIONS:
                raise ValueError(f"unknown region {region!r} in exclude_regions")

    def excluded_set(self) -> frozenset[str]:
        return frozenset(r for r in self.exclude_regions.split(",") if r)

    def weights(self) -> L.LossWeights:
        return L.LossWeights(
            adv=self.lambda_adv,
            cls=self.lambda_cls,
            rec=self.lambda_rec,
            per_network={
                "global": self.lambda_global,
                "fusion": self.lambda_fusion,
                "local": self.lambda_local,
            },
        )

    def network_config(self) -> N.NetworkConfig:
        return N.NetworkConfig(
            image_size=self.image_size,
            part_size=self.part_size,
            label_dim=self.label_dim,
            gen_base=self.gen_base,
            disc_base=self.disc_base,
            fusion_base=self.fusion_base,
            n_res_global=self.n_res_global,
            n_res_local=self.n_res_local,
            disc_stages=self.disc_stages,
            seed=self.seed,
        )


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class TrainState:
    config: TrainConfig
    seg: segmentation.SegNetwork
    nets: N.NetworkBundle
    optimizers: dict[str, torch.optim.Adam]
    iteration: int = 0

    def modules(self) -> dict[str, torch.nn.Module]:
        out = {"seg": self.seg}
        out.update(self.nets.all_modules())
        return out


def init_state(config: TrainConfig) -> TrainState:
    if config.deterministic:
        torch.set_num_threads(1)
    seg = segmentation.build_segnet(
        num_classes=toyfaces.NUM_CLASSES, seed=config.seed, base=config.seg_base
    )
    nets = N.build_networks(config.network_config())
    state = TrainState(config=config, seg=seg, nets=nets, optimizers={})
    betas = (config.beta1, config.beta2)
    for name, module in state.modules().items():
        lr = config.seg_lr if name == "seg" and config.seg_lr > 0 else config.lr
        state.optimizers[name] = torch.optim.Adam(module.parameters(), lr=lr, betas=betas)
    return state


@dataclass
class PipelineOut:
    x_t: torch.Tensor
    x_global: torch.Tensor
    x_local: torch.Tensor
    bundle: partops.PartBundle | None
    masks: segmentation.RegionMasks | None
    logits: torch.Tensor | None
    translated: dict[str, torch.Tensor] = field(default_factory=dict)


def forward_pipeline(
    seg: segmentation.SegNetwork,
    nets: N.NetworkBundle,
    images: torch.Tensor,
    target,
    temperature: float,
    part_size: int,
    excluded: frozenset[str] = frozenset(),
    end_to_end: bool = True,
) -> PipelineOut:
    logits = segmentation.seg_forward(seg, images)
    if not end_to_end:
        logits = logits.detach()
    soft = segmentation.tempered_softmax(logits, temperature)
    masks = segmentation.group_masks(soft)
    hard = segmentation.hard_labels(soft)
    bundle = partops.extract_parts(images, masks, hard, part_size)
    translated = {
        r: N.gen_translate(nets.generators[r], bundle.parts[r], target)
        for r in REGIONS
        if r not in excluded
    }
    canvas = images.shape[-2:]
    if translated:
        x_local = partops.stitch_parts(translated, bundle.boxes, masks, tuple(canvas))
    else:
        x_local = torch.zeros_like(images)
    x_global = N.gen_translate(nets.generators["global"], images, target)
    x_t = N.fuse(nets.fusion, x_global, x_local)
    return PipelineOut(
        x_t=x_t, x_global=x_global, x_local=x_local, bundle=bundle,
        masks=masks, logits=logits, translated=translated,
    )


def cycle_pass(
    state: TrainState,
    out: PipelineOut,
    images: torch.Tensor,
    source,
) -> dict[str, torch.Tensor]:
    """Reconstruction losses: locals feed translated parts back through their
    generators, the global branch cycles its own output, and the fusion cycle
    re-runs the full pipeline on the fused image."""
    cfg = state.config
    excluded = cfg.excluded_set()
    active = _active_networks(cfg)
    want_rec = cfg.lambda_rec > 0
    rec: dict[str, torch.Tensor] = {k: torch.zeros(()) for k in L.NETWORK_KEYS}
    if not want_rec:
        return rec
    for r in REGIONS:
        if r not in active:
            continue
        # cycle the translated part back to the source expression
        back = N.gen_translate(state.nets.generators[r], out.translated[r], source)
        rec[r] = L.rec_loss(out.bundle.parts[r], back)
    if "global" in active:
        back_global = N.gen_translate(state.nets.generators["global"], out.x_global, source)
        rec["global"] = L.rec_loss(images, back_global)
    if "fusion" in active:
        cycled = forward_pipeline(
            state.seg,
            state.nets,
            out.x_t,
            source,
            cfg.temperature,
            cfg.part_size,
            excluded=excluded,
            end_to_end=cfg.end_to_end,
        )
        rec["fusion"] = L.rec_loss(images, cycled.x_t)
    return rec


def _real_fake_pairs(
    state: TrainState, images: torch.Tensor, out: PipelineOut, real_bundle: partops.PartBundle
) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    reals = {"global": images, "fusion": images}
    fakes = {"global": out.x_global, "fusion": out.x_t}
    for r in REGIONS:
        if r not in out.translated:
            continue
        reals[r] = real_bundle.parts[r]
        fakes[r] = out.translated[r]
    return reals, fakes


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _check_loss(value, network: str, iteration: int) -> torch.Tensor:
    """Evaluate a loss thunk (or tensor) and re-raise any non-finite failure
    with the offending network and iteration attached."""
    try:
        if callable(value):
            value = value()
    except NumericError as exc:
        raise NumericError(
            f"non-finite loss for network {network!r} at iteration {iteration}: {exc}"
        ) from exc
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite loss for network {network!r} at iteration {iteration}")
    return value


def _active_networks(cfg: TrainConfig) -> list[str]:
    """Networks that participate in optimization: not excluded and carrying a
    nonzero per-network weight."""
    weights = cfg.weights()
    excluded = cfg.excluded_set()
    return [
        k
        for k in L.NETWORK_KEYS
        if k not in excluded and weights.network_weight(k) > 0
    ]


def train_step(
    state: TrainState,
    images: torch.Tensor,
    source_labels: torch.Tensor,
    target_labels: torch.Tensor,
) -> L.LossReport:
    cfg = state.config
    weights = cfg.weights()
    excluded = cfg.excluded_set()
    active = _active_networks(cfg)
    discs = state.nets.discriminators
    gens = state.nets.generators
    needs_parts = any(k in active for k in REGIONS) or "fusion" in active

    report = {k: L.NetworkLosses() for k in L.NETWORK_KEYS}

    # Single forward per iteration: the discriminator phase consumes detached
    # fakes, the generator phase reuses the same graph.
    gen_modules = [state.seg, state.nets.fusion, *gens.values()]
    _set_requires_grad(gen_modules, True)
    if not cfg.end_to_end:
        _set_requires_grad([state.seg], False)
    if needs_parts:
        out = forward_pipeline(
            state.seg, state.nets, images, target_labels, cfg.temperature,
            cfg.part_size, excluded=excluded, end_to_end=cfg.end_to_end,
        )
    else:
        # global-only configuration: the segmentation / local / fusion branches
        # carry no loss, so skip their compute entirely
        x_global = N.gen_translate(gens["global"], images, target_labels)
        out = PipelineOut(
            x_t=x_global, x_global=x_global, x_local=torch.zeros_like(images),
            bundle=None, masks=None, logits=None,
        )

    # --- discriminator updates ---
    _set_requires_grad(discs.values(), True)
    reals, fakes = _real_fake_pairs(state, images, out, out.bundle)
    for _ in range(cfg.d_steps_per_g):
        d_total = torch.zeros(())
        for key in active:
            lam = weights.network_weight(key)
            real_map, real_cls = N.disc_forward(discs[key], reals[key].detach())
            fake_map, _ = N.disc_forward(discs[key], fakes[key].detach())
            adv_d = _check_loss(
                lambda: L.adv_loss_d({key: real_map}, {key: fake_map}), key, state.iteration
            )
            cls_d = _check_loss(lambda: L.cls_loss(real_cls, source_labels), key, state.iteration)
            report[key].adv_d = adv_d.item()
            report[key].cls_d = cls_d.item()
            d_total = d_total + lam * (weights.adv * adv_d + weights.cls * cls_d)
        for key in active:
            state.optimizers[f"disc_{key}"].zero_grad(set_to_none=True)
        if d_total.requires_grad:
            d_total.backward()
        for key in active:
            state.optimizers[f"disc_{key}"].step()

    # --- generator-side update ---
    _set_requires_grad(discs.values(), False)
    rec = cycle_pass(state, out, images, source_labels)
    g_total = torch.zeros(())
    for key in active:
        lam = weights.network_weight(key)
        fake_map, fake_cls = N.disc_forward(discs[key], fakes[key])
        adv_g = _check_loss(lambda: L.adv_loss_g({key: fake_map}), key, state.iteration)
        cls_g = _check_loss(lambda: L.cls_loss(fake_cls, target_labels), key, state.iteration)
        rec_k = _check_loss(rec[key], key, state.iteration)
        report[key].adv_g = adv_g.item()
        report[key].cls_g = cls_g.item()
        report[key].rec = rec_k.item()
        g_total = g_total + lam * (weights.adv * adv_g + weights.cls * cls_g + weights.rec * rec_k)
    # step every generator-side module that sits in the forward path
    if needs_parts:
        g_names = [f"gen_{k}" for k in N.GENERATOR_KEYS if k not in excluded]
        g_names.append("fusion")
        if cfg.end_to_end:
            g_names.append("seg")
    else:
        g_names = ["gen_global"]
    for name in g_names:
        state.optimizers[name].zero_grad(set_to_none=True)
    if g_total.requires_grad:
        g_total.backward()
        for name in g_names:
            state.optimizers[name].step()
    _set_requires_grad(discs.values(), True)
    _set_requires_grad([state.seg], True)

    state.iteration += 1
    return L.total_loss(report, weights)


# --- dataset handling -------------------------------------------------------


@dataclass
class LoadedDataset:
    images: torch.Tensor  # (N, 3, H, W)
    labels: torch.Tensor  # (N,)
    class_maps: torch.Tensor  # (N, H, W)

    def __len__(self) -> int:
        return self.images.shape[0]


def load_dataset(path: str | Path) -> LoadedDataset:
    samples = toyfaces.read_dataset(path)
    if not samples:
        raise NumericError(f"empty dataset at {path}")
    return LoadedDataset(
        images=torch.stack([s.image for s in samples]),
        labels=torch.tensor([s.label.index for s in samples]),
        class_maps=torch.stack([s.class_map for s in samples]),
    )


def sample_batch(
    data: LoadedDataset, config: TrainConfig, iteration: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Deterministic per-iteration batch and uniform target labels: the RNG
    is keyed on (seed, iteration), so resumed runs reproduce the stream."""
    rng = np.random.default_rng([config.seed, iteration, 65537])
    idx = rng.integers(len(data), size=config.batch)
    targets = rng.integers(config.label_dim, size=config.batch)
    sel = torch.from_numpy(idx)
    return data.images[sel], data.labels[sel], torch.from_numpy(targets)


# --- checkpoint container ---------------------------------------------------

_MAGIC = b"HGCKPT1\n"

_DTYPES = {
    "float32": (torch.float32, np.float32),
    "float64": (torch.float64, np.float64),
    "int64": (torch.int64, np.int64),
}


def _named_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    for mod_name, module in state.modules().items():
        for pname, p in module.named_parameters():
            out[f"{mod_name}.{pname}"] = p.data
    for opt_name, opt in state.optimizers.items():
        module = state.modules()[opt_name]
        params = list(module.parameters())
        for i, p in enumerate(params):
            st = opt.state.get(p)
            if not st:
                continue
            step = st["step"]
            step_value = float(step.item() if isinstance(step, torch.Tensor) else step)
            out[f"opt.{opt_name}.{i}.step"] = torch.tensor([step_value], dtype=torch.float64)
            out[f"opt.{opt_name}.{i}.exp_avg"] = st["exp_avg"]
            out[f"opt.{opt_name}.{i}.exp_avg_sq"] = st["exp_avg_sq"]
    return out


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    tensors = _named_tensors(state)
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": str(t.dtype).replace("torch.", ""),
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "meta": {
                "config_hash": config_hash(state.config),
                "iteration": state.iteration,
                "config": asdict(state.config),
            },
            "tensors": entries,
        }
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint_meta(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"{path}: bad magic in container header")
        n = int.from_bytes(fh.read(8), "little")
        try:
            header = json.loads(fh.read(n))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt container header: {exc}") from exc
    return header["meta"]


def load_checkpoint(path: str | Path, config: TrainConfig | None = None) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"{path}: bad magic in container header")
        n = int.from_bytes(fh.read(8), "little")
        try:
            header = json.loads(fh.read(n))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt container header: {exc}") from exc
        base = fh.tell()
        meta = header["meta"]
        saved_config = TrainConfig(**meta["config"])
        if config is not None and config_hash(config) != meta["config_hash"]:
            raise CheckpointError(
                f"{path}: config hash mismatch (checkpoint {meta['config_hash']}, "
                f"requested {config_hash(config)}); refusing to resume"
            )
        state = init_state(saved_config if config is None else config)
        tensors: dict[str, torch.Tensor] = {}
        for entry in header["tensors"]:
            if entry["dtype"] not in _DTYPES:
                raise CheckpointError(f"{path}: section {entry['name']}: unknown dtype {entry['dtype']}")
            tdtype, ndtype = _DTYPES[entry["dtype"]]
            fh.seek(base + entry["offset"])
            raw = fh.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise CheckpointError(f"{path}: section {entry['name']}: truncated data")
            arr = np.frombuffer(raw, dtype=np.dtype(ndtype).newbyteorder("<")).reshape(entry["shape"])
            tensors[entry["name"]] = torch.from_numpy(arr.astype(ndtype)).to(tdtype)

    with torch.no_grad():
        for mod_name, module in state.modules().items():
            for pname, p in module.named_parameters():
                key = f"{mod_name}.{pname}"
                if key not in tensors:
                    raise CheckpointError(f"{path}: section {key}: missing tensor")
                p.copy_(tensors[key])
    for opt_name, opt in state.optimizers.items():
        params = list(state.modules()[opt_name].parameters())
        for i, p in enumerate(params):
            key = f"opt.{opt_name}.{i}.step"
            if key not in tensors:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(tensors[key].item())),
                "exp_avg": tensors[f"opt.{opt_name}.{i}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"opt.{opt_name}.{i}.exp_avg_sq"].clone(),
            }
    state.iteration = meta["iteration"]
    return state


# --- driver loop -------------------------------------------------------------


def write_metrics_row(writer, iteration: int, report: L.LossReport) -> None:
    for key in L.NETWORK_KEYS:
        comp = report.per_network[key]
        writer.writerow(
            [
                iteration,
                key,
                f"{comp.adv_d:.6f}",
                f"{comp.adv_g:.6f}",
                f"{comp.cls_d:.6f}",
                f"{comp.cls_g:.6f}",
                f"{comp.rec:.6f}",
                f"{report.total_d:.6f}",
                f"{report.total_g:.6f}",
            ]
        )


def train(
    config: TrainConfig,
    state: TrainState | None = None,
    data: LoadedDataset | None = None,
    log_every: int = 1,
) -> TrainState:
    """Run the training loop from ``state`` (or a fresh init) to
    ``config.iterations``, appending metrics and writing checkpoints."""
    if data is None:
        data = load_dataset(config.data_dir)
    if state is None:
        state = init_state(config)
    out_dir = Path(config.out_dir) if config.out_dir else None
    metrics_path = out_dir / "metrics.csv" if out_dir else None
    writer = None
    fh = None
    if metrics_path:
        out_dir.mkdir(parents=True, exist_ok=True)
        fresh = state.iteration == 0 or not metrics_path.exists()
        fh = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRICS_COLUMNS)
    try:
        while state.iteration < config.iterations:
            images, sources, targets = sample_batch(data, config, state.iteration)
            iteration = state.iteration
            report = train_step(state, images, sources, targets)
            if writer and iteration % log_every == 0:
                write_metrics_row(writer, iteration, report)
            if out_dir and (
                state.iteration % config.checkpoint_interval == 0
                or state.iteration == config.iterations
            ):
                save_checkpoint(state, out_dir / "checkpoint.bin")
        if out_dir:
            save_checkpoint(state, out_dir / "checkpoint.bin")
    finally:
        if fh:
            fh.close()
    return state


# --- segmentation pretraining -------------------------------------------------


def pretrain_segmentation(
    seg: segmentation.SegNetwork,
    data: LoadedDataset,
    fraction: float = 1.0,
    epochs: int = 3,
    batch: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
) -> tuple[segmentation.SegNetwork, float]:
    """Per-pixel cross-entropy training on the first ceil(fraction * N)
    samples; returns the network and its final training mIoU."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = int(np.ceil(fraction * len(data)))
    images = data.images[:n]
    targets = data.class_maps[:n]
    opt = torch.optim.Adam(seg.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 271828])
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            sel = torch.from_numpy(order[start : start + batch])
            logits = segmentation.seg_forward(seg, images[sel])
            loss = torch.nn.functional.cross_entropy(logits, targets[sel])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    from .evaluation import miou  # local import: evaluation depends on training types

    with torch.no_grad():
        scores = []
        for start in range(0, n, 64):
            logits = segmentation.seg_forward(seg, images[start : start + 64])
            pred = logits.argmax(dim=1)
            for b in range(pred.shape[0]):
                scores.append(miou(pred[b], targets[start + b], toyfaces.NUM_CLASSES)[0])
    return seg, float(np.mean(scores))
