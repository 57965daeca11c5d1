"""Command-line entry point: data generation, segmentation pretraining,
training, evaluation, gradient checking, region ablations, and single-image
translation grids.

Run configs are flat typed ``key=value`` text files covering every training
field; command-line flags override file values, and the fully resolved config
is echoed to ``<outdir>/resolved.cfg``. Exit codes: 0 success, 1 validation
error (bad flags, config keys, or paths), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import torch

from . import evaluation, gradcheck, toyfaces, training
from .errors import CheckpointError, ConfigError, DatasetError
from .labels import EXPRESSIONS, NUM_EXPRESSIONS
from .segmentation import REGIONS

_SCHEMA = {f.name: f.type for f in dataclasses.fields(training.TrainConfig)}


def _coerce(key: str, raw: str):
    kind = _SCHEMA[key]
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc
    return raw


def parse_config_file(path: str | Path) -> dict:
    """Flat ``key=value`` file; every key must be a training-config field."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(args: argparse.Namespace) -> training.TrainConfig:
    """File values, overridden by any flags the user actually passed."""
    values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    for key in _SCHEMA:
        flag = getattr(args, f"opt_{key}", None)
        if flag is not None:
            values[key] = _coerce(key, flag) if isinstance(flag, str) else flag
    if getattr(args, "end_to_end", None) is not None:
        values["end_to_end"] = _coerce("end_to_end", args.end_to_end)
    if getattr(args, "data", None):
        values["data_dir"] = args.data
    if getattr(args, "out", None):
        values["out_dir"] = args.out
    if getattr(args, "deterministic", False):
        values["deterministic"] = True
    try:
        return training.TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def write_resolved(config: training.TrainConfig, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{key}={getattr(config, key)}" for key in sorted(_SCHEMA)
    ]
    (out_dir / "resolved.cfg").write_text("\n".join(lines) + "\n")


def _default_out(args: argparse.Namespace, command: str) -> str:
    if getattr(args, "out", None):
        return args.out
    root = os.environ.get("HIERGAN_OUT", "runs")
    return str(Path(root) / command)


def _eval_models(data: training.LoadedDataset, args):
    classifier = evaluation.train_expression_classifier(
        data, epochs=args.clf_epochs, seed=0
    )
    embedder = evaluation.train_embedder(steps=args.emb_steps, seed=0)
    return classifier, embedder


# --- subcommands -----------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = _default_out(args, "dataset")
    samples = toyfaces.generate_dataset(args.n, canvas=args.canvas, seed=args.seed)
    toyfaces.write_dataset(samples, out)
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_pretrain_seg(args) -> int:
    config = resolve_config(args)
    out = Path(_default_out(args, "pretrain"))
    config = dataclasses.replace(config, data_dir=args.data, out_dir=str(out))
    write_resolved(config, out)
    data = training.load_dataset(args.data)
    state = training.init_state(config)
    _, score = training.pretrain_segmentation(
        state.seg, data, fraction=args.fraction, epochs=args.epochs, seed=config.seed
    )
    training.save_checkpoint(state, out / "checkpoint.bin")
    print(f"pretrained segmentation (fraction={args.fraction}): training mIoU {score:.4f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    out = Path(config.out_dir or _default_out(args, "train"))
    config = dataclasses.replace(config, out_dir=str(out))
    write_resolved(config, out)
    if config.deterministic:
        torch.set_num_threads(1)
    state = None
    if args.resume:
        state = training.load_checkpoint(args.resume, config)
    state = training.train(config, state=state)
    print(f"trained to iteration {state.iteration}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    out = Path(_default_out(args, "eval"))
    out.mkdir(parents=True, exist_ok=True)
    state = training.load_checkpoint(args.checkpoint)
    data = training.load_dataset(args.data)
    classifier, embedder = _eval_models(data, args)
    report = evaluation.evaluate(state, data, classifier, embedder, seed=args.seed)
    report.write_csv(out / "report.csv")
    (out / "summary.txt").write_text(report.summary() + "\n")
    # qualitative artifacts for the first few samples
    n_grid = min(4, len(data))
    targets = torch.arange(n_grid) % NUM_EXPRESSIONS
    pipe = training.forward_pipeline(
        state.seg, state.nets, data.images[:n_grid], targets,
        state.config.temperature, state.config.part_size,
        excluded=state.config.excluded_set(), end_to_end=False,
    )
    for i in range(n_grid):
        heat = evaluation.diff_heatmap(data.images[i], pipe.x_t[i].detach())
        evaluation.save_heatmap_png(heat, out / f"heatmap_{i}.png")
        evaluation.save_image_grid(
            [data.images[i], pipe.x_global[i].detach(), pipe.x_local[i].detach(),
             pipe.x_t[i].detach(), heat.unsqueeze(0).expand(3, -1, -1) * 2 - 1],
            out / f"grid_{i}.png",
        )
    print(report.summary())
    print(f"report in {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.all_checks(seed=args.seed)
    for r in results:
        print(r)
    return 0 if all(r.passed for r in results) else 2


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    out = Path(_default_out(args, "ablate"))
    config = dataclasses.replace(config, data_dir=args.data or config.data_dir)
    write_resolved(config, out)
    train_data = training.load_dataset(config.data_dir)
    test_data = training.load_dataset(args.test_data) if args.test_data else train_data
    classifier, embedder = _eval_models(train_data, args)
    subsets = [frozenset()] + [
        frozenset(s.split(",")) for s in (args.exclude or [])
    ]
    for subset in subsets:
        for region in subset:
            if region not in REGIONS:
                raise ConfigError(f"unknown region {region!r} in --exclude")
    import csv as _csv

    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["excluded", "eea", "fd", "id_loss", "miou"])
        for subset in subsets:
            cfg = dataclasses.replace(
                config,
                exclude_regions=",".join(sorted(subset)),
                out_dir=str(out / ("full" if not subset else "no_" + "_".join(sorted(subset)))),
            )
            report = evaluation.ablate_regions(
                cfg, subset, train_data, test_data, classifier, embedder
            )
            writer.writerow(
                ["+".join(sorted(subset)) or "none",
                 f"{report.eea:.6f}", f"{report.fd:.6f}",
                 f"{report.id_loss:.6f}", f"{report.miou:.6f}"]
            )
            print(f"excluded={'+'.join(sorted(subset)) or 'none'}: "
                  f"eea={report.eea:.4f} fd={report.fd:.4f}")
    print(f"ablation table: {out / 'ablation.csv'}")
    return 0


def cmd_translate(args) -> int:
    out = Path(_default_out(args, "translate"))
    out.mkdir(parents=True, exist_ok=True)
    state = training.load_checkpoint(args.checkpoint)
    if args.image:
        raise ConfigError("--image: loading arbitrary image files is not supported; use --seed")
    sample = toyfaces.render_sample(args.seed, state.config.image_size)
    image = sample.image.unsqueeze(0)
    target = torch.tensor([EXPRESSIONS.index(args.target)])
    pipe = training.forward_pipeline(
        state.seg, state.nets, image, target,
        state.config.temperature, state.config.part_size,
        excluded=state.config.excluded_set(), end_to_end=False,
    )
    heat = evaluation.diff_heatmap(image[0], pipe.x_t[0].detach())
    path = out / f"translate_seed{args.seed}_{args.target}.png"
    evaluation.save_image_grid(
        [image[0], pipe.x_global[0].detach(), pipe.x_local[0].detach(),
         pipe.x_t[0].detach(), heat.unsqueeze(0).expand(3, -1, -1) * 2 - 1],
        path,
    )
    print(f"grid (input | global | local | fused | heatmap): {path}")
    return 0


# --- argument parsing --------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, bit-reproducible execution")
    for key in sorted(_SCHEMA):
        p.add_argument(f"--opt-{key.replace('_', '-')}", dest=f"opt_{key}",
                       metavar="V", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiergan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic face dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-seg", help="supervised segmentation pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain_seg)

    p = sub.add_parser("train", help="adversarial training loop")
    p.add_argument("--end-to-end", dest="end_to_end", choices=("true", "false"))
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--data")
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics, grids and heatmaps for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clf-epochs", dest="clf_epochs", type=int, default=15)
    p.add_argument("--emb-steps", dest="emb_steps", type=int, default=400)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference invariant report")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/evaluate with region subsets excluded")
    p.add_argument("--exclude", action="append",
                   help="comma-separated regions to exclude; repeatable")
    p.add_argument("--data")
    p.add_argument("--test-data", dest="test_data")
    p.add_argument("--clf-epochs", dest="clf_epochs", type=int, default=15)
    p.add_argument("--emb-steps", dest="emb_steps", type=int, default=400)
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("translate", help="single-image translation grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image", help="(unsupported; present for interface parity)")
    p.add_argument("--target", choices=EXPRESSIONS, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_translate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
