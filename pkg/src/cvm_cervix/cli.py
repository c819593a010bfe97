"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
abort (non-finite loss), 5 every image given to ``predict`` failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .checkpoint import checkpoint_from_model, load_checkpoint, model_from_checkpoint, quantize_fp16, save_checkpoint
from .config import ModelConfig
from .data import (IMAGENET_MEAN, IMAGENET_STD, DatasetIndex, Preprocessor, Sample, augment4x,
                   load_image, make_synthetic_dataset, read_manifest, scan_dataset, split, write_manifest)
from .errors import ConfigError, ContractError, DataError, NumericalError
from .functional import softmax_np
from .fusion import build_model
from .tensor import Tensor
from .train import TrainConfig, evaluate, export_features, train

log = logging.getLogger("cvm_cervix")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_PREDICT = 0, 2, 3, 4, 5
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


@dataclass
class RunConfig:
    preset: str = "desk"
    model: dict[str, Any] = field(default_factory=dict)
    data_root: str | None = None
    seed: int = 0
    out: str = "cvm_out"
    augment4x: bool = False
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    normalize_mean: tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: tuple[float, float, float] = IMAGENET_STD
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        train_fields = d.pop("train")
        train_fields.pop("seed")
        d.update(train_fields)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig.preset(self.preset, num_classes).with_overrides(self.model)


def _apply(cfg: RunConfig, values: dict[str, Any], source: str) -> None:
    for key, value in values.items():
        if value is None:
            continue
        if key in _TRAIN_KEYS and key != "seed":
            setattr(cfg.train, key, value)
        elif key in {f.name for f in dataclasses.fields(RunConfig)} - {"train"}:
            if key in ("split_ratios", "normalize_mean", "normalize_std"):
                value = tuple(float(v) for v in value)
                if len(value) != 3:
                    raise ConfigError(f"{key} needs three values")
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown config key {key!r} in {source}")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Preset defaults, then the JSON file, then command-line flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        _apply(cfg, values, args.config)
    flags = {
        "preset": args.preset, "seed": args.seed, "out": args.out,
        "augment4x": True if args.augment4x else None,
        "data_root": getattr(args, "data", None),
        "epochs": getattr(args, "epochs", None), "max_steps": getattr(args, "max_steps", None),
        "lr": getattr(args, "lr", None), "batch_size": getattr(args, "batch_size", None),
    }
    _apply(cfg, flags, "command line")
    cfg.train.seed = cfg.seed
    if cfg.train.batch_size < 1 or cfg.train.epochs < 0 or cfg.train.lr < 0:
        raise ConfigError("batch_size must be >= 1, epochs >= 0 and lr >= 0")
    cfg.model_config(2)  # validates preset and overrides early
    return cfg


def _split_index(cfg: RunConfig) -> DatasetIndex:
    if not cfg.data_root:
        raise ConfigError("no data root given (use --data or data_root in the config)")
    return split(scan_dataset(cfg.data_root), cfg.split_ratios, cfg.seed)


def _train_samples(index: DatasetIndex, augment: bool) -> list[Sample]:
    train_set = index.subset("train").samples
    return augment4x(train_set) if augment else train_set


def _preprocessor(image_size: int, meta: dict[str, Any]) -> Preprocessor:
    return Preprocessor(image_size, tuple(meta.get("normalize_mean", IMAGENET_MEAN)),
                        tuple(meta.get("normalize_std", IMAGENET_STD)))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    root = make_synthetic_dataset(cfg.out, args.classes, args.per_class, args.size, cfg.seed)
    print(f"wrote {args.classes * args.per_class} images to {root}")
    return EXIT_OK


def cmd_split_manifest(args, cfg: RunConfig) -> int:
    index = _split_index(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(index, out / "split.tsv")
    counts = index.split_counts()
    n_train = len(_train_samples(index, cfg.augment4x))
    print(f"classes\t{index.num_classes}")
    print(f"train\t{n_train}")
    if cfg.augment4x:
        print(f"train_original\t{counts['train']}")
    print(f"val\t{counts['val']}")
    print(f"test\t{counts['test']}")
    print(f"total\t{len(index)}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    index = _split_index(cfg)
    train_set = _train_samples(index, cfg.augment4x)
    val_set = index.subset("val").samples
    if not train_set or not val_set:
        raise DataError(f"{cfg.data_root}: train and validation splits must be nonempty "
                        f"(got {len(train_set)} / {len(val_set)})")
    model_cfg = cfg.model_config(index.num_classes)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    effective = cfg.to_dict()
    effective["model_config"] = model_cfg.to_dict()
    (out / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(index, out / "split.tsv")

    log_path = out / "train.log"
    log_path.unlink(missing_ok=True)
    meta = {"class_names": index.class_names, "split_seed": cfg.seed, "split_ratios": list(cfg.split_ratios),
            "normalize_mean": list(cfg.normalize_mean), "normalize_std": list(cfg.normalize_std)}
    model = build_model(model_cfg, cfg.seed)
    pre = Preprocessor(model_cfg.image_size, cfg.normalize_mean, cfg.normalize_std)
    result = train(model, train_set, val_set, cfg.train, pre, log_path, meta)
    if result.best is None:
        raise ContractError("no epoch completed; nothing to save (epochs must be >= 1)")
    save_checkpoint(result.best, out / "best.cvmx")
    final_meta = dict(meta, epoch=result.history[-1].epoch, step=result.steps)
    save_checkpoint(checkpoint_from_model(model, final_meta), out / "final.cvmx")
    print(f"train samples {len(train_set)}, val samples {len(val_set)}, steps {result.steps}")
    print(f"best val accuracy {result.best_val_accuracy:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint {out / 'best.cvmx'}")
    return EXIT_OK


def _eval_subset(args, cfg: RunConfig, ckpt) -> tuple[DatasetIndex, list[Sample]]:
    if not cfg.data_root:
        raise ConfigError("no data root given (use --data)")
    if args.manifest:
        names = ckpt.meta.get("class_names") or scan_dataset(cfg.data_root).class_names
        index = read_manifest(args.manifest, cfg.data_root, names)
    else:
        ratios = tuple(ckpt.meta.get("split_ratios", (0.6, 0.2, 0.2)))
        index = split(scan_dataset(cfg.data_root), ratios, ckpt.meta.get("split_seed", cfg.seed))
    n_model = ckpt.model_config.num_classes
    if index.num_classes != n_model:
        raise ConfigError(f"checkpoint has {n_model} classes but the dataset has {index.num_classes}")
    return index, index.subset(args.split).samples


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    index, samples = _eval_subset(args, cfg, ckpt)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    model = model_from_checkpoint(ckpt)
    pre = _preprocessor(model.model_config.image_size, ckpt.meta)
    cm, report = evaluate(model, samples, pre, index.num_classes, cfg.train.batch_size)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"confusion_{args.split}.csv").write_text(cm.to_csv(index.class_names), encoding="utf-8")
    summary = {"split": args.split, "samples": cm.total, "precision": ckpt.precision,
               "accuracy": report.accuracy, "macro_precision": report.macro_precision,
               "macro_recall": report.macro_recall, "macro_f1": report.macro_f1}
    (out / f"metrics_{args.split}.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"checkpoint precision {ckpt.precision}; {cm.total} {args.split} samples")
    print(report.format(index.class_names))
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    pre = _preprocessor(model.model_config.image_size, ckpt.meta)
    names = ckpt.meta.get("class_names") or [str(i) for i in range(model.model_config.num_classes)]
    ok = 0
    for path in args.images:
        try:
            x = pre(Sample(load_image(path), -1))
        except DataError as exc:
            print(f"error\t{path}\t{exc}", file=sys.stderr)
            continue
        probs = softmax_np(model(Tensor(x[None])).data.astype(np.float64))[0]
        k = int(np.argmax(probs))
        print(f"{path}\t{names[k]}\t{probs[k]:.6f}")
        ok += 1
    return EXIT_OK if ok else EXIT_PREDICT


def cmd_quantize(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.input)
    if ckpt.precision == "fp16":
        print("no-op: checkpoint is already fp16")
        save_checkpoint(ckpt, args.output)
        return EXIT_OK
    quant, saturated = quantize_fp16(ckpt)
    save_checkpoint(quant, args.output)
    before, after = ckpt.payload_nbytes, quant.payload_nbytes
    print(f"payload bytes before {before} after {after} ratio {after / before:.3f}")
    print(f"saturated values {saturated}")
    return EXIT_OK


def cmd_features(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _, samples = _eval_subset(args, cfg, ckpt)
    model = model_from_checkpoint(ckpt)
    pre = _preprocessor(model.model_config.image_size, ckpt.meta)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"features_{args.split}.csv"
    rows = export_features(model, samples, pre, path, cfg.train.batch_size)
    print(f"wrote {rows} rows of width {model.model_config.fusion.fused_dim} to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="seed for splitting, initialisation and shuffling")
    common.add_argument("--preset", choices=["paper", "desk"], help="model size preset")
    common.add_argument("--out", help="output directory")
    common.add_argument("--augment4x", action="store_true", help="expand the train split 4x (rot180, flips)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cvm-cervix", description="Hybrid CNN + transformer image classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a small synthetic dataset")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train and write checkpoints")
    p.add_argument("--data", help="dataset root (one directory per class)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint on a split"),
                             ("features", cmd_features, "export fused features as CSV")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("checkpoint")
        p.add_argument("--data", help="dataset root")
        p.add_argument("--split", choices=["train", "val", "test"], default="test")
        p.add_argument("--manifest", help="split manifest to use instead of re-splitting")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", parents=[common], help="classify image files")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("quantize", parents=[common], help="store weights as fp16")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("split-manifest", parents=[common], help="write the stratified split manifest")
    p.add_argument("--data", help="dataset root")
    p.set_defaults(func=cmd_split_manifest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
