"""Command-line entry point: train, eval, infer, gradcheck, bench.

Failures print one line to stderr, ``error[<category>]: <message>``, and exit
with the category's code.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import checkpoint as ckpt_io
from .config import ConfigError, default_out_dir, load_config
from .data import DataError, decode_image, load_images, load_manifest, preprocess, stack_samples, synth_dataset
from .gradcheck import check_model_gradients
from .model import PRESETS
from .train import NonFiniteLoss, TrainingError, evaluate, train

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5, "numeric": 6, "check": 7}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _synthetic(model_cfg, per_class: int, seed: int, noise: float):
    samples = synth_dataset(model_cfg.num_classes, per_class, model_cfg.image_size, model_cfg.channels,
                            seed=seed, noise=noise)
    names = [f"class_{i}" for i in range(model_cfg.num_classes)]
    return stack_samples(samples), names


def _load_dataset(source: str, model_cfg, label_map=None, split="train", normalization="none"):
    manifest = load_manifest(source, label_map=label_map, split=split)
    images, labels = load_images(manifest, model_cfg.image_size, model_cfg.channels, normalization)
    return (images, labels), manifest.classes


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.preset)
    out = Path(args.out or cfg.out_dir)
    m = cfg.model
    if cfg.train_data == "synthetic":
        train_set, names = _synthetic(m, cfg.synth_per_class, cfg.synth_seed, cfg.synth_noise)
    else:
        train_set, names = _load_dataset(cfg.train_data, m, cfg.label_map, "train", cfg.normalization)
    eval_set = None
    if cfg.eval_data == "synthetic":
        eval_set, _ = _synthetic(m, cfg.synth_eval_per_class, cfg.synth_eval_seed, cfg.synth_noise)
    elif cfg.eval_data:
        eval_set, eval_names = _load_dataset(cfg.eval_data, m, cfg.label_map, "test", cfg.normalization)
        if eval_names != names:
            raise CliError("data", f"eval classes {eval_names} differ from train classes {names}")
    if len(names) != m.num_classes:
        raise CliError("data", f"dataset has {len(names)} classes, model is configured for {m.num_classes}")

    def progress(row):
        print(f"epoch {row['epoch']:4d}  loss {row['train_loss']:.4f}  train_acc {row['train_acc']:.4f}  "
              f"eval_acc {row['eval_acc']:.4f}  {row['seconds']:.1f}s", flush=True)

    result = train(cfg, train_set, eval_set, names, out_dir=out, progress=progress)
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"metrics: {result.out_dir / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    ck = ckpt_io.load(args.ckpt)
    m = ck.config
    if args.data == "synthetic":
        (images, labels), names = _synthetic(m, args.synth_per_class, args.synth_seed, 0.15)
    else:
        (images, labels), names = _load_dataset(args.data, m, args.label_map, "test", args.normalization)
    if len(names) != m.num_classes:
        raise CliError("data", f"dataset has {len(names)} classes, checkpoint model predicts {m.num_classes}")
    res = evaluate(ck.build_model(), images, labels, names)
    out = Path(args.out or default_out_dir())
    csv_path = res.confusion.to_csv(out / "confusion.csv")
    svg_path = res.confusion.to_svg(out / "confusion.svg")
    cm = res.confusion
    # full repr so correct / total can be compared exactly
    print(f"samples {cm.total}  correct {cm.correct}  accuracy {cm.accuracy!r}  loss {res.loss:.6f}")
    for name, acc in zip(cm.class_names, cm.per_class_accuracy()):
        print(f"  {name:<16} {acc:.4f}")
    print(f"confusion matrix: {csv_path}")
    print(f"heatmap: {svg_path}")
    return 0


def cmd_infer(args) -> int:
    ck = ckpt_io.load(args.ckpt)
    m = ck.config
    raw = decode_image(args.image)
    image = preprocess(raw, m.image_size, grayscale=m.channels == 1, normalization=args.normalization)
    probs = ck.build_model().predict_proba(image.astype(m.dtype))[0]
    names = ck.meta.get("class_names") or [f"class_{i}" for i in range(m.num_classes)]
    order = np.argsort(-probs, kind="stable")
    print(f"prediction: {names[order[0]]}")
    for i in order:
        print(f"{names[i]:<16} {probs[i]:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    report = check_model_gradients(args.preset, eps=args.eps,
                                   max_entries=None if args.entries <= 0 else args.entries, seed=args.seed)
    print(report.format())
    if not report.passed(args.tol):
        raise CliError("check", f"max relative error {report.max_rel_error:.3e} exceeds {args.tol:g}")
    print(f"PASS (tolerance {args.tol:g})")
    return 0


def cmd_bench(args) -> int:
    lengths = [int(v) for v in args.lengths.split(",") if v.strip()]
    if not lengths:
        raise CliError("usage", "no sequence lengths given")
    rows = bench_mod.run_bench(lengths, reps=args.reps)
    print(f"{'form':<10} {'tokens':>7} {'seconds':>12} {'peak_bytes':>12} {'max_abs_dev':>12}")
    for r in rows:
        print(f"{r.form:<10} {r.tokens:7d} {r.seconds:12.6f} {r.peak_bytes:12d} {r.max_abs_dev:12.3e}")
    for n, n2, ratio in bench_mod.growth_ratios(rows):
        print(f"recurrent time ratio {n}->{n2}: {ratio:.3f}")
    path = bench_mod.write_csv(rows, Path(args.out or default_out_dir()) / "bench.csv")
    print(f"csv: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xlstm-fer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="INI run config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="model preset (overrides the config's)")
    p.add_argument("--out", help="output directory (default: $XLSTM_FER_OUT or runs/xlstm-fer)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="class-per-directory tree, path,label CSV, or 'synthetic'")
    p.add_argument("--label-map", help="ckplus, rafdb, ferplus or omitted (sorted class names)")
    p.add_argument("--normalization", default="none")
    p.add_argument("--synth-per-class", type=int, default=32)
    p.add_argument("--synth-seed", type=int, default=1007)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--normalization", default="none")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of a preset model")
    p.add_argument("--preset", default="desk-tiny", choices=sorted(PRESETS))
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--entries", type=int, default=8, help="coordinates probed per parameter (<=0: all)")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time recurrent vs parallel mLSTM forms")
    p.add_argument("--lengths", default=",".join(str(n) for n in bench_mod.DEFAULT_LENGTHS))
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        category, message = exc.category, str(exc)
    except ConfigError as exc:
        category, message = "config", str(exc)
    except DataError as exc:
        category, message = "data", str(exc)
    except ckpt_io.CheckpointError as exc:
        category, message = "checkpoint", str(exc)
    except NonFiniteLoss as exc:
        category, message = "numeric", str(exc)
    except (TrainingError, ValueError) as exc:
        category, message = "data", str(exc)
    print(f"error[{category}]: {' '.join(message.split())}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
