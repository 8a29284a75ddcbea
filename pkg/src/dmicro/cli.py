"""Command-line interface: ``dmicro {data,train,eval,gradcheck,patterns}``.

Exit codes: 0 success, 2 usage or I/O error, 3 numeric divergence, 4 format
mismatch. ``DMICRO_OUTPUT_ROOT`` sets the directory under which runs go when
no output directory is given.
"""

from __future__ import annotations

import argparse
import os
import sys
import urllib.request
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .tensor.io import FormatError

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_FORMAT = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "DMICRO_OUTPUT_ROOT"
MNIST_URL = "https://storage.googleapis.com/cvdf-datasets/mnist/"


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# -- data -----------------------------------------------------------------------

def cmd_data(args) -> int:
    from .data import build_patchmnist_preset, find_mnist, manifest_digest, save_dataset

    if args.action == "fetch-mnist":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for stem in ("train-images-idx3-ubyte", "t10k-images-idx3-ubyte"):
            urllib.request.urlretrieve(args.url + stem + ".gz", out / f"{stem}.gz")
            print(f"fetched {stem}.gz")
        return EXIT_OK
    for pool in ("train", "test"):
        find_mnist(args.mnist, pool)
    out = Path(args.out) if args.out else output_root() / f"patchmnist-{args.preset}-seed{args.seed}"
    datasets = build_patchmnist_preset(args.mnist, args.preset, args.seed)
    save_dataset(out, datasets, args.seed)
    counts = "/".join(str(len(datasets[s])) for s in ("train", "val", "test"))
    print(f"wrote {counts} train/val/test patches to {out}")
    print(f"manifest sha256 {manifest_digest(out)}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------

def _overrides(args) -> dict:
    return {f.name: getattr(args, f"cfg_{f.name}") for f in fields(ExperimentConfig)
            if getattr(args, f"cfg_{f.name}", None) is not None}


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None and not Path(args.config).exists():
        raise FileNotFoundError(f"config file {args.config} not found")
    cfg = load_config(args.config, _overrides(args))
    if not cfg.out:
        cfg = cfg.replace(out=str(output_root() / f"{cfg.task}-{cfg.scheme}-T{cfg.T}-n{cfg.n}-seed{cfg.seed}"))
    return cfg


def _progress(row) -> None:
    print(f"epoch {row['epoch']:>5} {row['phase']:>7} m={row['m']:<3} train_l1={row['train_l1']:.5f} "
          f"val_l1={row['val_l1']:.5f} val_mse={row['val_mse']:.5f} val_ssim={row['val_ssim']:.4f}", flush=True)


def cmd_train(args) -> int:
    from .data import load_dataset, segmentation_split
    from .trainer import train_content, train_segmentation, write_effective_config

    cfg = resolve_config(args)
    if not cfg.dataset:
        raise UsageError("no dataset given (config key 'dataset' or --dataset)")
    data = load_dataset(cfg.dataset)
    for split in ("train", "val"):
        if split not in data:
            raise UsageError(f"dataset {cfg.dataset} has no {split} split")
    out = Path(cfg.out)
    write_effective_config(cfg, out)
    print(cfg.dumps(), end="")
    progress = None if args.quiet else _progress
    if cfg.task == "segmentation":
        seg = {s: segmentation_split(d, cfg.seg_threshold, cfg.seg_close) for s, d in data.items()}
        paths = train_segmentation(cfg, seg, out, stage=args.stage, progress=progress)
        print(f"checkpoints: {', '.join(str(p) for p in paths.values() if p.exists())}")
    else:
        res = train_content(cfg, data, out, progress=progress)
        print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


# -- eval -----------------------------------------------------------------------

def _export(out: Path, res, images: np.ndarray, patterns: np.ndarray, count: int, with_patterns: bool) -> None:
    from .optics import write_pgm16

    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i in range(min(count, len(images))):
        write_pgm16(img_dir / f"{i:04d}_input.pgm", images[i])
        write_pgm16(img_dir / f"{i:04d}_recon.pgm", res.recon[i])
        for t, det in enumerate(res.readings[i]):
            write_pgm16(img_dir / f"{i:04d}_detect_t{t:02d}.pgm", det, normalize=True)
        if res.seg is not None:
            write_pgm16(img_dir / f"{i:04d}_seg.pgm", res.seg[i])
    if with_patterns:
        export_patterns(patterns, out / "patterns")


def export_patterns(patterns: np.ndarray, directory: Path) -> list[Path]:
    from .optics import write_pgm16

    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, H in enumerate(patterns):
        p = directory / f"pattern_{t:02d}.pgm"
        write_pgm16(p, H)
        paths.append(p)
    return paths


def cmd_eval(args) -> int:
    from .data import load_dataset, make_pseudo_gt
    from .metrics import MetricReport
    from .trainer import binarize, evaluate, load_checkpoint

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    model, meta = load_checkpoint(ckpt)
    cfg = model.cfg
    data = load_dataset(args.data)
    if args.split not in data:
        raise UsageError(f"dataset has no {args.split} split")
    images = data[args.split].items
    seed = args.noise_seed if args.noise_seed is not None else cfg.eval_noise_seed
    res = evaluate(model, images, seed, cfg.batch, with_seg=model.head is not None)
    report = MetricReport(n=cfg.n, T=cfg.T)
    gt = make_pseudo_gt(images, cfg.seg_threshold, (cfg.seg_close, cfg.seg_close)) if res.seg is not None else None
    for i in range(len(images)):
        if gt is not None:
            report.add(res.recon[i], images[i], binarize(res.seg[i]), gt[i])
        else:
            report.add(res.recon[i], images[i])
    out = Path(args.out) if args.out else ckpt.parent / f"eval-{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    print(report.table())
    print(f"  l1: {res.l1:.6f}")
    _export(out, res, images, model.pattern_array(), args.export_images, args.export_patterns)
    print(f"wrote {out / 'metrics.csv'}")
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    names = [n.strip() for n in args.ops.split(",")] if args.ops else None
    try:
        results = run_suite(names, seed=args.seed, tol=args.tol)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    for r in results:
        print(f"{r.name:<18} max_rel_err={r.max_rel_err:.3e} tol={r.tol:.0e} coords={r.coords:<5} "
              f"{'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_OK if not failed else 1


# -- patterns -------------------------------------------------------------------

def cmd_patterns(args) -> int:
    from .baselines import baseline_patterns
    from .optics import binarization_gap
    from .trainer import load_checkpoint

    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
        model, _ = load_checkpoint(args.checkpoint)
        H = model.pattern_array()
        default_out = Path(args.checkpoint).parent / "patterns"
    else:
        if args.scheme is None:
            raise UsageError("give --checkpoint or --scheme")
        H = baseline_patterns(args.scheme, args.T, args.P, seed=args.seed)
        default_out = output_root() / f"patterns-{args.scheme}-T{args.T}-P{args.P}"
    out = Path(args.out) if args.out else default_out
    paths = export_patterns(H, out)
    frac = float(np.mean(binarization_gap(H) < 0.1))
    print(f"wrote {len(paths)} patterns to {out}; fraction within 0.1 of binary: {frac:.4f}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("config overrides (one flag per config key)")
    for f in fields(ExperimentConfig):
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append(f"--{f.name.replace('_', '-')}")
        group.add_argument(*flags, dest=f"cfg_{f.name}", metavar="VALUE", default=None,
                           help=f"default: {f.default if not isinstance(f.default, tuple) else ','.join(map(str, f.default))}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dmicro", description="Learned-illumination compressive microscopy.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data", help="build datasets")
    p.add_argument("action", choices=("build-patchmnist", "fetch-mnist"))
    p.add_argument("--mnist", help="directory with MNIST IDX image files")
    p.add_argument("--out")
    p.add_argument("--preset", default="desk", choices=("desk", "paper"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--url", default=MNIST_URL, help="base URL for fetch-mnist")
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), help="segmentation: run one stage only")
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out")
    p.add_argument("--noise-seed", type=int)
    p.add_argument("--export-images", type=int, default=4, metavar="N")
    p.add_argument("--export-patterns", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--ops", help="comma-separated subset of checks")
    p.add_argument("--tol", type=float, help="override every tolerance")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("patterns", help="export illumination patterns as PGM")
    p.add_argument("--checkpoint")
    p.add_argument("--scheme", choices=("uniform", "random", "hadamard"))
    p.add_argument("--T", type=int, default=8)
    p.add_argument("--P", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_patterns)
    return ap


def main(argv=None) -> int:
    from .trainer import DivergenceError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command == "data" and args.action == "build-patchmnist" and not args.mnist:
        print("error: --mnist is required for build-patchmnist", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
