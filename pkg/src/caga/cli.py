"""Command-line entry point: ``caga <subcommand> [options]``.

Exit codes: 0 success, 1 failed check or metric, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .attention import caga_param_count, format_kv, parse_kv
from .dataio import (Dataset, NormStats, apply_zscore, load_image_tree, read_ppm, resize_bilinear,
                     synth_dataset, write_image_tree)
from .errors import ConfigError, ContractError, DatasetError, ShapeError
from .interpret import count_macs, count_params, grad_cam, heatmap_files, parameter_reduction
from .layers import DEFAULT_SEED, Conv2d, ConvSpec, load_checkpoint, save_checkpoint
from .model import CagaClassifier, ModelConfig, model_config_from_kv, model_config_to_kv, predict
from .selftest import format_results, run_selftest
from .training import (FocalLossConfig, TrainConfig, evaluate, format_ablation_csv, format_folds_csv,
                       format_summary_csv, format_table, kfold_split, predict_logits, run_ablation, run_cv, run_fold,
                       train_config_from_kv, train_config_to_kv)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def version_string() -> str:
    """``git describe`` output when run from a checkout, else the package version."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass(frozen=True)
class RunManifest:
    command: str
    config: dict
    seed: int
    started: str
    outputs: list[str] = field(default_factory=list)
    version: str = ""

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
        return path


def finish_manifest(out_dir: str) -> None:
    """Record completion next to the (immutable) manifest."""
    with open(os.path.join(out_dir, "finished.json"), "w") as fh:
        json.dump({"finished": _now()}, fh)


# ---------------------------------------------------------------------------
# Configuration resolution
# ---------------------------------------------------------------------------

@dataclass
class Resolved:
    model: ModelConfig
    train: TrainConfig
    focal: FocalLossConfig
    k: int


def _flag_values(args) -> dict[str, str]:
    """CLI flags that override config-file keys."""
    mapping = {
        "lr": "lr", "epochs": "max_epochs", "batch_size": "batch_size", "patience": "patience",
        "image_size": "image_size", "dilations": "dilations", "num_heads": "num_heads",
        "gamma": "focal_gamma",
    }
    values = {}
    for attr, key in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = str(v)
    return values


def resolve_config(args, num_classes: int | None = None, image_size: int | None = None) -> Resolved:
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                values.update(parse_kv(fh.read()))
        except OSError as exc:
            raise _IOFailure(f"{args.config}: {exc.strerror}") from exc
    values.update(_flag_values(args))
    if num_classes is not None:
        values["num_classes"] = str(num_classes)
    if image_size is not None:
        values["image_size"] = str(image_size)
    model = model_config_from_kv(values)
    train, focal = train_config_from_kv(values, TrainConfig(seed=args.seed))
    k = int(getattr(args, "folds", None) or values.get("folds", 10))
    return Resolved(model, train, focal, k)


def config_snapshot(res: Resolved) -> dict:
    snap = {k: v for k, v in model_config_to_kv(res.model).items()}
    snap.update(train_config_to_kv(res.train, res.focal))
    snap["folds"] = res.k
    snap["seed"] = res.train.seed
    return {k: format_kv({k: v}).split("=", 1)[1].strip() for k, v in snap.items()}


class _IOFailure(Exception):
    pass


def load_data(args) -> Dataset:
    if args.data == "synth":
        return synth_dataset(args.classes, args.per_class, args.size, args.seed)
    try:
        return load_image_tree(args.data, args.size)
    except OSError as exc:
        raise _IOFailure(str(exc)) from exc


def _out(args, *parts: str) -> str:
    path = os.path.join(args.out, *parts)
    os.makedirs(os.path.dirname(path) if parts else path, exist_ok=True)
    return path


def _write_text(path: str, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def save_run_checkpoint(model: CagaClassifier, stats: NormStats, directory: str) -> None:
    save_checkpoint(model, directory)
    _write_text(os.path.join(directory, "config.txt"), format_kv(model_config_to_kv(model.cfg)))
    _write_text(os.path.join(directory, "norm.txt"), stats.to_kv())


def load_run_checkpoint(directory: str, seed: int = DEFAULT_SEED) -> tuple[CagaClassifier, NormStats]:
    try:
        with open(os.path.join(directory, "config.txt")) as fh:
            cfg = model_config_from_kv(parse_kv(fh.read()))
        with open(os.path.join(directory, "norm.txt")) as fh:
            stats = NormStats.from_kv(fh.read())
        model = CagaClassifier(cfg, seed=seed)
        load_checkpoint(model, directory)
    except OSError as exc:
        raise _IOFailure(f"cannot read checkpoint {directory}: {exc}") from exc
    model.eval()
    return model, stats


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_selftest(args) -> int:
    results = run_selftest()
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_synth(args) -> int:
    ds = synth_dataset(args.classes, args.per_class, args.size, args.seed)
    root = _out(args, "synth")
    paths = write_image_tree(ds, root)
    print(f"wrote {len(paths)} images in {ds.num_classes} classes to {root}")
    return EXIT_OK


def _start(args, command: str, res: Resolved) -> None:
    os.makedirs(args.out, exist_ok=True)
    RunManifest(command, config_snapshot(res), args.seed, _now(), [args.out], version_string()).write(args.out)


def cmd_train(args) -> int:
    ds = load_data(args)
    res = resolve_config(args, ds.num_classes, ds.images.shape[-1])
    _start(args, "train", res)
    if not 0 <= args.fold < res.k:
        raise ConfigError(f"--fold must lie in [0, {res.k})")
    split = kfold_split(len(ds), res.k, args.seed, ds.labels)[args.fold]
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    result = run_fold(ds, split, args.fold, res.model, res.train, res.focal, log=log)
    save_run_checkpoint(result.model, result.stats, os.path.join(args.out, "checkpoint"))
    report = result.test.as_dict(ds.class_names)
    _write_text(_out(args, "metrics.csv"),
                "metric,value\n" + "".join(f"{k},{v:.6f}\n" for k, v in report.items()))
    print(f"train accuracy {result.train_accuracy:.4f}  test accuracy {result.test.accuracy:.4f}  "
          f"best epoch {result.history.best_epoch}")
    finish_manifest(args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, stats = load_run_checkpoint(args.checkpoint, args.seed)
    ds = load_data(args)
    if args.split == "test":
        k = args.folds or 10
        ds = ds.subset(kfold_split(len(ds), k, args.seed, ds.labels)[args.fold].test, "test")
    report = evaluate(model, apply_zscore(ds, stats))
    rows = report.as_dict(ds.class_names)
    text = "metric,value\n" + "".join(f"{k},{v:.6f}\n" for k, v in rows.items())
    _write_text(_out(args, "eval.csv"), text)
    print(text, end="")
    if args.min_accuracy is not None and report.accuracy < args.min_accuracy:
        print(f"accuracy {report.accuracy:.4f} below required {args.min_accuracy}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _fold_subset(args, k: int) -> list[int] | None:
    if args.max_folds is None:
        return None
    return list(range(min(args.max_folds, k)))


def cmd_cv(args) -> int:
    ds = load_data(args)
    res = resolve_config(args, ds.num_classes, ds.images.shape[-1])
    if res.k < 2:
        raise ConfigError(f"--folds must be at least 2, got {res.k}")
    _start(args, "cv", res)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    result = run_cv(ds, res.model, res.train, res.k, res.focal, _fold_subset(args, res.k), args.jobs, log)
    for fold in result.folds:
        save_run_checkpoint(fold.model, fold.stats, os.path.join(args.out, "checkpoints", f"fold{fold.fold}"))
    _write_text(_out(args, "folds.csv"), format_folds_csv(result.summary, ds.class_names))
    _write_text(_out(args, "summary.csv"), format_summary_csv(result.summary))
    print(format_table(result.summary))
    finish_manifest(args.out)
    if args.min_accuracy is not None and result.mean_test_accuracy < args.min_accuracy:
        return EXIT_FAIL
    return EXIT_OK


def cmd_ablate(args) -> int:
    ds = load_data(args)
    res = resolve_config(args, ds.num_classes, ds.images.shape[-1])
    if res.k < 2:
        raise ConfigError(f"--folds must be at least 2, got {res.k}")
    _start(args, "ablate", res)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    rows = run_ablation(ds, res.model, res.train, res.k, focal=res.focal, folds=_fold_subset(args, res.k),
                        jobs=args.jobs, log=log)
    text = format_ablation_csv(rows)
    _write_text(_out(args, "ablation.csv"), text)
    print(text, end="")
    finish_manifest(args.out)
    return EXIT_OK


def cmd_gradcam(args) -> int:
    model, stats = load_run_checkpoint(args.checkpoint, args.seed)
    size = model.cfg.image_size
    if args.image:
        try:
            raw = read_ppm(args.image)
        except OSError as exc:
            raise _IOFailure(f"{args.image}: {exc.strerror}") from exc
        raw = resize_bilinear(raw, (size, size))
    else:
        ds = synth_dataset(model.cfg.num_classes, args.per_class, size, args.seed)
        raw = ds.images[args.index]
    norm = apply_zscore(Dataset(raw[None], np.zeros(1, dtype=np.int64), ["_"]), stats).images[0]
    target = args.target
    if target is None:
        target = int(predict(predict_logits(model, norm[None]))[0])
    try:
        result = grad_cam(model, norm, target, args.layer)
    except LookupError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    pgm, ppm = heatmap_files(raw, result)
    with open(_out(args, "heatmap.pgm"), "wb") as fh:
        fh.write(pgm)
    with open(_out(args, "overlay.ppm"), "wb") as fh:
        fh.write(ppm)
    print(f"class {target} layer {result.layer}: wrote heatmap.pgm and overlay.ppm to {args.out}")
    return EXIT_OK


def cmd_profile(args) -> int:
    res = resolve_config(args)
    model = CagaClassifier(res.model, seed=args.seed)
    shape = (res.model.in_channels, res.model.image_size, res.model.image_size)
    report = count_macs(model, shape)
    text = report.to_csv(double=args.flops)
    _write_text(_out(args, "profile.csv"), text)
    print(text, end="")
    without = CagaClassifier(replace(res.model, use_caga=False), seed=args.seed).num_parameters()
    delta = report.total_params - without
    print(f"CAGA block parameters: {delta} (model {report.total_params} vs {without} without CAGA; "
          f"closed form {caga_param_count(res.model.caga, res.model.stem_channels) * res.model.num_caga_blocks})")
    if args.dense_baseline:
        c_in = args.dense_baseline
        dense = Conv2d(ConvSpec(c_in, res.model.caga.channels, 3, bias=True), np.random.default_rng(0))
        dense_params = count_params(dense).total_params
        block_params = caga_param_count(res.model.caga, c_in)
        print(f"dense 3x3 conv {c_in}->{res.model.caga.channels}: {dense_params} params; "
              f"DSConv+CAGA: {block_params}; reduction {parameter_reduction(dense_params, block_params):.4%}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help="global random seed (default 82)")
    common.add_argument("--out", default="out", help="directory for every output file")
    common.add_argument("--config", help="key=value config file; flags override its values")
    common.add_argument("--jobs", type=_positive, default=1, help="parallel folds")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", default="synth", help="'synth' or a class-per-directory PPM tree")
    data.add_argument("--classes", type=_positive, default=4, help="synthetic classes")
    data.add_argument("--per-class", type=_positive, default=100, help="synthetic samples per class")
    data.add_argument("--size", type=_positive, default=32, help="image side length")

    hyper = argparse.ArgumentParser(add_help=False)
    hyper.add_argument("--folds", type=int, help="k for k-fold cross-validation (default 10)")
    hyper.add_argument("--lr", type=float)
    hyper.add_argument("--epochs", type=_positive)
    hyper.add_argument("--batch-size", type=_positive)
    hyper.add_argument("--patience", type=_positive)
    hyper.add_argument("--gamma", type=float, help="focal loss gamma")
    hyper.add_argument("--image-size", type=_positive)
    hyper.add_argument("--dilations", help="comma-separated dilation rates")
    hyper.add_argument("--num-heads", type=_positive)

    parser = argparse.ArgumentParser(prog="caga", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"caga {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("selftest", parents=[common], help="gradient, oracle and shape checks")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("synth", parents=[common, data], help="write the synthetic dataset as PPM files")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, data, hyper], help="train and test on one fold")
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--folds", type=int)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--min-accuracy", type=float)
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("cv", cmd_cv, "k-fold cross-validation"),
                              ("ablate", cmd_ablate, "cascade toggle ablation grid")):
        p = sub.add_parser(name, parents=[common, data, hyper], help=help_)
        p.add_argument("--max-folds", type=_positive, help="train only the first N folds")
        if name == "cv":
            p.add_argument("--min-accuracy", type=float, help="exit 1 when mean test accuracy is lower")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcam", parents=[common], help="Grad-CAM heatmap for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="PPM image; default is a synthetic sample")
    p.add_argument("--index", type=int, default=0, help="synthetic sample index")
    p.add_argument("--per-class", type=_positive, default=100)
    p.add_argument("--target", type=int, help="class to explain (default: predicted)")
    p.add_argument("--layer", default="caga0")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("profile", parents=[common, hyper], help="parameter and MAC counts")
    p.add_argument("--flops", action="store_true", help="report 2 FLOPs per MAC")
    p.add_argument("--dense-baseline", type=_positive, metavar="C_IN",
                   help="compare against a dense 3x3 conv from C_IN channels")
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except _IOFailure as exc:
        print(f"caga: {exc}", file=sys.stderr)
        return EXIT_IO
    except DatasetError as exc:
        print(f"caga: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"caga: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"caga: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
