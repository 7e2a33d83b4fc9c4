"""``bnnx`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import modelio
from .errors import ArchError, BnnxError, FormatError, NumericError
from .layers import BatchNorm, BinaryConv2d, BinaryDense, Dense
from .model import Model, build_model
from .training import Dataset, History, TrainConfig, evaluate, fit
from .transfer import (
    ImageFolder,
    PreprocessConfig,
    extract_features,
    extractor_fingerprint,
    retrain_head,
    split_model,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CSV_COLUMNS = ["epoch", "train_loss", "train_top1", "val_top1", "val_top5"]

log = logging.getLogger("bnnx")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--lr", type=float, default=None, help="default: 1e-3 for adam, 1e-2 for sgd")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--no-clip", action="store_true", help="do not clip binary latent weights")


def _add_data_flags(p, prefix="train", required=True):
    g = p.add_argument_group(f"{prefix} data")
    g.add_argument(f"--{prefix}-images", help="IDX image file")
    g.add_argument(f"--{prefix}-labels", help="IDX label file")
    g.add_argument(f"--{prefix}-dir", help="directory of class subfolders holding .pgm/.ppm files")


def _add_subset_flags(p):
    p.add_argument("--classes", help="keep only these labels, e.g. '0-7' or '0,3,5'")
    p.add_argument("--subset", type=int, help="random subset of this many samples (drawn with --seed)")


def _add_preprocess_flags(p):
    p.add_argument("--resize", type=int, default=256, help="longest-side resize target for netpbm input")
    p.add_argument("--crop", type=int, default=224)
    p.add_argument("--shortest-side", action="store_true", help="resize the shortest side instead")


def _config(args) -> TrainConfig:
    try:
        return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                           optimizer=args.optimizer, lr=args.lr, momentum=args.momentum,
                           clip_binary_weights=not args.no_clip)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _preprocess(args) -> PreprocessConfig:
    try:
        return PreprocessConfig(resize_long=args.resize, crop=args.crop, shortest_side=args.shortest_side)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _parse_classes(text):
    keep = set()
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            keep.update(range(int(lo), int(hi) + 1))
        elif part:
            keep.add(int(part))
    return sorted(keep)


def _load_data(args, prefix="train", required=True, train_mode=False):
    """Returns a Dataset, or an ImageFolder when training from netpbm folders."""
    images = getattr(args, f"{prefix}_images", None)
    labels = getattr(args, f"{prefix}_labels", None)
    folder = getattr(args, f"{prefix}_dir", None)
    if folder:
        data = ImageFolder.load(folder, _preprocess(args))
        if not train_mode:
            data = data.dataset()
    elif images and labels:
        data = _wrap_path(modelio.load_idx_dataset, images, labels)
    elif images or labels:
        raise UsageError(f"--{prefix}-images and --{prefix}-labels go together")
    elif required:
        raise UsageError(f"no {prefix} data given (--{prefix}-images/--{prefix}-labels or --{prefix}-dir)")
    else:
        return None
    if isinstance(data, Dataset):
        data = _select(data, args)
    return data


def _select(data: Dataset, args) -> Dataset:
    if getattr(args, "classes", None):
        try:
            keep = _parse_classes(args.classes)
        except ValueError as exc:
            raise UsageError(f"bad --classes {args.classes!r}") from exc
        data = data.subset(np.isin(data.y, keep))
    subset = getattr(args, "subset", None)
    if subset:
        if subset > len(data):
            raise UsageError(f"--subset {subset} exceeds the {len(data)} available samples")
        idx = np.sort(np.random.default_rng(args.seed).choice(len(data), subset, replace=False))
        data = data.subset(idx)
    if len(data) == 0:
        raise BnnxError("dataset is empty after filtering")
    return data


def _wrap_path(fn, *paths):
    try:
        return fn(*paths)
    except (FormatError, BnnxError) as exc:
        raise type(exc)(f"{', '.join(map(str, paths))}: {exc}") from exc


def _check_outputs(force, *paths):
    for p in paths:
        if p is not None and Path(p).exists() and not force:
            raise UsageError(f"{p} exists; use --force to overwrite")


def _load_model(path) -> Model:
    return _wrap_path(modelio.load_model_file, path)


def _write_csv(path, records, force):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.train_top1),
                    "" if r.val_top1 is None else repr(r.val_top1),
                    "" if r.val_top5 is None else repr(r.val_top5)])
    modelio.write_bytes(path, buf.getvalue().encode(), force)


def _report(args, history, started, extra=None):
    final = history.final
    report = {
        "command": args.command,
        "final_top1": final.top1,
        "final_top5": final.top5,
        "final_loss": final.loss,
        "epochs": [asdict(r) for r in history.records],
        "wall_clock_s": round(time.perf_counter() - started, 3),
        "config": {k: v for k, v in vars(args).items() if k != "func"},
    }
    report.update(extra or {})
    print(f"top1 {final.top1:.4f}  top5 {final.top5:.4f}  loss {final.loss:.4f}")
    if getattr(args, "report", None):
        modelio.write_bytes(args.report, (json.dumps(report, indent=2, default=str) + "\n").encode(), args.force)
    return report


def _sample_shape(data):
    if isinstance(data, ImageFolder):
        return (data.images[0].shape[0], data.preprocess.crop, data.preprocess.crop)
    return data.x.shape[1:]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args):
    started = time.perf_counter()
    _check_outputs(args.force, args.output, args.log, args.report)
    config = _config(args)
    train = _load_data(args, "train", train_mode=True)
    val = _load_data(args, "val", required=False)
    labels = train.labels if isinstance(train, ImageFolder) else train.y
    num_classes = args.num_classes or int(labels.max()) + 1
    try:
        model = build_model(args.arch, _sample_shape(train), num_classes, seed=args.seed)
    except ArchError as exc:
        raise UsageError(str(exc)) from exc
    history = fit(model, train, config, val=val)
    modelio.save_model_file(model, args.output, force=args.force)
    if args.log:
        _write_csv(args.log, history.records, args.force)
    return _report(args, history, started, {"model": str(args.output)})


def cmd_finetune(args):
    started = time.perf_counter()
    _check_outputs(args.force, args.output, args.log, args.report)
    config = _config(args)
    model = _load_model(args.model)
    split = split_model(model, args.split)
    if args.features:
        cache = _wrap_path(lambda p: modelio.load_features(Path(p).read_bytes()), args.features)
    else:
        cache = extract_features(split, _load_data(args, "train"))
    cache.check(split)
    val = _load_data(args, "val", required=False)
    eval_cache = extract_features(split, val) if val is not None else None
    history = History()
    head, history.final = retrain_head(split, cache, args.head, config, num_classes=args.num_classes,
                                       eval_cache=eval_cache, on_epoch=history.records.append)
    if args.log:
        _write_csv(args.log, history.records, args.force)
    modelio.save_model_file(head, args.output, force=args.force)
    return _report(args, history, started, {"head": str(args.output), "fingerprint": cache.fingerprint})


def cmd_features(args):
    _check_outputs(args.force, args.output)
    model = _load_model(args.model)
    split = split_model(model, args.split)
    data = _load_data(args, "train")
    cache = extract_features(split, data)
    modelio.write_bytes(args.output, modelio.save_features(cache), args.force)
    print(f"{len(cache.labels)} x {cache.features.shape[1]} features, extractor {cache.fingerprint}")
    return {"fingerprint": cache.fingerprint}


def cmd_export(args):
    _check_outputs(args.force, args.output + ".bnnx", args.output + ".manifest")
    model = _load_model(args.model)
    split = split_model(model, args.split)
    if args.head:
        split.head = _load_model(args.head).layers
    input_shape = tuple(int(s) for s in args.input_shape.replace("x", ",").split(",")) if args.input_shape else None
    bundle = modelio.export_extractor(split, fold_shifts=args.fold_shifts, input_shape=input_shape)
    if args.head:
        bundle.manifest["head"] = Path(args.head).name
        bundle.manifest["head_fingerprint"] = modelio.fingerprint(Path(args.head).read_bytes())
    blob_path, man_path = modelio.save_bundle(bundle, args.output, force=args.force)
    print(f"wrote {blob_path} ({len(bundle.blob)} bytes) and {man_path}")
    return bundle.manifest


def _bundle_model(manifest_path, head_path=None):
    bundle = _wrap_path(modelio.load_bundle, manifest_path)
    extractor = bundle.extractor()
    head_name = head_path or bundle.manifest.get("head")
    if head_name is None:
        raise UsageError("bundle evaluation needs a head (--head or a manifest 'head' entry)")
    head_file = Path(head_name) if head_path else Path(manifest_path).parent / head_name
    if not head_path and "head_fingerprint" in bundle.manifest:
        if modelio.fingerprint(head_file.read_bytes()) != bundle.manifest["head_fingerprint"]:
            raise modelio.FingerprintMismatchError(f"{head_file} does not match the manifest")
    return Model(extractor.layers + _load_model(head_file).layers)


def cmd_evaluate(args):
    data = _load_data(args, "train" if args.train_images or args.train_dir else "val")
    if args.bundle:
        model = _bundle_model(args.bundle, args.head)
    else:
        if not args.model:
            raise UsageError("evaluate needs --model or --bundle")
        model = _load_model(args.model)
        if args.head:
            split = split_model(model, args.split)
            model = Model(split.extractor + _load_model(args.head).layers)
    if args.shift:
        model.set_shift_mode(True)
    m = evaluate(model, data)
    print(f"top1 {m.top1:.4f}  top5 {m.top5:.4f}  loss {m.loss:.4f}")
    return m.as_dict()


def _param_bytes(layer):
    if isinstance(layer, (BinaryDense, BinaryConv2d)):
        bits = layer.weight.size
        return bits, (bits + 7) // 8, 4 * layer.weight.size
    if isinstance(layer, Dense):
        n = layer.weight.size + layer.bias.size
        return n, 4 * n, 4 * n
    if isinstance(layer, BatchNorm):
        n = 4 * layer.channels
        return n, 4 * n, 4 * n
    return 0, 0, 0


def cmd_inspect(args):
    blob = Path(args.path).read_bytes()
    model = _wrap_path(modelio.load_model, blob)
    print(f"{args.path}: {len(blob)} bytes, {len(model)} layers, fingerprint {extractor_fingerprint(model)}")
    shape = tuple(int(s) for s in args.input_shape.replace("x", ",").split(",")) if args.input_shape else None
    rows = []
    total_bin = total_float = 0
    for i, layer in enumerate(model.layers):
        if shape is not None:
            shape = tuple(layer.output_shape(shape))
        count, packed, as_float = _param_bytes(layer)
        binary = isinstance(layer, (BinaryDense, BinaryConv2d))
        total_bin += packed if binary else 0
        total_float += as_float
        rows.append({"index": i, "layer": layer.describe(), "params": count,
                     "bytes": packed, "binary": binary, "output_shape": shape})
        out = f"{i:3d}  {layer.describe():45s} params={count:<9d} bytes={packed}"
        if shape is not None:
            out += f"  -> {'x'.join(map(str, shape))}"
        print(out)
    print(f"binary weight bytes {total_bin}; float32 equivalent of all parameters {total_float}")
    return {"layers": rows, "binary_bytes": total_bin, "float_bytes": total_float}


def cmd_synth(args):
    from .synthetic import make_digits

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = ["train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx"]
    _check_outputs(args.force, *(out / n for n in names))
    arrays = make_digits(args.train, args.test, seed=args.seed)
    for name, arr in zip(names, arrays):
        modelio.write_bytes(out / name, modelio.write_idx(arr), args.force)
    print(f"wrote {args.train} train / {args.test} test images to {out}")
    return {"dir": str(out)}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="bnnx", description="Binary neural networks with frozen-extractor transfer learning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    q = sub.add_parser("pretrain", help="train a binary network from scratch")
    q.add_argument("--arch", required=True, help="preset (mlp, convnet, alexnet) or layer list")
    q.add_argument("--num-classes", type=int)
    _add_data_flags(q, "train")
    _add_data_flags(q, "val")
    _add_subset_flags(q)
    _add_preprocess_flags(q)
    _add_train_flags(q)
    q.add_argument("-o", "--output", required=True, help="model file (.bnnx)")
    q.add_argument("--log", help="per-epoch CSV log")
    q.add_argument("--report", help="JSON run report")
    q.add_argument("--force", action="store_true")
    q.set_defaults(func=cmd_pretrain)

    q = sub.add_parser("finetune", help="retrain the head on a frozen extractor")
    q.add_argument("--model", required=True)
    q.add_argument("--split", type=int, default=None, help="layer index of the cut (default: last layer)")
    q.add_argument("--head", choices=["binary", "float"], default="float")
    q.add_argument("--num-classes", type=int)
    q.add_argument("--features", help="feature cache from 'bnnx features' (instead of train data)")
    _add_data_flags(q, "train")
    _add_data_flags(q, "val")
    _add_subset_flags(q)
    _add_preprocess_flags(q)
    _add_train_flags(q)
    q.add_argument("-o", "--output", required=True, help="head model file (.bnnx)")
    q.add_argument("--log")
    q.add_argument("--report")
    q.add_argument("--force", action="store_true")
    q.set_defaults(func=cmd_finetune)

    q = sub.add_parser("evaluate", help="top-1/top-5 of a model, model+head or bundle+head")
    q.add_argument("--model")
    q.add_argument("--split", type=int, default=None)
    q.add_argument("--head")
    q.add_argument("--bundle", help="extractor bundle manifest")
    q.add_argument("--shift", action="store_true", help="use folded shift-mode batch norm")
    q.add_argument("--seed", type=int, default=0)
    _add_data_flags(q, "train")
    _add_data_flags(q, "val")
    _add_subset_flags(q)
    _add_preprocess_flags(q)
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("features", help="cache frozen-extractor features")
    q.add_argument("--model", required=True)
    q.add_argument("--split", type=int, default=None)
    q.add_argument("--seed", type=int, default=0)
    _add_data_flags(q, "train")
    _add_subset_flags(q)
    _add_preprocess_flags(q)
    q.add_argument("-o", "--output", required=True)
    q.add_argument("--force", action="store_true")
    q.set_defaults(func=cmd_features)

    q = sub.add_parser("export", help="write an extractor bundle (.bnnx blob + .manifest)")
    q.add_argument("--model", required=True)
    q.add_argument("--split", type=int, default=None)
    q.add_argument("--head", help="head model to reference from the manifest")
    q.add_argument("--fold-shifts", action="store_true")
    q.add_argument("--input-shape", help="e.g. 1,28,28")
    q.add_argument("-o", "--output", required=True, help="output prefix")
    q.add_argument("--force", action="store_true")
    q.set_defaults(func=cmd_export)

    q = sub.add_parser("inspect", help="summarize a model file")
    q.add_argument("path")
    q.add_argument("--input-shape")
    q.set_defaults(func=cmd_inspect)

    q = sub.add_parser("synth", help="write the synthetic 28x28 digit dataset as IDX files")
    q.add_argument("--out-dir", required=True)
    q.add_argument("--train", type=int, default=6000)
    q.add_argument("--test", type=int, default=2000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--force", action="store_true")
    q.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"bnnx {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"bnnx {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BnnxError, OSError, IndexError) as exc:
        print(f"bnnx {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
