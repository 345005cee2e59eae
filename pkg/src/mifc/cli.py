"""Command-line interface: synth, preprocess, split, train, eval, predict,
compare.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 invalid data,
4 numeric failure. Errors print one ``error: <kind>: <reason>`` line to
stderr. Every run is a pure function of its inputs plus the declared seeds.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .blocks import build_model, model_forward
from .checkpoint import model_from_checkpoint, write_checkpoint
from .dataset import (
    LABEL_NAMES,
    DatasetManifest,
    SampleRecord,
    SyntheticParams,
    generate_synthetic,
    normalize_to_tensor,
    read_manifest,
    resize_bilinear,
    scan_dataset,
    split_manifest,
    write_manifest,
)
from .errors import (
    DataInvalidError,
    FormatError,
    InvalidArgumentError,
    InvalidStateError,
    MifcError,
    NumericFailure,
)
from .pnm import read_image, write_image
from .prng import SplitMix64
from .silhouette import SilhouetteParams, extract_silhouette
from .tensor import Tensor
from .training import TrainConfig, compare_report, evaluate, render_comparison, train

CONFIG_KEYS = {
    "profile", "lr", "batch_size", "epochs", "image_size", "seed",
    "backbone", "arch", "precision",
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def resolve_config(doc: dict) -> TrainConfig:
    """CliConfig JSON -> TrainConfig; explicit keys override profile defaults."""
    if not isinstance(doc, dict):
        raise InvalidArgumentError("config must be a JSON object")
    unknown = sorted(set(doc) - CONFIG_KEYS)
    if unknown:
        raise InvalidArgumentError(f"unknown config keys: {unknown}")
    profile = doc.get("profile", "desk")
    if profile == "desk":
        cfg = TrainConfig.desk()
    elif profile == "paper":
        cfg = TrainConfig.paper()
    else:
        raise InvalidArgumentError(f"profile must be desk|paper, got {profile!r}")
    return TrainConfig(
        profile=profile,
        lr=float(doc.get("lr", cfg.lr)),
        batch_size=int(doc.get("batch_size", cfg.batch_size)),
        epochs=int(doc.get("epochs", cfg.epochs)),
        image_size=int(doc.get("image_size", cfg.image_size)),
        seed=int(doc.get("seed", cfg.seed)),
        backbone=str(doc.get("backbone", cfg.backbone)),
        arch=str(doc.get("arch", cfg.arch)),
        precision=str(doc.get("precision", cfg.precision)),
    )


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _cmd_synth(args) -> None:
    params = SyntheticParams(
        image_size=args.size,
        per_class=args.per_class,
        defect_contrast=args.defect_contrast,
        corrupted_fraction=args.corrupt_frac,
    )
    manifest = generate_synthetic(params, args.seed, args.out)
    print(f"wrote {len(manifest.records)} images under {args.out}")


def _cmd_preprocess(args) -> None:
    src = scan_dataset(getattr(args, "in"))
    out_dir = os.path.abspath(args.out)
    sil_params = SilhouetteParams()
    records, reports = [], []
    for rec in src.records:
        rgb_abs = src.resolve(rec.rgb)
        image = read_image(rgb_abs)
        silhouette, _, report = extract_silhouette(image, sil_params)
        entry = {"rgb": rec.rgb, "label": rec.label, **report.to_dict()}
        reports.append(entry)
        if not report.accepted:
            continue
        cls = LABEL_NAMES[rec.label]
        os.makedirs(os.path.join(out_dir, cls), exist_ok=True)
        stem = os.path.splitext(os.path.basename(rec.rgb))[0]
        sil_rel = os.path.join(cls, stem + ".pgm")
        write_image(os.path.join(out_dir, sil_rel), silhouette)
        records.append(
            SampleRecord(
                os.path.relpath(rgb_abs, out_dir), sil_rel, rec.label, rec.split, rec.fruit
            )
        )
    manifest = DatasetManifest(
        records,
        {"source": src.provenance.get("source", ""), "silhouettes": out_dir},
        out_dir,
    )
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(manifest, os.path.join(out_dir, "manifest.jsonl"))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            for entry in reports:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    rejected = len(src.records) - len(records)
    print(
        f"accepted {len(records)}/{len(src.records)} images "
        f"({rejected} rejected); manifest at {os.path.join(out_dir, 'manifest.jsonl')}"
    )


def _cmd_split(args) -> None:
    ratios = tuple(float(x) for x in args.ratios.split(","))
    manifest = read_manifest(args.manifest)
    manifest = split_manifest(manifest, ratios, args.seed)
    write_manifest(manifest, args.manifest)
    counts = {s: len(manifest.split_records(s)) for s in ("train", "val", "test")}
    print(f"split {args.manifest}: {counts}")


def _cmd_train(args) -> None:
    with open(args.config, "r", encoding="utf-8") as fh:
        cfg = resolve_config(json.load(fh))
    manifest = read_manifest(args.manifest)
    model = build_model(cfg.arch, cfg.backbone, cfg.image_size,
                        hidden=cfg.hidden, prng=SplitMix64(cfg.seed), dtype=cfg.precision)
    def report(log):
        print(
            f"epoch {log.epoch}/{cfg.epochs}: train_loss {log.train_loss:.4f} "
            f"train_acc {log.train_acc:.4f} val_acc {log.val_acc:.4f}"
        )
    ckpt, logs = train(model, manifest, cfg, on_epoch=report)
    write_checkpoint(ckpt.tensors, ckpt.metadata, args.out)
    if args.logs:
        with open(args.logs, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"config": cfg.to_dict()}, sort_keys=True) + "\n")
            for log in logs:
                fh.write(json.dumps(log.to_dict(), sort_keys=True) + "\n")
    best = ckpt.metadata["epoch"]
    print(f"best epoch {best} (val_acc {ckpt.metadata['val_accuracy']:.4f}) -> {args.out}")


def _cmd_eval(args) -> None:
    model, metadata = model_from_checkpoint(args.ckpt)
    manifest = read_manifest(args.manifest)
    cm, metrics = evaluate(model, manifest, args.split)
    result = {
        "arch": model.arch,
        "backbone": model.backbone,
        "split": args.split,
        "n": int(cm.sum()),
        "confusion": cm.tolist(),
        "config": metadata.get("config", {}),
        **metrics.to_dict(),
    }
    print(
        f"{model.arch}/{model.backbone} on {args.split}: "
        f"accuracy {metrics.accuracy:.4f} precision {metrics.precision:.4f} "
        f"recall {metrics.recall:.4f} f1 {metrics.f1:.4f} (n={result['n']})"
    )
    if args.json:
        _write_json(args.json, result)


def _cmd_predict(args) -> None:
    model, metadata = model_from_checkpoint(args.ckpt)
    size = model.image_hw
    rgb = read_image(args.rgb)
    if rgb.ndim != 3:
        raise DataInvalidError(f"{args.rgb} is not an RGB (P6) image")
    dtype = "f32" if model.dtype == np.float32 else "f64"
    rgb_t = normalize_to_tensor(resize_bilinear(rgb, size, size), dtype)
    rgb_t = Tensor(rgb_t.data[None])
    sil_t = None
    if model.arch == "multi":
        if args.sil:
            sil = read_image(args.sil)
            if sil.ndim != 2:
                raise DataInvalidError(f"{args.sil} is not a grayscale (P5) image")
        else:
            sil, _, _ = extract_silhouette(rgb, SilhouetteParams())
        sil_t = normalize_to_tensor(resize_bilinear(sil, size, size), dtype)
        sil_t = Tensor(sil_t.data[None])
    logits = model_forward(model, rgb_t, sil_t, mode="eval").data[0].astype(np.float64)
    z = logits - logits.max()
    probs = np.exp(z) / np.exp(z).sum()
    idx = int(np.argmax(logits))
    print(json.dumps(
        {"label": LABEL_NAMES[idx], "index": idx, "probs": [float(p) for p in probs]}
    ))


def _cmd_compare(args) -> None:
    rows = []
    for path in args.results:
        with open(path, "r", encoding="utf-8") as fh:
            rows.append(json.load(fh))
    report = compare_report(rows, tolerance=args.tolerance)
    print(render_comparison(report))
    if args.json:
        _write_json(args.json, report)


def build_parser() -> Parser:
    parser = Parser(prog="mifc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mifc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="generate a synthetic fruit corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--defect-contrast", type=float, default=0.5)
    p.add_argument("--corrupt-frac", type=float, default=0.0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="extract silhouettes and filter bad masks")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("split", help="assign train/val/test splits in place")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--logs", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--json", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="classify one RGB image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--sil", default=None)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("compare", help="merge eval JSONs into a comparison report")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--tolerance", type=float, default=0.0)
    p.add_argument("--json", default=None)
    p.set_defaults(func=_cmd_compare)
    return parser


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except NumericFailure as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 4
    except (FormatError, DataInvalidError, InvalidArgumentError, InvalidStateError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except MifcError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return run_cli(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
