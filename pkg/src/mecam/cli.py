"""``mecam`` command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint, netpbm
from .cam import cam_pipeline
from .config import RunConfig, parse_value, resolve
from .data import Dataset, bilinear_resize, load_dataset, synth_generate
from .errors import ConfigError, DataError, MecamError, NumericError
from .metrics import emit_report, evaluate, mixed_testset
from .model import build, train
from .scoring import (
    Threshold,
    calibrate_threshold,
    classify,
    make_records,
    mask_label,
    score_images,
    write_score_dump,
)

logger = logging.getLogger("mecam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- shared helpers -----------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--out", dest="out_dir")


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(k.strip(), v)
    for key in ("seed", "data_root", "manifest", "checkpoint", "out_dir", "epochs", "batch_size",
                "lr_start", "lr_end", "target_tpr", "workers", "mood_exit"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "scorers", None):
        overrides["scorers"] = parse_value("scorers", args.scorers)
    if getattr(args, "exit_mask", None):
        overrides["exit_mask"] = tuple(m for text in args.exit_mask for m in parse_value("exit_mask", text) or ())
    return resolve(args.config, overrides)


def _manifest_path(cfg: RunConfig, manifest: str) -> Path:
    p = Path(manifest)
    if p.is_absolute() or p.is_file():
        return p.resolve()
    return (Path(cfg.data_root) / p).resolve()


def _load(cfg: RunConfig, manifest: str, split: str | None) -> Dataset:
    return load_dataset(
        cfg.data_root,
        _manifest_path(cfg, manifest),
        splits=split,
        input_size=cfg.input_size,
        channels=cfg.in_channels,
        num_classes=cfg.num_classes,
    )


def _load_split(cfg: RunConfig, split: str) -> Dataset:
    ds = _load(cfg, cfg.manifest, split)
    if len(ds) == 0:
        raise DataError(f"split {split!r} is missing or empty in manifest {cfg.manifest}")
    return ds


def _load_model(cfg: RunConfig):
    """Load the checkpoint; its architecture overrides the config's."""
    model = checkpoint.load(cfg.checkpoint_path)
    mc = model.config
    cfg = replace(
        cfg,
        input_size=mc.input_size,
        in_channels=mc.in_channels,
        num_classes=mc.num_classes,
        stage_widths=mc.stage_widths,
        blocks_per_stage=mc.blocks_per_stage,
        exit_stages=mc.exit_stages,
    ).validate()
    return cfg, model


def _masks(cfg: RunConfig, exits) -> list[tuple[int, ...]]:
    return [tuple(exits)] if not cfg.exit_mask else [tuple(m) for m in cfg.exit_mask]


def _score(cfg: RunConfig, model, images):
    return score_images(
        model,
        images,
        scorers=cfg.scorers,
        exit_masks=_masks(cfg, model.config.exit_stages),
        mood_exit=cfg.mood_exit,
        workers=cfg.workers,
    )


# --- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to write into it")
    manifests = synth_generate(out, args.seed, args.n_per_class, args.image_size)
    for name, path in manifests.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = _load_split(cfg, "train")
    model = build(cfg.model_config(), cfg.seed)
    result = train(
        model,
        data,
        cfg.epochs,
        lr_start=cfg.lr_start,
        lr_end=cfg.lr_end,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        exit_loss_weights=cfg.exit_loss_weights,
        augment=cfg.augment,
        momentum=cfg.momentum,
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved()
    cfg.checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(result.model, cfg.checkpoint_path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "loss"))
    w.writerows((i + 1, repr(loss)) for i, loss in enumerate(result.loss_log))
    (out / "loss_log.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"train accuracy (final exit): {result.train_accuracy:.4f}")
    print(f"checkpoint: {cfg.checkpoint_path}")
    return EXIT_OK


def _write_thresholds(path: Path, thresholds: Sequence[Threshold]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("scorer", "tau", "target_tpr"))
    for t in thresholds:
        w.writerow((t.scorer, repr(t.tau), repr(t.target_tpr)))
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_thresholds(path) -> dict[str, Threshold]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"threshold file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ("scorer", "tau", "target_tpr"):
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        return {r["scorer"]: Threshold(r["scorer"], float(r["tau"]), float(r["target_tpr"]), 0) for r in reader}


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    cfg, model = _load_model(cfg)
    calib = _load_split(cfg, "calib")
    batch = _score(cfg, model, calib.images)
    thresholds = [calibrate_threshold(v, cfg.target_tpr, name) for name, v in batch.scores.items()]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved()
    _write_thresholds(out / "thresholds.csv", thresholds)
    write_score_dump(out / "calib_scores.csv", make_records(calib.ids, "ID", batch))
    for t in thresholds:
        print(f"{t.scorer}: tau {t.tau!r} (target TPR {t.target_tpr}, n={t.n_calibration})")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _config(args)
    cfg, model = _load_model(cfg)
    img = netpbm.read_image(args.input)
    if img.shape[0] != model.config.in_channels:
        raise DataError(f"{args.input}: expected {model.config.in_channels} channels, file has {img.shape[0]}")
    if img.shape[1:] != (model.config.input_size,) * 2:
        img = np.clip(bilinear_resize(img, (model.config.input_size,) * 2), 0, 1).astype(np.float32)
    batch = _score(cfg, model, img[None])
    thresholds = read_thresholds(args.thresholds) if args.thresholds else {}
    for name, values in batch.scores.items():
        line = f"{args.input} {name} {float(values[0])!r} pred_class={int(batch.predicted[0])}"
        if name in thresholds:
            line += f" {classify(values[0], thresholds[name])}"
        print(line)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    cfg, model = _load_model(cfg)
    id_data = _load_split(cfg, "test")
    ood_parts = [_load(cfg, m, None) for m in args.ood]
    ood = Dataset(
        [i for d in ood_parts for i in d.ids],
        np.concatenate([d.images for d in ood_parts]),
        np.concatenate([d.labels for d in ood_parts]),
    )
    mixed = mixed_testset(id_data, ood)
    batch = _score(cfg, model, mixed.images)
    reports = [
        evaluate(name, values[mixed.is_id], values[~mixed.is_id], cfg.target_tpr)
        for name, values in batch.scores.items()
    ]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved()
    emit_report(reports, out)
    n_id = int(mixed.is_id.sum())
    id_batch = type(batch)(batch.predicted[:n_id], {k: v[:n_id] for k, v in batch.scores.items()})
    ood_batch = type(batch)(batch.predicted[n_id:], {k: v[n_id:] for k, v in batch.scores.items()})
    records = make_records(mixed.ids[:n_id], "ID", id_batch) + make_records(mixed.ids[n_id:], "OOD", ood_batch)
    write_score_dump(out / "scores.csv", records)
    for r in reports:
        print(r.summary())
    return EXIT_OK


def cmd_cam(args) -> int:
    cfg = _config(args)
    cfg, model = _load_model(cfg)
    img = netpbm.read_image(args.input)
    size = (model.config.input_size,) * 2
    if img.shape[1:] != size:
        img = np.clip(bilinear_resize(img, size), 0, 1).astype(np.float32)
    masks = _masks(cfg, model.config.exit_stages)
    if len(masks) != 1:
        raise ConfigError("cam takes a single exit mask")
    bundle, masked = cam_pipeline(model, img, masks[0])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved()
    for e in bundle.exit_mask:
        netpbm.write_image(out / f"exit_{e}.pgm", bundle.upsampled[e])
    netpbm.write_image(out / "aggregate.pgm", bundle.aggregated)
    rgb = masked[0] if masked.shape[1] == 3 else np.repeat(masked[0], 3, axis=0)
    netpbm.write_image(out / "masked.ppm", rgb)
    weights = ", ".join(f"exit{e}={bundle.weights[e]:.4f}" for e in bundle.exit_mask)
    print(f"predicted class {bundle.predicted_class}; {mask_label(bundle.exit_mask, model.config.exit_stages)} weights {weights}")
    return EXIT_OK


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mecam", description="Multi-exit CAM feature-shift OOD detection")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write the synthetic ID/OOD corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", dest="n_per_class", type=int, default=500)
    p.add_argument("--image-size", dest="image_size", type=int, default=32)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on the train split")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-start", dest="lr_start", type=float)
    p.add_argument("--lr-end", dest="lr_end", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fit thresholds on the calib split")
    _common(p)
    p.add_argument("--scorers")
    p.add_argument("--exit-mask", dest="exit_mask", action="append")
    p.add_argument("--target-tpr", dest="target_tpr", type=float)
    p.add_argument("--mood-exit", dest="mood_exit", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("score", help="score one image")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--scorers")
    p.add_argument("--exit-mask", dest="exit_mask", action="append")
    p.add_argument("--mood-exit", dest="mood_exit", type=int)
    p.add_argument("--thresholds", help="thresholds.csv from calibrate")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate ID test split against OOD manifests")
    _common(p)
    p.add_argument("--ood", action="append", required=True, help="OOD manifest (repeatable)")
    p.add_argument("--scorers")
    p.add_argument("--exit-mask", dest="exit_mask", action="append", help="comma list, repeatable")
    p.add_argument("--target-tpr", dest="target_tpr", type=float)
    p.add_argument("--mood-exit", dest="mood_exit", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cam", help="export per-exit and aggregated CAMs for one image")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--exit-mask", dest="exit_mask", action="append")
    p.set_defaults(func=cmd_cam)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"mecam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"mecam: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"mecam: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MecamError as exc:
        print(f"mecam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
