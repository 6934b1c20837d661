"""Command-line workflows: train, predict, evaluate, score.

Configuration comes from a TOML file (``--config``), with the common keys
overridable by flags. The effective configuration is echoed at startup so
every defaulted value is auditable. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import dataio, scoring
from .adversarial import (
    AdversarialConfig,
    AdversarialTrainer,
    NumericError,
    build_discriminator,
    save_loss_curve,
)
from .cascade import CascadeSpec, build_cascade, load_checkpoint, save_checkpoint
from .core import Modality, Organ, TrainingModality, ValidationError
from .dataio import AugmentParams, DataFormatError
from .metrics import EmptyMaskError, evaluate_case, largest_component
from .networks import ShapeError, build_generator
from .variants import VARIANTS, make_specs, parameter_count_by_name
from .weights import ArchiveError, WeightArchive, load_pretrained_encoder

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def _echo_config(cfg: dict, title: str) -> None:
    print(f"effective configuration ({title}):")
    def walk(prefix, node):
        for key in sorted(node):
            value = node[key]
            if isinstance(value, dict):
                walk(f"{prefix}{key}.", value)
            else:
                print(f"  {prefix}{key} = {value!r}")
    walk("", cfg)


def _get(cfg: dict, dotted: str, default=None, required=False):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(f"missing required config key {dotted!r}")
            return default
        node = node[part]
    return node


def _modality_for(training: TrainingModality) -> Modality:
    return {
        TrainingModality.CT: Modality.CT,
        TrainingModality.T1: Modality.T1IN,
        TrainingModality.T2: Modality.T2SPIR,
    }[training]


def _load_training_samples(cfg, modality: TrainingModality, organ: Organ):
    fmt = _get(cfg, "data.format", "rawvol")
    volumes = _get(cfg, "data.volumes", required=True)
    masks = _get(cfg, "data.masks", required=True)
    companions = _get(cfg, "data.companions", [None] * len(volumes))
    if len(volumes) != len(masks) or len(companions) != len(volumes):
        raise ConfigError("data.volumes, data.masks and data.companions lengths differ")
    base = Modality.T1IN if modality is TrainingModality.T1 else _modality_for(modality)
    samples = []
    for i, (vp, mp, cp) in enumerate(zip(volumes, masks, companions)):
        volume = dataio.load_volume(vp, fmt, base)
        mask = dataio.load_mask(mp, organ, fmt)
        companion = None
        if modality is TrainingModality.T1:
            if cp is None:
                raise ConfigError("t1 training needs data.companions (out-phase volumes)")
            companion = dataio.load_volume(cp, fmt, Modality.T1OUT)
        samples.extend(
            dataio.build_samples(volume, mask, companion, source_id=Path(vp).stem or f"case{i}")
        )
    return samples


def _build_model_for_variant(variant: str, cfg, seed: int):
    width = float(_get(cfg, "model.width_multiplier", 1.0))
    archive_path = _get(cfg, "model.pretrained_weights")
    info = VARIANTS[variant]
    wants_pretrained = info.pretrained and archive_path is not None and width == 1
    if info.pretrained and not wants_pretrained:
        print(
            f"note: {variant} is a pre-trained variant but no usable weight archive "
            "was configured; building with random initialization",
            file=sys.stderr,
        )
    spec, adversarial = make_specs(variant, width_multiplier=width, with_pretrained=wants_pretrained)
    if isinstance(spec, CascadeSpec):
        model = build_cascade(spec, seed=seed)
        stages = [model.stage1, model.stage2]
        in_channels = spec.stage1.in_channels
    else:
        model = build_generator(spec, seed=seed)
        stages = [model]
        in_channels = spec.in_channels
    if wants_pretrained:
        archive = WeightArchive.load(archive_path)
        for stage in stages:
            loaded = load_pretrained_encoder(stage, archive)
            print(f"loaded {loaded} pre-trained encoder conv layers into a stage")
    return model, adversarial, in_channels


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    variant = args.variant or _get(cfg, "model.variant", required=True)
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; known: {sorted(VARIANTS)}")
    modality = TrainingModality(args.modality or _get(cfg, "model.modality", required=True))
    organ = Organ(args.organ or _get(cfg, "model.organ", required=True))
    seed = args.seed if args.seed is not None else int(_get(cfg, "seed", 0))
    out_dir = Path(args.out or _get(cfg, "out", "run"))

    config = AdversarialConfig.preset(modality, seed=seed)
    overrides = {}
    for key in ("epochs", "batch_size", "learning_rate", "lambda_weight", "use_adversarial"):
        value = _get(cfg, f"train.{key}")
        if value is not None:
            overrides[key] = value
    _, variant_adversarial = make_specs(variant, with_pretrained=False)
    if "use_adversarial" not in overrides:
        overrides["use_adversarial"] = variant_adversarial
    config = replace(config, **overrides)

    augment_params = None
    if bool(_get(cfg, "augment.enabled", True)):
        augment_params = AugmentParams(
            scale_range=float(_get(cfg, "augment.scale", 0.10)),
            rotation_range=float(_get(cfg, "augment.rotation", 10.0)),
            shear_range=float(_get(cfg, "augment.shear", 5.0)),
            shift_range=float(_get(cfg, "augment.shift", 0.10)),
            copies=int(_get(cfg, "augment.copies", 100)),
            seed=seed,
        )

    _echo_config(
        {
            "variant": variant,
            "modality": modality.value,
            "organ": organ.value,
            "seed": seed,
            "out": str(out_dir),
            "train": {
                "epochs": config.epochs,
                "batch_size": config.batch_size,
                "learning_rate": config.learning_rate,
                "lambda_weight": config.lambda_weight,
                "use_adversarial": config.use_adversarial,
            },
            "augment": {"enabled": augment_params is not None},
            "model": {"width_multiplier": float(_get(cfg, "model.width_multiplier", 1.0))},
        },
        "train",
    )

    samples = _load_training_samples(cfg, modality, organ)
    if not samples:
        raise DataFormatError("no training samples were produced")
    model, _, in_channels = _build_model_for_variant(variant, cfg, seed)
    discriminator = (
        build_discriminator(in_channels + 1, seed=seed + 1) if config.use_adversarial else None
    )
    trainer = AdversarialTrainer(model, discriminator, config)
    records = trainer.train(samples, augment_params)

    save_checkpoint(
        out_dir,
        model,
        extra={"variant": variant, "modality": modality.value, "organ": organ.value, "seed": seed},
        discriminator=discriminator,
    )
    save_loss_curve(records, out_dir / "loss_curve.csv")
    print(f"trained {variant} for {config.epochs} epochs ({len(records)} steps)")
    print(f"checkpoint written to {out_dir}")
    return EXIT_OK


def _predict_volume(model, volume, companion, threshold, batch_size, organ):
    planes = [p for p, _ in dataio.extract_slices(volume)]
    if companion is not None:
        comp_planes = [p for p, _ in dataio.extract_slices(companion)]
        batch = [
            dataio.replicate_channels(
                dataio.normalize_plane(p), Modality.T1IN, dataio.normalize_plane(c)
            )
            for p, c in zip(planes, comp_planes)
        ]
    else:
        batch = [
            dataio.replicate_channels(dataio.normalize_plane(p), volume.modality)
            for p in planes
        ]
    preds = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(batch), batch_size):
            x = torch.from_numpy(np.stack(batch[start : start + batch_size]))
            x = x.permute(0, 3, 1, 2).contiguous()
            out = model(x)
            probs = out[1] if isinstance(out, tuple) else out
            preds.append((probs[:, 0].numpy() >= threshold).astype(np.uint8))
    mask = dataio.stack_predictions(list(np.concatenate(preds)), volume.spacing, organ)
    return largest_component(mask, connectivity=26)


def cmd_predict(args) -> int:
    cfg = _load_config(args.config)
    ckpt = args.checkpoint or _get(cfg, "predict.checkpoint", required=True)
    fmt = _get(cfg, "data.format", "rawvol")
    threshold = float(_get(cfg, "predict.threshold", 0.5))
    batch_size = int(_get(cfg, "predict.batch_size", 8))
    organ = Organ(args.organ or _get(cfg, "model.organ", "liver"))
    modality = TrainingModality(args.modality or _get(cfg, "model.modality", "ct"))
    out_dir = Path(args.out or _get(cfg, "out", "predictions"))
    volumes = args.volumes or _get(cfg, "predict.volumes", [])
    companions = _get(cfg, "predict.companions", [None] * len(volumes))
    if not volumes:
        raise ConfigError("no volumes to predict (pass paths or predict.volumes)")
    if len(companions) != len(volumes):
        raise ConfigError("predict.companions length differs from volumes")

    _echo_config(
        {
            "checkpoint": str(ckpt), "threshold": threshold, "batch_size": batch_size,
            "organ": organ.value, "modality": modality.value, "out": str(out_dir),
            "volumes": list(map(str, volumes)),
        },
        "predict",
    )
    model, manifest = load_checkpoint(ckpt)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = Modality.T1IN if modality is TrainingModality.T1 else _modality_for(modality)
    for vp, cp in zip(volumes, companions):
        volume = dataio.load_volume(vp, fmt, base)
        companion = None
        if modality is TrainingModality.T1:
            if cp is None:
                raise ConfigError("t1 prediction needs predict.companions")
            companion = dataio.load_volume(cp, fmt, Modality.T1OUT)
        mask = _predict_volume(model, volume, companion, threshold, batch_size, organ)
        out_path = out_dir / f"{Path(vp).stem}_pred.rawvol"
        tmp = out_path.with_name(out_path.name + ".tmp")
        dataio.write_mask(tmp, mask)
        tmp.replace(out_path)
        print(f"wrote {out_path} ({mask.voxel_count()} foreground voxels)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    fmt = _get(cfg, "data.format", "rawvol")
    variant = args.variant or _get(cfg, "model.variant", required=True)
    modality = TrainingModality(args.modality or _get(cfg, "model.modality", required=True))
    organ = Organ(args.organ or _get(cfg, "model.organ", required=True))
    predictions = _get(cfg, "evaluate.predictions", required=True)
    groundtruths = _get(cfg, "evaluate.groundtruths", required=True)
    if len(predictions) != len(groundtruths):
        raise ConfigError("evaluate.predictions and evaluate.groundtruths lengths differ")
    out_dir = Path(args.out or _get(cfg, "out", "evaluation"))

    _echo_config(
        {
            "variant": variant, "modality": modality.value, "organ": organ.value,
            "cases": len(predictions), "out": str(out_dir),
        },
        "evaluate",
    )
    results = []
    for pp, gp in zip(predictions, groundtruths):
        case_id = Path(pp).stem.removesuffix("_pred")
        pred = dataio.load_mask(pp, organ, fmt)
        gt = dataio.load_mask(gp, organ, fmt)
        try:
            report = evaluate_case(pred, gt)
            results.append(
                scoring.CaseResult.from_report(variant, modality, organ, case_id, report)
            )
        except EmptyMaskError as e:
            print(f"warning: case {case_id}: {e}; scored 0", file=sys.stderr)
            results.append(scoring.CaseResult.flagged(variant, modality, organ, case_id))
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.csv"
    scoring.write_case_report(results, report_path)
    mean_score = float(np.mean([r.case_score for r in results]))
    print(f"wrote {report_path} ({len(results)} cases, mean case score {mean_score:.2f})")
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _load_config(args.config)
    reports = args.reports or _get(cfg, "score.reports", [])
    if not reports:
        raise ConfigError("no report CSVs to score (pass paths or score.reports)")
    out_dir = Path(args.out or _get(cfg, "out", "scoreboard"))
    _echo_config({"reports": list(map(str, reports)), "out": str(out_dir)}, "score")

    table = scoring.ScoreTable()
    for path in reports:
        for result in scoring.read_case_report(path):
            table.add(result)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {name: parameter_count_by_name(name) for name in table.variants()}
    doc = scoring.write_scoreboard(table, out_dir / "scoreboard.json", counts)
    for category, rows in doc["categories"].items():
        leader = rows[0]
        print(f"{category}: {len(rows)} variants, best {leader['variant']} ({leader['score']:.2f})")
    print("best per (modality, organ):")
    for cell, variant in sorted(doc["movpunet"].items()):
        print(f"  {cell}: {variant}")
    print(f"wrote {out_dir / 'scoreboard.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abdoseg",
        description="Train, run and score cascaded adversarial organ segmentation models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="TOML configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--variant", choices=sorted(VARIANTS))
        p.add_argument("--modality", choices=[m.value for m in TrainingModality])
        p.add_argument("--organ", choices=[o.value for o in Organ])
        p.add_argument("--out", type=Path, help="output directory")

    p_train = sub.add_parser("train", help="train one variant for one (modality, organ)")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_pred = sub.add_parser("predict", help="segment volumes with a trained checkpoint")
    common(p_pred)
    p_pred.add_argument("volumes", nargs="*", help="volume files to segment")
    p_pred.add_argument("--checkpoint", type=Path)
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("evaluate", help="compute per-case metrics and scores")
    common(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_score = sub.add_parser("score", help="aggregate reports into a ranked scoreboard")
    common(p_score)
    p_score.add_argument("reports", nargs="*", help="evaluation report CSVs")
    p_score.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DataFormatError, ValidationError, ShapeError, ArchiveError,
            FileNotFoundError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, KeyError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
