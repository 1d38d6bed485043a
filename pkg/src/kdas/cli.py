"""Command-line entry point.

One executable with subcommands for data generation, teacher training,
distillation, evaluation, and the experiment protocols. Every subcommand
accepts ``--config <path>`` (a JSON file with ``dataset`` / ``teacher`` /
``student`` / ``train`` / ``harness`` sections); explicit flags override
file values, which override built-in defaults. Unknown sections or keys
are rejected. Each run echoes its fully resolved configuration to stdout
and writes it next to its outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import harness as ha
from . import trainer as tr
from .data import (DatasetSpec, DatasetError, generate_dataset,
                   load_directory, save_dataset)
from .models import (CheckpointError, ModelConfig, STUDENT_WIDTHS,
                     TEACHER_WIDTHS, load_checkpoint)


class UsageError(ValueError):
    """Bad invocation: unknown flags/keys, missing arguments, bad values."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here is 1
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------ config schema

def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _str(v):
    return str(v)


def _opt_float(v):
    return None if v is None or v == "none" else float(v)


def _int_tuple(length):
    def cast(v):
        if isinstance(v, str):
            v = v.split(",")
        out = tuple(int(x) for x in v)
        if length is not None and len(out) != length:
            raise ValueError(f"expected {length} integers, got {len(out)}")
        return out
    return cast


def _float_pair(v):
    if isinstance(v, str):
        v = v.split(",")
    out = tuple(float(x) for x in v)
    if len(out) != 2:
        raise ValueError(f"expected 2 numbers, got {len(out)}")
    return out


_SCHEMA = {
    "dataset": {
        "count": _int, "image_side": _int, "seed": _int, "contrast": _float,
        "noise_sigma": _float, "blob_count_range": _int_tuple(2),
        "radius_range": _float_pair,
    },
    "teacher": {"channel_widths": _int_tuple(3), "seed": _int},
    "student": {"channel_widths": _int_tuple(3), "seed": _int},
    "train": {
        "mode": _str, "epochs": _int, "batch_size": _int,
        "learning_rate": _float, "weight_decay": _float,
        "temperature": _float, "kd_weight": _float, "seg_weight": _float,
        "seed": _int, "gradient_clip": _opt_float, "seg_loss_kind": _str,
    },
    "harness": {
        "experiment": _str, "runs_dir": _str, "seeds": _int_tuple(None),
        "teacher_epochs": _int, "teacher_learning_rate": _float,
    },
}


def _defaults() -> dict:
    spec = DatasetSpec(count=200, image_side=64, seed=0)
    train = tr.TrainConfig()
    desk_teacher = ha.desk_teacher_train_config()
    return {
        "dataset": dataclasses.asdict(spec),
        "teacher": {"channel_widths": TEACHER_WIDTHS, "seed": 0},
        "student": {"channel_widths": STUDENT_WIDTHS, "seed": 0},
        "train": dataclasses.asdict(train),
        "harness": {
            "experiment": "experiment",
            "runs_dir": "runs",
            "seeds": (0, 1, 2),
            "teacher_epochs": desk_teacher.epochs,
            "teacher_learning_rate": desk_teacher.learning_rate,
        },
    }


def _load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object")
    for section, values in raw.items():
        if section not in _SCHEMA:
            raise UsageError(f"unknown config section: '{section}'")
        if not isinstance(values, dict):
            raise UsageError(f"config section '{section}' must be an object")
        for key in values:
            if key not in _SCHEMA[section]:
                raise UsageError(f"unknown config key: '{section}.{key}'")
    return raw


def _resolve(args) -> dict:
    """Precedence: command line > config file > environment > built-in."""
    resolved = _defaults()
    if "KDAS_RUNS_DIR" in os.environ:
        resolved["harness"]["runs_dir"] = os.environ["KDAS_RUNS_DIR"]
    if getattr(args, "config", None):
        for section, values in _load_config_file(args.config).items():
            for key, value in values.items():
                try:
                    resolved[section][key] = _SCHEMA[section][key](value)
                except (TypeError, ValueError) as exc:
                    raise UsageError(
                        f"bad config value {section}.{key}: {exc}") from exc
    for dest, (section, key) in _FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is not None:
            try:
                resolved[section][key] = _SCHEMA[section][key](value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for --{dest.replace('_', '-')}: "
                                 f"{exc}") from exc
    return resolved


def _echo_and_record(resolved: dict, out_dir: Path | None) -> None:
    text = json.dumps(resolved, indent=2, sort_keys=True, default=list)
    print(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(text + "\n")


def _dataset_spec(resolved) -> DatasetSpec:
    d = dict(resolved["dataset"])
    d["blob_count_range"] = tuple(d["blob_count_range"])
    d["radius_range"] = tuple(d["radius_range"])
    return DatasetSpec(**d)


def _model_config(resolved, role: str, image_side: int) -> ModelConfig:
    section = resolved[role]
    return ModelConfig(input_side=image_side,
                       channel_widths=tuple(section["channel_widths"]),
                       seed=section["seed"])


def _train_config(resolved, **overrides) -> tr.TrainConfig:
    values = dict(resolved["train"])
    values.update(overrides)
    try:
        return tr.TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(f"bad training configuration: {exc}") from exc


def _load_samples(args, resolved):
    """--data <root> reads <root>/images + <root>/masks; else synthetic."""
    spec = _dataset_spec(resolved)
    if getattr(args, "data", None):
        root = Path(args.data)
        return load_directory(root / "images", root / "masks",
                              target_side=spec.image_side), spec
    return generate_dataset(spec), spec


# ------------------------------------------------------------ subcommands

def _cmd_generate_data(args):
    resolved = _resolve(args)
    out = Path(args.out)
    _echo_and_record(resolved, out)
    samples = generate_dataset(_dataset_spec(resolved))
    save_dataset(samples, out)
    print(f"wrote {len(samples)} samples under {out}")
    return 0


def _cmd_train_teacher(args):
    resolved = _resolve(args)
    out = Path(args.out) if args.out else \
        Path(resolved["harness"]["runs_dir"]) / "teacher" / "checkpoint.kdas"
    _echo_and_record(resolved, out.parent)
    samples, spec = _load_samples(args, resolved)
    val = None if args.data else generate_dataset(ha.val_split(spec))
    cfg = _train_config(resolved, mode="baseline")
    model_cfg = _model_config(resolved, "teacher", spec.image_side)
    _, history = tr.train_teacher(model_cfg, samples, cfg,
                                  val_samples=val, out_path=out)
    tr.write_history(history, out.parent / "history.jsonl")
    tr.write_validation(history, out.parent / "val.jsonl")
    final = history.val[-1][1]
    print(f"wrote {out}")
    print(f"final val mDice {final.m_dice:.3f}")
    return 0


def _cmd_distill(args):
    resolved = _resolve(args)
    cfg = _train_config(resolved)
    out = Path(args.out) if args.out else \
        Path(resolved["harness"]["runs_dir"]) / "distill" / cfg.mode / \
        "checkpoint.kdas"
    _echo_and_record(resolved, out.parent)
    samples, spec = _load_samples(args, resolved)
    val = None if args.data else generate_dataset(ha.val_split(spec))
    student = _model_config(resolved, "student", spec.image_side)
    _, history = tr.distill(args.teacher, student, samples, cfg,
                            val_samples=val, out_path=out)
    tr.write_history(history, out.parent / "history.jsonl")
    tr.write_validation(history, out.parent / "val.jsonl")
    final = history.val[-1][1]
    print(f"wrote {out}")
    print(f"final val mDice {final.m_dice:.3f}")
    return 0


def _cmd_evaluate(args):
    resolved = _resolve(args)
    _echo_and_record(resolved, None)
    samples, _ = _load_samples(args, resolved)
    model = load_checkpoint(args.checkpoint)
    report = tr.evaluate_model(model, samples)
    print(f"mDice {report.m_dice:.3f}")
    print(f"mIoU {report.m_iou:.3f}")
    return 0


def _harness_common(args, resolved):
    spec = _dataset_spec(resolved)
    teacher = _model_config(resolved, "teacher", spec.image_side)
    student = _model_config(resolved, "student", spec.image_side)
    h = resolved["harness"]
    teacher_cfg = ha.desk_teacher_train_config(
        epochs=h["teacher_epochs"],
        learning_rate=h["teacher_learning_rate"],
        batch_size=resolved["train"]["batch_size"],
        weight_decay=resolved["train"]["weight_decay"],
        seed=resolved["train"]["seed"])
    out_root = Path(h["runs_dir"])
    seeds = tuple(h["seeds"])
    return spec, (teacher, student), teacher_cfg, out_root, seeds, \
        h["experiment"]


def _summarize(results, exp_dir):
    print(f"report written to {exp_dir / 'report.txt'}")
    failed = [r for r in results if r.error is not None]
    for r in failed:
        label = getattr(r, "mode", None) or f"t={r.temperature:g}"
        print(f"run failed ({label}, seed {r.seed}): {r.error}",
              file=sys.stderr)


def _cmd_ablate(args):
    resolved = _resolve(args)
    spec, models, teacher_cfg, root, seeds, exp = \
        _harness_common(args, resolved)
    _echo_and_record(resolved, root / exp)
    train_cfg = _train_config(resolved)
    results = ha.run_ablation(spec, models, train_cfg, seeds, out_root=root,
                              experiment=exp, teacher_train_config=teacher_cfg)
    _summarize(results, root / exp)
    return 0


def _cmd_temp_sweep(args):
    resolved = _resolve(args)
    spec, models, teacher_cfg, root, seeds, exp = \
        _harness_common(args, resolved)
    _echo_and_record(resolved, root / exp)
    base = _train_config(resolved, mode="full")
    results = ha.run_temperature_sweep(
        spec, ha.sweep_configs(base), seeds, model_configs=models,
        out_root=root, experiment=exp, teacher_train_config=teacher_cfg)
    _summarize(results, root / exp)
    return 0


def _cmd_export_overlays(args):
    resolved = _resolve(args)
    out = Path(args.out)
    _echo_and_record(resolved, out)
    checkpoints = {mode: getattr(args, mode) for mode in
                   ("baseline", "kl", "attention_kd", "full")
                   if getattr(args, mode, None)}
    if not checkpoints:
        raise UsageError("provide at least one of --baseline/--kl/"
                         "--attention-kd/--full")
    samples, _ = _load_samples(args, resolved)
    written = ha.export_overlays(checkpoints, samples, out)
    print(f"wrote {len(written)} overlay grids under {out}")
    return 0


# ------------------------------------------------------------ parser wiring

# dest -> (config section, key); every flag keeps file/flag parity
_FLAG_MAP = {
    "count": ("dataset", "count"),
    "side": ("dataset", "image_side"),
    "data_seed": ("dataset", "seed"),
    "contrast": ("dataset", "contrast"),
    "noise_sigma": ("dataset", "noise_sigma"),
    "blob_count_range": ("dataset", "blob_count_range"),
    "radius_range": ("dataset", "radius_range"),
    "teacher_widths": ("teacher", "channel_widths"),
    "student_widths": ("student", "channel_widths"),
    "mode": ("train", "mode"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "learning_rate": ("train", "learning_rate"),
    "weight_decay": ("train", "weight_decay"),
    "temperature": ("train", "temperature"),
    "kd_weight": ("train", "kd_weight"),
    "seg_weight": ("train", "seg_weight"),
    "seed": ("train", "seed"),
    "gradient_clip": ("train", "gradient_clip"),
    "seg_loss_kind": ("train", "seg_loss_kind"),
    "experiment": ("harness", "experiment"),
    "runs_dir": ("harness", "runs_dir"),
    "seeds": ("harness", "seeds"),
    "teacher_epochs": ("harness", "teacher_epochs"),
    "teacher_learning_rate": ("harness", "teacher_learning_rate"),
}

_DATASET_FLAGS = ("count", "side", "data_seed", "contrast", "noise_sigma",
                  "blob_count_range", "radius_range")
_TRAIN_FLAGS = ("epochs", "batch_size", "learning_rate", "weight_decay",
                "seed", "gradient_clip", "seg_loss_kind")
_KD_FLAGS = ("mode", "temperature", "kd_weight", "seg_weight")
_HARNESS_FLAGS = ("experiment", "runs_dir", "seeds", "teacher_epochs",
                  "teacher_learning_rate")


def _add_flags(parser, names):
    for name in names:
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name,
                            default=None, metavar="V")


def _build_parser() -> _Parser:
    parser = _Parser(prog="kdas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="SUBCOMMAND")

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None, metavar="PATH",
                       help="JSON config file")
        return p

    p = command("generate-data", _cmd_generate_data,
                "write a synthetic image/mask dataset to disk")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_flags(p, _DATASET_FLAGS)

    p = command("train-teacher", _cmd_train_teacher,
                "train the large model with the plain segmentation loss")
    p.add_argument("--data", default=None, metavar="DIR")
    p.add_argument("--out", default=None, metavar="PATH")
    _add_flags(p, _DATASET_FLAGS + _TRAIN_FLAGS + ("teacher_widths",
                                                   "runs_dir"))

    p = command("distill", _cmd_distill,
                "train a student against a frozen teacher checkpoint")
    p.add_argument("--teacher", required=True, metavar="PATH")
    p.add_argument("--data", default=None, metavar="DIR")
    p.add_argument("--out", default=None, metavar="PATH")
    _add_flags(p, _DATASET_FLAGS + _TRAIN_FLAGS + _KD_FLAGS +
               ("student_widths", "runs_dir"))

    p = command("evaluate", _cmd_evaluate,
                "report mDice/mIoU of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", default=None, metavar="DIR")
    _add_flags(p, _DATASET_FLAGS)

    p = command("ablate", _cmd_ablate,
                "run the four-mode ablation protocol")
    p.add_argument("--data", default=None, metavar="DIR")
    _add_flags(p, _DATASET_FLAGS + _TRAIN_FLAGS + _KD_FLAGS +
               ("teacher_widths", "student_widths") + _HARNESS_FLAGS)

    p = command("temp-sweep", _cmd_temp_sweep,
                "run mode=full across temperatures {1,2,4,6,8}")
    p.add_argument("--data", default=None, metavar="DIR")
    _add_flags(p, _DATASET_FLAGS + _TRAIN_FLAGS +
               ("kd_weight", "seg_weight", "teacher_widths",
                "student_widths") + _HARNESS_FLAGS)

    p = command("export-overlays", _cmd_export_overlays,
                "render input/gt/prediction grids for mode checkpoints")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--data", default=None, metavar="DIR")
    for mode in ("baseline", "kl", "attention-kd", "full"):
        p.add_argument(f"--{mode}", dest=mode.replace("-", "_"),
                       default=None, metavar="PATH")
    _add_flags(p, _DATASET_FLAGS)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(parser.format_usage().rstrip(), file=sys.stderr)
        return 1
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except tr.DivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)


def entry() -> None:
    sys.exit(main(sys.argv[1:]))
