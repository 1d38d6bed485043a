"""Knowledge distillation for dense binary segmentation.

A small teacher/student framework built on numpy: softened-KL attention
transfer between supervision maps, a symmetrized structure loss, deep
segmentation supervision, and the experiment protocols (mode ablation,
temperature sweep, overlay figures) that compare them.
"""

from .data import (DatasetError, DatasetSpec, Sample, batch_iterator,
                   generate_dataset, generate_sample, load_directory,
                   save_dataset, stack_samples)
from .harness import (AblationResult, SweepResult, default_runs_root,
                      desk_dataset_spec, desk_teacher_train_config,
                      desk_train_config, emit_report, export_overlays,
                      run_ablation, run_temperature_sweep, sweep_configs,
                      test_split, val_split)
from .kdmath import (LossBreakdown, attention_kd_loss, attention_map,
                     bce_loss, bilinear_resize, dice_loss, jaccard_loss,
                     kl_softened, row_softmax, seg_loss, sgm_loss, sigmoid,
                     symmetric_structure, total_kdas_loss)
from .metrics import MetricReport, binarize, evaluate
from .models import (Checkpoint, CheckpointError, ManifestError, ModelConfig,
                     OffsetError, PayloadError, SegModel, build_model,
                     checkpoint_digest, load_checkpoint, param_count,
                     read_checkpoint, save_checkpoint, student_config,
                     teacher_config)
from .trainer import (AdamW, DivergedError, TrainConfig, TrainHistory,
                      distill, evaluate_model, loss_step, predict_logits,
                      train_teacher, write_history, write_validation)

__version__ = "0.1.0"

__all__ = [
    "AblationResult", "AdamW", "Checkpoint", "CheckpointError",
    "DatasetError", "DatasetSpec", "DivergedError", "LossBreakdown",
    "ManifestError", "MetricReport", "ModelConfig", "OffsetError",
    "PayloadError", "Sample", "SegModel", "SweepResult", "TrainConfig",
    "TrainHistory", "attention_kd_loss", "attention_map", "batch_iterator",
    "bce_loss", "bilinear_resize", "binarize", "build_model",
    "checkpoint_digest", "default_runs_root", "desk_dataset_spec",
    "desk_teacher_train_config", "desk_train_config", "dice_loss", "distill",
    "emit_report", "evaluate", "evaluate_model", "export_overlays",
    "generate_dataset", "generate_sample", "jaccard_loss", "kl_softened",
    "load_checkpoint", "load_directory", "loss_step", "param_count",
    "predict_logits", "read_checkpoint", "row_softmax", "run_ablation",
    "run_temperature_sweep", "save_checkpoint", "save_dataset", "seg_loss",
    "sgm_loss", "sigmoid", "stack_samples", "student_config",
    "sweep_configs", "symmetric_structure", "teacher_config", "test_split",
    "total_kdas_loss", "train_teacher", "val_split", "write_history",
    "write_validation",
]
