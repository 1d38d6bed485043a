"""
Training a teacher and distilling a student
===========================================

End-to-end miniature of the core workflow: synthesize a dataset, train
the wide model on plain segmentation, then train the narrow model with
the full transfer objective against the frozen teacher. Small sizes keep
the whole script under a minute; the desk-scale protocol in the harness
uses the same calls with larger settings.
"""

import tempfile
from pathlib import Path

from kdas import (DatasetSpec, TrainConfig, checkpoint_digest, distill,
                  evaluate_model, generate_dataset, load_checkpoint,
                  param_count, student_config, teacher_config, train_teacher,
                  val_split)

SIDE = 32
work = Path(tempfile.mkdtemp(prefix="kdas-demo-"))

# Three seeded splits: train, validation (model selection), test (report).
spec = DatasetSpec(count=48, image_side=SIDE, seed=0)
train_set = generate_dataset(spec)
val_set = generate_dataset(val_split(spec))
test_set = generate_dataset(DatasetSpec(count=16, image_side=SIDE, seed=77))
print(f"dataset: {len(train_set)} train / {len(val_set)} val / "
      f"{len(test_set)} test at {SIDE}x{SIDE}")

# The teacher is the wide network, trained on segmentation alone.
teacher_path = work / "teacher.kdas"
t_cfg = TrainConfig(mode="baseline", epochs=12, batch_size=8,
                    learning_rate=3e-3, seed=0)
train_teacher(teacher_config(SIDE), train_set, t_cfg,
              val_samples=val_set, out_path=teacher_path)
teacher = load_checkpoint(teacher_path)
t_report = evaluate_model(teacher, test_set)
print(f"teacher: {param_count(teacher)} params, "
      f"test mDice {t_report.m_dice:.3f}")

# Distill the student with the combined objective: attention transfer at
# both scales, the symmetric structure term at the fine scale, and deep
# segmentation supervision, weighted 0.2 / 0.8.
digest_before = checkpoint_digest(teacher_path)
s_cfg = TrainConfig(mode="full", epochs=12, batch_size=8,
                    learning_rate=3e-3, temperature=1.0, seed=0)
student_path = work / "student.kdas"
_, history = distill(teacher_path, student_config(SIDE), train_set, s_cfg,
                     val_samples=val_set, out_path=student_path)
student = load_checkpoint(student_path)
s_report = evaluate_model(student, test_set)
ratio = param_count(student) / param_count(teacher)
print(f"student: {param_count(student)} params "
      f"({ratio:.1%} of the teacher), test mDice {s_report.m_dice:.3f}")

# The teacher file is untouched by distillation.
print("teacher checkpoint unchanged:",
      checkpoint_digest(teacher_path) == digest_before)

# Every logged step satisfies total = 0.2*(l_at + l_sgm) + 0.8*l_seg.
first = history.steps[0][2]
last = history.steps[-1][2]
print(f"first step losses: l_at {first.l_at:.3f}, l_sgm {first.l_sgm:.4f}, "
      f"l_seg {first.l_seg:.3f}, total {first.total:.3f}")
print(f"last step losses:  l_at {last.l_at:.3f}, l_sgm {last.l_sgm:.4f}, "
      f"l_seg {last.l_seg:.3f}, total {last.total:.3f}")
recombined = 0.2 * (last.l_at + last.l_sgm) + 0.8 * last.l_seg
print(f"identity holds: |total - recombined| = "
      f"{abs(last.total - recombined):.2e}")

print(f"\nartifacts under {work}")
