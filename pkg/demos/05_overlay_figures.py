"""
Qualitative overlay grids
=========================

Renders side-by-side comparison figures: input image, ground-truth mask,
then one binarized prediction column per mode checkpoint. One PNG per
sample, named `<sample_id>_grid.png`.

For brevity the two "checkpoints" here are a briefly-trained student and
an untrained one, which makes the visual difference obvious.
"""

import tempfile
from pathlib import Path

from kdas import (DatasetSpec, TrainConfig, build_model, export_overlays,
                  generate_dataset, save_checkpoint, student_config,
                  teacher_config, train_teacher, distill)

work = Path(tempfile.mkdtemp(prefix="kdas-overlays-"))
SIDE = 32

samples = generate_dataset(DatasetSpec(count=3, image_side=SIDE, seed=11))
train_set = generate_dataset(DatasetSpec(count=32, image_side=SIDE, seed=0))

# A quick teacher, a distilled student, and an untrained student: the
# untrained column will be visibly wrong in the figure.
teacher_path = work / "teacher.kdas"
train_teacher(teacher_config(SIDE), train_set,
              TrainConfig(mode="baseline", epochs=10, batch_size=8,
                          learning_rate=3e-3, seed=0),
              out_path=teacher_path)

full_path = work / "full.kdas"
distill(teacher_path, student_config(SIDE), train_set,
        TrainConfig(mode="full", epochs=10, batch_size=8,
                    learning_rate=3e-3, temperature=1.0, seed=0),
        out_path=full_path)

baseline_path = work / "baseline.kdas"
save_checkpoint(build_model(student_config(SIDE, seed=4)), baseline_path)

out_dir = work / "figures"
written = export_overlays({"baseline": baseline_path, "full": full_path},
                          samples, out_dir)

print("wrote:")
for path in written:
    print(f"  {path}")
print("\ncolumns: input, ground truth, baseline (untrained), full "
      "(distilled)")
