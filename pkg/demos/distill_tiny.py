"""Train a teacher, a scratch student and a distilled student on a small synthetic task.

Runs in about a minute on one CPU core. The numbers are noisy at this size;
the desk configuration used by the acceptance tests is ``ExperimentConfig()``.

    python demos/distill_tiny.py [--epochs 6] [--out demo_out]
"""
import argparse
import logging
from pathlib import Path

import torch
from PIL import Image

from kdgan.cli import render_grid
from kdgan.config import ExperimentConfig
from kdgan.data import DatasetSpec, generate_dataset
from kdgan.evaluation import compare_runs, evaluate_generator, sample_bound, train_reference_segmenter
from kdgan.models import DiscriminatorSpec, GeneratorSpec, count_params
from kdgan.trainer import distill, train_student_scratch, train_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    # 32x32 label maps with four classes; the teacher is twice as wide as the student.
    config = ExperimentConfig(
        dataset=DatasetSpec(seed=7, n_classes=4, image_size=32, n_train=256, n_val=32, n_test=32),
        teacher=GeneratorSpec(in_channels=4, out_channels=3, base_width=16, depth=3),
        student=GeneratorSpec(in_channels=4, out_channels=3, base_width=8, depth=3),
        discriminator=DiscriminatorSpec(in_channels=7, base_width=16, num_layers=2),
        epochs=args.epochs,
    )
    dataset = generate_dataset(config.dataset)

    # Every generator is scored by the same frozen segmenter trained on real photos.
    seg = train_reference_segmenter(dataset, epochs=15)
    print(f"reference segmenter: {seg.val_accuracy:.3f} per-pixel accuracy on real validation photos")

    teacher = train_teacher(config, dataset)
    scratch = train_student_scratch(config, dataset)
    student = distill(config, (teacher.generator, teacher.discriminator), dataset)

    p_T, p_S = count_params(teacher.generator), count_params(student.generator)
    print(f"teacher {p_T:,} parameters, student {p_S:,}; "
          f"distillation guarantee needs n >= {sample_bound(p_T, p_S):.0f} training pairs "
          f"(have {config.dataset.n_train})")

    records = [evaluate_generator(r.generator, seg, dataset, "test") for r in (scratch, student, teacher)]
    print(compare_runs(records, ["student from scratch", "distilled student", "teacher"]).to_text())

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # columns: labels, real photo, scratch, distilled, teacher
    sheet = render_grid(dataset, [scratch.generator, student.generator, teacher.generator], list(range(4)))
    Image.fromarray(sheet).save(out / "grid.png")
    print(f"wrote {out / 'grid.png'}")


if __name__ == "__main__":
    main()
