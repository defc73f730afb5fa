"""Acceptance criteria, one test each, at their stated tolerances and time budgets.

Every test records a one-line verdict in ``RESULTS``; ``conftest.pytest_terminal_summary``
prints them after the run (and they are echoed inline under ``-s``).
"""
import subprocess
import sys
import time
import warnings
from pathlib import Path

import pytest
import torch

import gradient_suite
from conftest import DESK_SEEDS, tiny_config
from kdgan.config import ExperimentConfig
from kdgan.data import batch_iterator, generate_dataset
from kdgan.evaluation import sample_bound
from kdgan.losses import generator_terms
from kdgan.models import (GeneratorSpec, UNetGenerator, build_patch_discriminator, build_unet_generator, count_flops,
                          count_params, load_checkpoint, save_checkpoint)
from kdgan.trainer import (SampleBoundWarning, distill, load_teacher, make_optimizer, param_hash,
                           train_student_scratch, train_teacher, update_step)

RESULTS: dict = {}


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    RESULTS[number] = line
    print(line)
    assert ok, line


def full_scale(width: int) -> UNetGenerator:
    return UNetGenerator(GeneratorSpec(3, 3, width, 8), device="meta")


# -- 1. parameter counts -------------------------------------------------

def test_criterion_1_parameter_counts():
    t0 = time.perf_counter()
    got = {w: count_params(full_scale(w)) for w in (64, 32, 16)}
    elapsed = time.perf_counter() - t0
    target = {64: 54.41e6, 32: 13.61e6, 16: 3.4e6}
    errs = {w: abs(got[w] / target[w] - 1) for w in got}
    ok = all(e <= 0.05 for e in errs.values()) and elapsed < 1.0
    detail = ", ".join(f"width {w}: {got[w] / 1e6:.2f}M ({errs[w]:+.2%})" for w in got) + f"; {elapsed:.3f}s"
    verdict(1, "parameter counts within 5%", ok, detail)


# -- 2. FLOP ratios ------------------------------------------------------

def test_criterion_2_flop_ratios():
    t0 = time.perf_counter()
    f = {w: count_flops(full_scale(w), (3, 256, 256)) for w in (64, 32, 16)}
    elapsed = time.perf_counter() - t0
    half, quarter = f[64] / f[32], f[64] / f[16]
    ok = abs(half / 3.90 - 1) <= 0.15 and abs(quarter / 14.9 - 1) <= 0.15 and elapsed < 1.0
    verdict(2, "FLOP ratios within 15%", ok, f"teacher/half {half:.2f}, teacher/quarter {quarter:.2f}; {elapsed:.3f}s")


# -- 3. gradient suite ---------------------------------------------------

def test_criterion_3_gradient_suite():
    t0 = time.perf_counter()
    worst = {name: gradient_suite.worst_error(name, gradient_suite.N_TRIALS) for name in gradient_suite.CHECKS}
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(3, f"finite differences, {gradient_suite.N_TRIALS} trials per loss", ok,
            f"worst relative errors {detail}; {elapsed:.1f}s")


# -- 4. oracle suite -----------------------------------------------------

def test_criterion_4_oracle_suite():
    root = Path(__file__).resolve().parents[1]
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-m", "oracle", "-q", "-p", "no:cacheprovider",
                           str(root / "tests")], cwd=root, capture_output=True, text=True, check=False)
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-500:]
    ok = proc.returncode == 0 and elapsed < 60
    verdict(4, "hand and derived oracles", ok, f"{summary.strip('= ')}; {elapsed:.1f}s")


# -- 5. training-loop fidelity ------------------------------------------

def test_criterion_5_training_loop_fidelity(desk_dataset, tmp_path):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(epochs=2)
    checks = {}

    teacher = train_teacher(cfg, desk_dataset, run_dir=tmp_path / "teacher")
    G_T, D_T = load_teacher(tmp_path / "teacher")
    checks["checkpoint round trip"] = (param_hash(G_T) == param_hash(teacher.generator)
                                       and param_hash(D_T) == param_hash(teacher.discriminator))
    save_checkpoint(G_T, tmp_path / "again.ckpt")
    checks["checkpoint round trip"] &= param_hash(load_checkpoint(tmp_path / "again.ckpt")) == param_hash(G_T)

    frozen_before = (param_hash(G_T), param_hash(D_T))
    zero_kd = cfg.with_overrides({"weights.beta1": 0.0, "weights.gamma1": 0.0,
                                  "weights.beta2": 0.0, "weights.gamma2": 0.0})
    kd = distill(zero_kd, (G_T, D_T), desk_dataset)
    scratch = train_student_scratch(cfg, desk_dataset)
    checks["ablation identity"] = (kd.trace == scratch.trace
                                   and param_hash(kd.generator) == param_hash(scratch.generator))
    full = distill(cfg, (G_T, D_T), desk_dataset)
    checks["teacher frozenness"] = (param_hash(G_T), param_hash(D_T)) == frozen_before and len(full.trace) > 0

    G_S = build_unet_generator(cfg.student, 10)
    D_S = build_patch_discriminator(cfg.discriminator, 11)
    models = {"G_S": G_S, "D_S": D_S, "G_T": G_T, "D_T": D_T}
    opts = {"G_S": make_optimizer(G_S, cfg), "D_S": make_optimizer(D_S, cfg)}
    batch = next(batch_iterator(desk_dataset, cfg.batch_size, 0))
    with torch.no_grad():
        z_T = G_T(batch.x)
    before = {k: param_hash(m) for k, m in models.items()}
    terms = generator_terms(cfg.effective_weights(), D_S, batch.x, G_S(batch.x), y=batch.y, z_T=z_T, D_T=D_T)
    update_step(models, opts, terms["total"], "G_S")
    after = {k: param_hash(m) for k, m in models.items()}
    checks["parameter isolation"] = after["G_S"] != before["G_S"] and all(
        after[k] == before[k] for k in ("D_S", "G_T", "D_T"))

    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 300
    verdict(5, "training-loop fidelity on a 2-epoch desk run", ok,
            ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()) + f"; {elapsed:.0f}s")


# -- 6. end-to-end ordering ----------------------------------------------

@pytest.mark.slow
def test_criterion_6_desk_ordering(desk_runs):
    runs = desk_runs["runs"]
    mean = {role: sum(runs[s][role][1].per_pixel_acc for s in DESK_SEEDS) / len(DESK_SEEDS)
            for role in ("teacher", "distill", "scratch")}
    per_seed = "; ".join(f"seed {s}: " + "/".join(f"{runs[s][r][1].per_pixel_acc:.4f}"
                                                    for r in ("teacher", "distill", "scratch")) for s in DESK_SEEDS)
    minutes = desk_runs["cpu_seconds"] / 60
    ok = mean["teacher"] >= mean["distill"] >= mean["scratch"] and minutes <= 45
    verdict(6, "teacher >= distilled >= scratch (mean per-pixel accuracy, 3 seeds)", ok,
            f"means {mean['teacher']:.4f} >= {mean['distill']:.4f} >= {mean['scratch']:.4f} "
            f"(teacher/distilled/scratch: {per_seed}); {minutes:.1f} CPU min")


# -- 7. sample bound -----------------------------------------------------

def test_criterion_7_sample_bound():
    t0 = time.perf_counter()
    values = (sample_bound(2, 1), sample_bound(4, 1))
    cfg = tiny_config()
    ds = generate_dataset(cfg.dataset)
    G_T = build_unet_generator(cfg.teacher, 0)
    D_T = build_patch_discriminator(cfg.discriminator, 1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        distill(cfg, (G_T, D_T), ds, max_steps=0)
    warned = [w for w in caught if issubclass(w.category, SampleBoundWarning)]
    elapsed = time.perf_counter() - t0
    ok = values[0] == 16 and values[1] == 256 and len(warned) == 1 and elapsed < 1.0
    verdict(7, "sample bound utility", ok,
            f"bound(ratio 2) = {values[0]}, bound(ratio 4) = {values[1]}, "
            f"warning {'emitted' if warned else 'missing'} for n_train = {cfg.dataset.n_train}; {elapsed:.3f}s")
