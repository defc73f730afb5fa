"""Command-line front end.

State lives under ``$KDGAN_HOME`` (default ``./kdgan_state``)::

    datasets/<name>/{train,val,test}.kds, preview.png, manifest.json
    runs/<run_id>/   checkpoints, trace.jsonl, history.jsonl, metrics.log,
                     config.yaml, manifest.json
    segmenters/      cached reference segmenters, keyed by dataset hash
    reports/<name>/  grids and comparison tables

Every command refuses to overwrite an existing dataset/run/report unless
``--force`` is given. Errors exit with the code of their exception class
(2 config, 3 data, 4 comparability, 5 divergence, 6 segmenter gate, 7 exists).
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from .config import ExperimentConfig, load_config, save_config
from .data import (DatasetSpec, PairedDataset, colorize_labels, dequantize, dump_preview, generate_dataset,
                   load_dataset, one_hot_encode, paint_palette, save_dataset)
from .errors import (ComparabilityError, ConfigError, KDGANError, MissingArtifactError, RunExistsError,
                     SegmenterGateError)
from .evaluation import (ABLATION_ROWS, MetricsRecord, ablation_report, append_metrics, compare_runs,
                         evaluate_generator, read_metrics, train_reference_segmenter)
from .models import (DiscriminatorSpec, GeneratorSpec, PatchDiscriminator, UNetGenerator, count_flops,
                     count_params, load_checkpoint)
from .trainer import (checkpoint_path, distill, latest_epoch, load_teacher, selected_epoch, train_student_scratch,
                      train_teacher)

log = logging.getLogger("kdgan")

ROLE_NAMES = {
    "teacher": ("teacher_generator", "teacher_discriminator"),
    "scratch": ("student_generator", "student_discriminator"),
    "distill": ("student_generator", "student_discriminator"),
}


# -- state directory and manifests --------------------------------------

def state_root() -> Path:
    return Path(os.environ.get("KDGAN_HOME", "kdgan_state"))


def dataset_dir(name: str) -> Path:
    return state_root() / "datasets" / name


def run_dir(run_id: str) -> Path:
    return state_root() / "runs" / run_id


def file_hash(path: Path) -> str:
    """Git-style blob hash: sha1 over ``b"blob <size>\\0" + content``."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(directory: Path, **fields) -> Path:
    """Record every file in ``directory`` (except the manifest) with its content hash."""
    artifacts = {p.relative_to(directory).as_posix(): file_hash(p)
                 for p in sorted(directory.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    manifest = dict(fields, artifacts=artifacts, finished=time.strftime("%Y-%m-%dT%H:%M:%S"))
    path = directory / "manifest.json"
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path)
    return path


def read_manifest(directory: Path) -> dict:
    path = directory / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"no manifest at {path}; was the command that creates it run to completion?")
    return json.loads(path.read_text())


def verify_manifest(directory: Path) -> list[str]:
    """Names of artifacts that are missing or whose hash differs from the manifest."""
    bad = []
    for rel, digest in read_manifest(directory).get("artifacts", {}).items():
        p = directory / rel
        if not p.exists() or file_hash(p) != digest:
            bad.append(rel)
    return bad


def _claim(directory: Path, force: bool, what: str) -> None:
    if directory.exists():
        if not force:
            raise RunExistsError(f"{what} {directory} already exists; pass --force to overwrite")
        shutil.rmtree(directory)


# -- config handling -----------------------------------------------------

def parse_overrides(items: Optional[list]) -> dict:
    """``["weights.beta1=0", "epochs=3"]`` -> ``{"weights.beta1": 0, "epochs": 3}``."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def effective_config(args, dataset: Optional[PairedDataset] = None) -> ExperimentConfig:
    config = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    config = config.with_overrides(parse_overrides(getattr(args, "set", None)))
    if dataset is not None and dataset.spec != config.dataset:
        config = dataclasses.replace(config, dataset=dataset.spec)
    return config.validate()


def _load_named_dataset(name: str) -> PairedDataset:
    d = dataset_dir(name)
    if not (d / "manifest.json").exists():
        raise MissingArtifactError(f"dataset {name!r} not found under {d}; create it with `kdgan dataset --name {name}`")
    return load_dataset(d)


def _segmenter(dataset: PairedDataset, epochs: int = 8):
    seg = train_reference_segmenter(dataset, epochs=epochs, cache_dir=state_root() / "segmenters")
    log.info("reference segmenter val accuracy %.4f", seg.val_accuracy)
    return seg


# -- dataset -------------------------------------------------------------

def cmd_dataset(args) -> int:
    spec = DatasetSpec(seed=args.seed, n_classes=args.n_classes, image_size=args.image_size,
                       n_train=args.n_train, n_val=args.n_val, n_test=args.n_test, texture=args.texture).validate()
    out = dataset_dir(args.name)
    _claim(out, args.force, "dataset")
    ds = generate_dataset(spec)
    save_dataset(ds, out)
    if args.preview:
        dump_preview(ds, out / "preview.png", n_pairs=max(8, args.preview_pairs))
    if spec.texture == "flat":
        # palette oracle: a flat dataset is its palette painting exactly
        s = ds.splits["train"]
        worst = max(float(np.abs(paint_palette(s.labels[i], spec.n_classes) - dequantize(s.photos[i])).sum())
                    for i in range(len(s)))
        print(f"palette oracle l1: {worst:g}")
    write_manifest(out, kind="dataset", name=args.name, command=" ".join(sys.argv), spec=dataclasses.asdict(spec),
                   dataset_hash=ds.content_hash())
    print(f"dataset {args.name}: hash {ds.content_hash()} -> {out}")
    return 0


# -- train ---------------------------------------------------------------

def _teacher_for(teacher_id: Optional[str], dataset: PairedDataset) -> tuple:
    if not teacher_id:
        raise ConfigError("distill needs --teacher RUN_ID (a completed `kdgan train teacher` run)")
    tdir = run_dir(teacher_id)
    manifest = read_manifest(tdir)
    if manifest.get("role") != "teacher":
        raise ConfigError(f"run {teacher_id!r} is a {manifest.get('role')} run, not a teacher")
    if manifest.get("dataset_hash") != dataset.content_hash():
        raise ComparabilityError(f"teacher {teacher_id!r} was trained on a different dataset")
    return load_teacher(tdir)


def _run_training(role: str, config: ExperimentConfig, dataset: PairedDataset, out: Path,
                  teacher_id: Optional[str], resume: bool, command: str, segmenter_epochs: int = 8) -> MetricsRecord:
    """Train one run into ``out`` and write its metrics and manifest.

    Prerequisites (teacher run, segmenter gate) are checked before ``out`` is
    created, so a refused command leaves no partial run behind.
    """
    teacher = _teacher_for(teacher_id, dataset) if role == "distill" else None
    seg = _segmenter(dataset, segmenter_epochs)
    if not seg.gate_passed:
        raise SegmenterGateError(f"reference segmenter reaches only {seg.val_accuracy:.4f} on real val photos; "
                                 f"use more training data or --segmenter-epochs")
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.yaml")
    metrics_log = out / "metrics.log"
    start = latest_epoch(out, ROLE_NAMES[role]) if resume else 0
    kept = [r for r in read_metrics(metrics_log) if r.label == "val" and r.epoch <= start] if resume else []
    metrics_log.write_text("".join(r.to_json() + "\n" for r in kept))
    meta = {"config_hash": config.hash()}

    def on_epoch_end(epoch, G):
        rec = evaluate_generator(G, seg, dataset, "val", epoch=epoch, label="val", **meta)
        append_metrics(rec, metrics_log)
        log.info("%s epoch %d val per-pixel %.4f", role, epoch, rec.per_pixel_acc)
        return rec

    kwargs = dict(run_dir=out, resume=resume, on_epoch_end=on_epoch_end)
    if role == "teacher":
        result = train_teacher(config, dataset, **kwargs)
    elif role == "scratch":
        result = train_student_scratch(config, dataset, **kwargs)
    else:
        result = distill(config, teacher, dataset, **kwargs)

    test = evaluate_generator(result.generator, seg, dataset, "test", epoch=result.epochs_completed,
                              label="test", **meta)
    append_metrics(test, metrics_log)
    write_manifest(out, kind="run", run_id=out.name, role=role, command=command, config_hash=config.hash(),
                   config=config.to_dict(), dataset_hash=dataset.content_hash(), teacher=teacher_id,
                   epochs_completed=result.epochs_completed, selected_epoch=result.best_epoch or result.epochs_completed,
                   segmenter_val_accuracy=seg.val_accuracy,
                   status="complete")
    return test


def cmd_train(args) -> int:
    dataset = _load_named_dataset(args.dataset)
    config = effective_config(args, dataset)
    out = run_dir(args.run_id)
    if args.role == "distill":
        _teacher_for(args.teacher, dataset)
    if not args.resume:
        _claim(out, args.force, "run")
    test = _run_training(args.role, config, dataset, out, args.teacher, args.resume, " ".join(sys.argv),
                         args.segmenter_epochs)
    print(f"{args.role} run {args.run_id}: test per-pixel {test.per_pixel_acc:.4f} "
          f"per-class {test.per_class_acc:.4f} IoU {test.mean_iou:.4f}")
    return 0


def final_test_record(run_id: str) -> MetricsRecord:
    tests = [r for r in read_metrics(run_dir(run_id) / "metrics.log") if r.label == "test"]
    if not tests:
        raise MissingArtifactError(f"run {run_id!r} has no test metrics; has it finished?")
    return tests[-1]


# -- ablate --------------------------------------------------------------

def _mask_slug(label: str) -> str:
    return label.replace("+", "_").replace("L_", "")


def _ablation_job(job: dict) -> tuple:
    if job.get("home"):
        os.environ["KDGAN_HOME"] = job["home"]
        torch.set_num_threads(1)
    config = ExperimentConfig.from_dict(job["config"])
    dataset = _load_named_dataset(job["dataset"])
    out = run_dir(job["run_id"])
    _run_training("distill", config, dataset, out, job["teacher"], resume=out.exists(), command=job["command"],
                  segmenter_epochs=job["segmenter_epochs"])
    return job["run_id"], final_test_record(job["run_id"])


def cmd_ablate(args) -> int:
    dataset = _load_named_dataset(args.dataset)
    base = effective_config(args, dataset)
    _teacher_for(args.teacher, dataset)  # actionable error if the teacher is missing
    jobs, done = [], {}
    for label, mask in ABLATION_ROWS:
        for seed in range(args.seeds):
            run_id = f"{args.prefix}_{_mask_slug(label)}_s{seed}"
            config = dataclasses.replace(base, ablation_mask=frozenset(mask), seed=base.seed + seed)
            out = run_dir(run_id)
            if (out / "manifest.json").exists():
                m = read_manifest(out)
                if m.get("status") == "complete" and m.get("config_hash") == config.hash() and not verify_manifest(out):
                    log.info("ablate: %s already complete", run_id)
                    done[run_id] = (mask, final_test_record(run_id))
                    continue
                if not args.force:
                    raise RunExistsError(f"run {run_id} exists with a different configuration; pass --force")
                shutil.rmtree(out)
            jobs.append({"run_id": run_id, "mask": mask, "config": config.to_dict(), "dataset": args.dataset,
                         "teacher": args.teacher, "command": " ".join(sys.argv), "home": None,
                         "segmenter_epochs": args.segmenter_epochs})

    if args.parallel > 1 and jobs:
        for j in jobs:
            j["home"] = str(state_root().resolve())
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for job, (run_id, rec) in zip(jobs, pool.map(_ablation_job, jobs)):
                done[run_id] = (job["mask"], rec)
    else:
        for job in jobs:
            run_id, rec = _ablation_job(job)
            done[run_id] = (job["mask"], rec)

    by_mask: dict = {}
    for run_id in sorted(done):
        mask, rec = done[run_id]
        by_mask.setdefault(mask, []).append(rec)
    report = ablation_report(by_mask)
    out = state_root() / "reports" / args.prefix
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(report.to_text() + "\n")
    (out / "ablation.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(report.to_text())
    return 0


# -- report --------------------------------------------------------------

GRID_COLUMNS = ("Input", "Ground truth", "Scratch", "Vanilla-KD", "Ours", "Teacher")
VANILLA_ZERO = ("gamma1", "beta2", "gamma2")


def _generator_of(run_id: str) -> UNetGenerator:
    d = run_dir(run_id)
    m = read_manifest(d)
    roles = ROLE_NAMES[m["role"]]
    epoch = selected_epoch(d, roles)
    if not epoch:
        raise MissingArtifactError(f"run {run_id!r} has no checkpoints")
    return load_checkpoint(checkpoint_path(d, roles[0], epoch)).eval()


def check_vanilla_run(run_id: str) -> None:
    """The vanilla-KD column must come from a distill run with only the pixel KD term active."""
    m = read_manifest(run_dir(run_id))
    config = ExperimentConfig.from_dict(m["config"])
    w = config.effective_weights()
    if m.get("role") != "distill" or any(getattr(w, k) != 0 for k in VANILLA_ZERO):
        raise ConfigError(f"run {run_id!r} is not a vanilla-KD run (needs role distill and "
                          f"{', '.join(VANILLA_ZERO)} = 0)")


def render_grid(dataset: PairedDataset, generators: list, sample_index: list, split: str = "test") -> np.ndarray:
    """uint8 (rows*(n+pad)+pad, 6*(n+pad)+pad, 3) sheet: input, ground truth, then one column per generator."""
    s = dataset.splits[split]
    k, n, pad = dataset.spec.n_classes, dataset.spec.image_size, 2
    cols = 2 + len(generators)
    sheet = np.full((len(sample_index) * (n + pad) + pad, cols * (n + pad) + pad, 3), 255, dtype=np.uint8)
    labels = torch.from_numpy(s.labels[sample_index].astype(np.int64))
    x = one_hot_encode(labels, k)
    cells = [np.stack([colorize_labels(s.labels[i], k) for i in sample_index]),
             s.photos[sample_index].transpose(0, 2, 3, 1)]
    with torch.no_grad():
        for G in generators:
            out = ((G.eval()(x).clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
            cells.append(out.permute(0, 2, 3, 1).numpy())
    for c, block in enumerate(cells):
        for r in range(len(sample_index)):
            top, left = pad + r * (n + pad), pad + c * (n + pad)
            sheet[top:top + n, left:left + n] = block[r]
    return sheet


def cmd_report(args) -> int:
    from PIL import Image

    ids = {"Scratch": args.scratch, "Vanilla-KD": args.vanilla, "Ours": args.ours, "Teacher": args.teacher}
    manifests = {k: read_manifest(run_dir(v)) for k, v in ids.items()}
    hashes = {m["dataset_hash"] for m in manifests.values()}
    if len(hashes) != 1:
        raise ComparabilityError(f"runs span {len(hashes)} different datasets: {sorted(hashes)}")
    check_vanilla_run(args.vanilla)
    dataset = _load_named_dataset(args.dataset)
    if dataset.content_hash() not in hashes:
        raise ComparabilityError(f"dataset {args.dataset!r} is not the one the runs were trained on")

    out = state_root() / "reports" / args.name
    _claim(out, args.force, "report")
    out.mkdir(parents=True)
    n_test = len(dataset.splits["test"])
    sample_index = args.samples if args.samples else list(range(min(args.rows, n_test)))
    if any(not 0 <= i < n_test for i in sample_index):
        raise ConfigError(f"sample indices must lie in [0, {n_test})")
    sheet = render_grid(dataset, [_generator_of(ids[c]) for c in GRID_COLUMNS[2:]], sample_index)
    Image.fromarray(sheet).save(out / "grid.png", format="PNG")

    records = [final_test_record(ids[c]) for c in GRID_COLUMNS[2:]]
    table = compare_runs(records, [f"{c} ({ids[c]})" for c in GRID_COLUMNS[2:]])
    text = ("columns: " + " | ".join(GRID_COLUMNS) + "\n"
            "Vanilla-KD is this framework with only the pixel KD term enabled.\n\n" + table.to_text() + "\n")
    (out / "comparison.txt").write_text(text)
    (out / "comparison.json").write_text(json.dumps(table.to_dict(), indent=2))
    write_manifest(out, kind="report", runs=ids, dataset_hash=hashes.pop(), sample_index=sample_index)
    print(text)
    return 0


# -- count ---------------------------------------------------------------

def count_table(rows: list) -> str:
    """rows: (label, model, input_shape); FLOP ratios are relative to the first row."""
    lines = [f"{'model':<28}{'params':>14}{'FLOPs':>12}{'ratio':>8}", "-" * 62]
    base = None
    for label, model, shape in rows:
        p, f = count_params(model), count_flops(model, shape)
        base = base or f
        lines.append(f"{label:<28}{p / 1e6:>13.2f}M{f / 1e9:>11.3f}G{base / f:>8.2f}")
    return "\n".join(lines)


def cmd_count(args) -> int:
    if args.full_scale:
        rows = [(f"U-Net width {w}", UNetGenerator(GeneratorSpec(3, 3, w, 8), device="meta"), (3, 256, 256))
                for w in (64, 32, 16)]
        rows.append(("PatchGAN width 64", PatchDiscriminator(DiscriminatorSpec(6, 64, 3), device="meta"),
                     (6, 256, 256)))
    else:
        config = effective_config(args)
        n = config.dataset.image_size
        rows = [("teacher generator", UNetGenerator(config.teacher, device="meta"), (config.teacher.in_channels, n, n)),
                ("student generator", UNetGenerator(config.student, device="meta"), (config.student.in_channels, n, n)),
                ("discriminator", PatchDiscriminator(config.discriminator, device="meta"),
                 (config.discriminator.in_channels, n, n))]
    print(count_table(rows))
    return 0


# -- entry point ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kdgan", description="GAN teacher/student distillation experiments")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", help="YAML/JSON experiment config (defaults used if omitted)")
        p.add_argument("--segmenter-epochs", type=int, default=8,
                       help="training epochs of the reference segmenter; only used the first time a dataset is "
                            "scored, later runs reuse the cached segmenter")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. --set weights.beta1=0 (repeatable)")

    p = sub.add_parser("dataset", help="generate the synthetic labels->photo dataset")
    d = DatasetSpec()
    p.add_argument("--name", default="desk")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--n-classes", type=int, default=d.n_classes)
    p.add_argument("--image-size", type=int, default=d.image_size)
    p.add_argument("--n-train", type=int, default=d.n_train)
    p.add_argument("--n-val", type=int, default=d.n_val)
    p.add_argument("--n-test", type=int, default=d.n_test)
    p.add_argument("--texture", choices=("flat", "noisy", "textured"), default=d.texture)
    p.add_argument("--preview", action="store_true", help="write preview.png contact sheet")
    p.add_argument("--preview-pairs", type=int, default=8)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train a teacher, a scratch student, or a distilled student")
    p.add_argument("role", choices=("teacher", "scratch", "distill"))
    p.add_argument("--run-id", required=True)
    p.add_argument("--dataset", default="desk")
    p.add_argument("--teacher", help="teacher run id (distill only)")
    p.add_argument("--resume", action="store_true", help="continue from the last complete epoch")
    p.add_argument("--force", action="store_true")
    config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the six-row loss ablation matrix")
    p.add_argument("--teacher", required=True)
    p.add_argument("--dataset", default="desk")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--prefix", default="ablate")
    p.add_argument("--parallel", type=int, default=1, help="number of concurrent runs (default sequential)")
    p.add_argument("--force", action="store_true")
    config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="qualitative grid and comparison table for four runs")
    p.add_argument("--name", default="report")
    p.add_argument("--dataset", default="desk")
    p.add_argument("--scratch", required=True)
    p.add_argument("--vanilla", required=True, help="distill run with gamma1 = beta2 = gamma2 = 0")
    p.add_argument("--ours", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--samples", type=int, nargs="*", help="test-split indices (overrides --rows)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("count", help="parameter and FLOP table")
    p.add_argument("--full-scale", action="store_true", help="256x256 generators of width 64/32/16")
    config_flags(p)
    p.set_defaults(func=cmd_count)
    return ap


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except KDGANError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
