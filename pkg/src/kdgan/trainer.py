"""Alternating minimax training: pix2pix teacher, scratch student, and distillation.

All three procedures share one loop. Teacher and scratch training are the
distillation step with every knowledge-distillation weight at zero and no
teacher attached, so a distillation run whose KD weights are all zero
reproduces the scratch run bit for bit.

Randomness comes only from ``config.seed``: initial weights, the per-epoch
data permutation and the per-epoch dropout stream are all derived from it,
which also makes resuming at an epoch boundary exact.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from .config import ExperimentConfig
from .data import PairedDataset, batch_iterator, epoch_seed, iterate_in_order
from .errors import ConfigError, DivergenceError, InvariantViolation, MissingArtifactError, NumericError
from .evaluation import MetricsRecord, sample_bound
from .losses import LossWeights, discriminator_terms, generator_terms, supervised_l1
from .models import (GeneratorSpec, PatchDiscriminator, UNetGenerator, build_patch_discriminator,
                     build_unet_generator, count_params, load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

D_ADV_SCALE = 0.5  # adversarial D objective is halved
_GEN_INIT, _DISC_INIT, _DROPOUT = 0, 1, 2


class SampleBoundWarning(UserWarning):
    """Training set smaller than the (p_T / p_S)^4 bound for distillation."""


def _seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), 7919, stream]).generate_state(1)[0])


def _dropout_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(seed), 7919, _DROPOUT, int(epoch)]).generate_state(1)[0])


# -- optimizer -----------------------------------------------------------

def make_optimizer(model: nn.Module, config: ExperimentConfig) -> torch.optim.Adam:
    o = config.optimizer
    return torch.optim.Adam(model.parameters(), lr=o.lr, betas=(o.beta1, o.beta2), foreach=False)


def update_step(models: dict, optimizers: dict, loss: torch.Tensor, which: str) -> None:
    """Back-propagate ``loss`` and apply one Adam step to ``models[which]`` only.

    Every other model in ``models`` must receive no gradient; if one does,
    the loss was built without the required detachment and
    ``InvariantViolation`` is raised before any parameter changes.
    """
    for m in models.values():
        for p in m.parameters():
            p.grad = None
    loss.backward()
    for name, m in models.items():
        if name != which and any(p.grad is not None for p in m.parameters()):
            raise InvariantViolation(f"gradient reached frozen model {name!r} during {which!r} update")
    optimizers[which].step()


def _save_optimizer(opt: torch.optim.Optimizer, path: Path) -> None:
    arrays = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            arrays[f"{idx}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def _load_optimizer(opt: torch.optim.Optimizer, path: Path) -> None:
    state: dict = {}
    with np.load(path) as z:
        for name in z.files:
            idx, key = name.split(".", 1)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(z[name].copy())
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


# -- run bookkeeping -----------------------------------------------------

@dataclass
class TrainResult:
    generator: UNetGenerator
    discriminator: PatchDiscriminator
    trace: list = field(default_factory=list)    # dicts: step, epoch, term, value
    history: list = field(default_factory=list)  # one dict per completed epoch
    run_dir: Optional[Path] = None
    update_log: list = field(default_factory=list)  # "G"/"D" in application order
    best_epoch: Optional[int] = None  # set under early stopping: the epoch whose weights were restored

    @property
    def epochs_completed(self) -> int:
        return len(self.history)


def checkpoint_path(run_dir: Union[str, Path], role: str, epoch: int) -> Path:
    return Path(run_dir) / f"{role}_{epoch}.ckpt"


def latest_epoch(run_dir: Union[str, Path], roles: tuple) -> int:
    """Highest epoch for which generator, discriminator and optimizer checkpoints all exist."""
    run_dir = Path(run_dir)
    epochs = set()
    for p in run_dir.glob(f"{roles[0]}_*.ckpt"):
        try:
            epochs.add(int(p.stem.rsplit("_", 1)[1]))
        except ValueError:
            continue
    done = [e for e in epochs
            if checkpoint_path(run_dir, roles[1], e).exists() and checkpoint_path(run_dir, "optimizer_D", e).exists()]
    return max(done, default=0)


def read_trace(path: Union[str, Path]) -> list:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(l) for l in path.read_text().splitlines() if l.strip()]


@torch.no_grad()
def validation_l1(generator: nn.Module, dataset: PairedDataset, split: str = "val") -> float:
    was = generator.training
    generator.eval()
    total, n = 0.0, 0
    for b in iterate_in_order(dataset, split, 64):
        total += float(supervised_l1(b.y, generator(b.x))) * b.y.numel()
        n += b.y.numel()
    generator.train(was)
    return total / n


# -- the training loop ---------------------------------------------------

def _train(config: ExperimentConfig, dataset: PairedDataset, gen_spec: GeneratorSpec, roles: tuple,
           weights: LossWeights, epochs: int, teacher: Optional[tuple] = None,
           run_dir: Optional[Union[str, Path]] = None, resume: bool = False,
           on_epoch_end: Optional[Callable] = None, max_steps: Optional[int] = None) -> TrainResult:
    config.validate()
    if dataset.spec != config.dataset:
        raise ConfigError("dataset does not match config.dataset")
    G = build_unet_generator(gen_spec, _seed(config.seed, _GEN_INIT), role=roles[0])
    D = build_patch_discriminator(config.discriminator, _seed(config.seed, _DISC_INIT), role=roles[1])
    G.train()
    D.train()
    opts = {"G": make_optimizer(G, config), "D": make_optimizer(D, config)}
    models = {"G": G, "D": D}
    G_T = D_T = None
    if teacher is not None:
        G_T, D_T = teacher
        G_T.eval().requires_grad_(False)
        D_T.eval().requires_grad_(False)
        models.update({"G_T": G_T, "D_T": D_T})

    result = TrainResult(G, D)
    start_epoch = 0
    trace_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        result.run_dir = run_dir
        trace_file = run_dir / "trace.jsonl"
        if resume:
            start_epoch = latest_epoch(run_dir, roles)
        if start_epoch:
            G.load_state_dict(load_checkpoint(checkpoint_path(run_dir, roles[0], start_epoch)).state_dict())
            D.load_state_dict(load_checkpoint(checkpoint_path(run_dir, roles[1], start_epoch)).state_dict())
            _load_optimizer(opts["G"], checkpoint_path(run_dir, "optimizer_G", start_epoch))
            _load_optimizer(opts["D"], checkpoint_path(run_dir, "optimizer_D", start_epoch))
            result.trace = [r for r in read_trace(trace_file) if r["epoch"] <= start_epoch]
            hist = run_dir / "history.jsonl"
            result.history = [r for r in read_trace(hist) if r["epoch"] <= start_epoch]
            hist.write_text("".join(json.dumps(r) + "\n" for r in result.history))
        else:
            (run_dir / "history.jsonl").write_text("")
        trace_file.write_text("".join(json.dumps(r) + "\n" for r in result.trace))

    step = len({r["step"] for r in result.trace})
    best, stale, best_state = -np.inf, 0, None
    for r in result.history:
        if "per_pixel_acc" in r:
            if r["per_pixel_acc"] > best:
                best, stale, result.best_epoch = r["per_pixel_acc"], 0, r["epoch"]
            else:
                stale += 1
    for epoch in range(start_epoch + 1, epochs + 1):
        if config.early_stop_patience and stale >= config.early_stop_patience:
            break  # resumed a run that had already stopped
        torch.manual_seed(_dropout_seed(config.seed, epoch))
        epoch_rows = []
        for batch in batch_iterator(dataset, config.batch_size, epoch_seed(config.seed, epoch)):
            if max_steps is not None and step >= max_steps:
                break
            rows = _train_step(config, weights, models, opts, batch, result.update_log)
            step += 1
            for term, value in rows:
                epoch_rows.append({"step": step, "epoch": epoch, "term": term, "value": value})
        result.trace.extend(epoch_rows)
        if trace_file is not None:
            with open(trace_file, "a") as fh:
                fh.writelines(json.dumps(r) + "\n" for r in epoch_rows)

        record = {"epoch": epoch, "val_l1": validation_l1(G, dataset)}
        if on_epoch_end is not None:
            metrics = on_epoch_end(epoch, G)
            if isinstance(metrics, MetricsRecord):
                record["per_pixel_acc"] = metrics.per_pixel_acc
        result.history.append(record)
        if run_dir is not None:
            save_checkpoint(G, checkpoint_path(run_dir, roles[0], epoch))
            save_checkpoint(D, checkpoint_path(run_dir, roles[1], epoch))
            _save_optimizer(opts["G"], checkpoint_path(run_dir, "optimizer_G", epoch))
            # written last: its presence marks the epoch as complete
            _save_optimizer(opts["D"], checkpoint_path(run_dir, "optimizer_D", epoch))
            with open(run_dir / "history.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
        log.info("%s epoch %d/%d val_l1 %.4f", roles[0], epoch, epochs, record["val_l1"])

        if config.early_stop_patience and "per_pixel_acc" in record:
            if record["per_pixel_acc"] > best:
                best, stale, result.best_epoch = record["per_pixel_acc"], 0, epoch
                best_state = (copy.deepcopy(G.state_dict()), copy.deepcopy(D.state_dict()))
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    log.info("early stop at epoch %d", epoch)
                    break
        if max_steps is not None and step >= max_steps:
            break

    if config.early_stop_patience and result.best_epoch is not None:
        _restore_best(result, best_state, roles)
    return result


def _restore_best(result: TrainResult, best_state: Optional[tuple], roles: tuple) -> None:
    """Load the best-validation weights into the returned models and record the choice in the run directory."""
    if best_state is None:  # the best epoch predates a resume: read it back from disk
        best_state = tuple(load_checkpoint(checkpoint_path(result.run_dir, r, result.best_epoch)).state_dict()
                           for r in roles)
    result.generator.load_state_dict(best_state[0])
    result.discriminator.load_state_dict(best_state[1])
    log.info("%s: restored epoch %d (best validation per-pixel accuracy)", roles[0], result.best_epoch)
    if result.run_dir is not None:
        (result.run_dir / "selected.json").write_text(json.dumps({"epoch": result.best_epoch}))


def selected_epoch(run_dir: Union[str, Path], roles: tuple) -> int:
    """Epoch whose checkpoints represent the run: the restored best epoch if any, else the latest complete one."""
    sel = Path(run_dir) / "selected.json"
    if sel.exists():
        return int(json.loads(sel.read_text())["epoch"])
    return latest_epoch(run_dir, roles)


def _train_step(config: ExperimentConfig, weights: LossWeights, models: dict, opts: dict, batch,
                update_log: list) -> list:
    G, D = models["G"], models["D"]
    G_T, D_T = models.get("G_T"), models.get("D_T")
    x, y = batch.x, batch.y
    z_S = G(x)
    z_T = None
    if G_T is not None:
        with torch.no_grad():
            z_T = G_T(x)
    rows = []

    def g_step():
        terms = generator_terms(weights, D, x, z_S, y=y, z_T=z_T, D_T=D_T, tap_T=config.tap_T)
        _guard(terms, "G")
        update_step(models, opts, terms["total"], "G")
        update_log.append("G")
        rows.extend((f"G/{k}", float(v.detach())) for k, v in terms.items())

    def d_step():
        terms = discriminator_terms(weights, D, x, y, z_S, z_T=z_T, tap_S=config.discriminator.tap,
                                    adv_scale=D_ADV_SCALE)
        _guard(terms, "D")
        update_step(models, opts, terms["total"], "D")
        update_log.append("D")
        rows.extend((f"D/{k}", float(v.detach())) for k, v in terms.items())

    try:
        if config.update_order == "gd":
            g_step()
            d_step()
        else:
            d_step()
            g_step()
    except NumericError as exc:
        raise DivergenceError(str(exc)) from exc
    return rows


def _guard(terms: dict, which: str) -> None:
    if not torch.isfinite(terms["total"]):
        values = ", ".join(f"{k}={float(v.detach())}" for k, v in terms.items())
        raise DivergenceError(f"non-finite {which} loss: {values}")


# -- public entry points -------------------------------------------------

def train_teacher(config: ExperimentConfig, dataset: PairedDataset, run_dir=None, resume: bool = False,
                  on_epoch_end=None, max_steps=None) -> TrainResult:
    """pix2pix training of the wide generator/discriminator pair."""
    return _train(config, dataset, config.teacher, ("teacher_generator", "teacher_discriminator"),
                  config.kd_disabled(), config.teacher_epochs or config.epochs,
                  run_dir=run_dir, resume=resume, on_epoch_end=on_epoch_end, max_steps=max_steps)


def train_student_scratch(config: ExperimentConfig, dataset: PairedDataset, run_dir=None, resume: bool = False,
                          on_epoch_end=None, max_steps=None) -> TrainResult:
    """pix2pix training of the narrow generator with no teacher signal."""
    return _train(config, dataset, config.student, ("student_generator", "student_discriminator"),
                  config.kd_disabled(), config.epochs,
                  run_dir=run_dir, resume=resume, on_epoch_end=on_epoch_end, max_steps=max_steps)


def load_teacher(run_dir: Union[str, Path], epoch: Optional[int] = None) -> tuple:
    run_dir = Path(run_dir)
    roles = ("teacher_generator", "teacher_discriminator")
    epoch = epoch or selected_epoch(run_dir, roles)
    if not epoch:
        raise MissingArtifactError(f"no teacher checkpoints in {run_dir}")
    return tuple(load_checkpoint(checkpoint_path(run_dir, r, epoch)) for r in roles)


def distill(config: ExperimentConfig, teacher, dataset: PairedDataset, run_dir=None, resume: bool = False,
            on_epoch_end=None, max_steps=None) -> TrainResult:
    """Train a fresh student GAN under teacher supervision.

    ``teacher`` is ``(G_T, D_T)`` or a directory of teacher checkpoints. Per
    batch the student generator is updated on the adversarial, supervised,
    pixel-KD and perceptual-KD terms, then the student discriminator on the
    adversarial, teacher-as-real and triplet terms (``update_order="gd"``).
    The teacher is never modified.
    """
    if isinstance(teacher, (str, Path)):
        teacher = load_teacher(teacher)
    G_T, D_T = teacher
    s, t = config.student, G_T.spec
    if (s.in_channels, s.out_channels) != (t.in_channels, t.out_channels):
        raise ConfigError(f"teacher maps {t.in_channels}->{t.out_channels} channels, "
                          f"student {s.in_channels}->{s.out_channels}")
    if D_T.spec.in_channels != config.discriminator.in_channels:
        raise ConfigError("teacher discriminator input channels differ from config.discriminator")
    config.validate()

    p_T = count_params(G_T)
    p_S = count_params(UNetGenerator(config.student, device="meta"))
    bound = sample_bound(p_T, p_S)
    if config.dataset.n_train < bound:
        msg = (f"n_train={config.dataset.n_train} is below the (p_T/p_S)^4 = {bound:.1f} sample bound "
               f"(p_T={p_T}, p_S={p_S})")
        log.warning(msg)
        warnings.warn(msg, SampleBoundWarning, stacklevel=2)

    return _train(config, dataset, config.student, ("student_generator", "student_discriminator"),
                  config.effective_weights(), config.epochs, teacher=(G_T, D_T),
                  run_dir=run_dir, resume=resume, on_epoch_end=on_epoch_end, max_steps=max_steps)


def param_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
