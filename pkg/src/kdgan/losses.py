"""Loss terms for pix2pix training and teacher-student GAN distillation.

All functions return scalar tensors. Detachment is done here, not by the
caller: teacher outputs and teacher features are always constants, and the
discriminator-side losses treat every generator output as a constant. The
generator-side losses evaluate discriminators with detached parameters
(``frozen=True``), so their gradients reach only the generator.

Reductions are means over every element (batch x channels x pixels), which
keeps magnitudes independent of resolution.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError
from .models import PatchDiscriminator, forward_features


@dataclass(frozen=True)
class LossWeights:
    lambda_sup: float = 1.0    # supervised L1 in the pix2pix objective
    gamma_g: float = 1.0       # perceptual weight inside the generator KD loss
    beta1: float = 1.0         # teacher-student pixel L1
    gamma1: float = 1.0        # teacher-discriminator perceptual loss
    beta2: float = 1.0         # teacher outputs as real samples for the student D
    gamma2: float = 1.0        # triplet loss on student-D features
    alpha_margin: float = 1.0  # triplet margin
    square_l1: bool = False    # square each per-image L1 distance in the KD pixel/perceptual terms
    gan_mode: str = "vanilla"  # or "lsgan"

    def validate(self) -> "LossWeights":
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("square_l1", "gan_mode"):
                continue
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"LossWeights.{f.name} must be finite and >= 0, got {v}")
        if self.gan_mode not in ("vanilla", "lsgan"):
            raise ConfigError(f"LossWeights.gan_mode must be 'vanilla' or 'lsgan', got {self.gan_mode!r}")
        return self


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"{what}: non-finite values")


def _target_loss(logits: torch.Tensor, real: bool, mode: str) -> torch.Tensor:
    target = torch.ones_like(logits) if real else torch.zeros_like(logits)
    if mode == "lsgan":
        return F.mse_loss(logits, target)
    return F.binary_cross_entropy_with_logits(logits, target)


def gan_loss_d(logits_real: torch.Tensor, logits_fake: torch.Tensor, mode: str = "vanilla") -> torch.Tensor:
    """Discriminator side of the adversarial objective (not halved)."""
    _check_same(logits_real, logits_fake, "gan_loss_d")
    _check_finite(logits_real, "gan_loss_d real logits")
    _check_finite(logits_fake, "gan_loss_d fake logits")
    return _target_loss(logits_real, True, mode) + _target_loss(logits_fake, False, mode)


def gan_loss_g(logits_fake: torch.Tensor, mode: str = "vanilla") -> torch.Tensor:
    """Non-saturating generator loss: fake logits scored against the true label."""
    _check_finite(logits_fake, "gan_loss_g logits")
    return _target_loss(logits_fake, True, mode)


def _per_image_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().flatten(1).mean(dim=1)


def _l1(a: torch.Tensor, b: torch.Tensor, square: bool) -> torch.Tensor:
    if square:
        return _per_image_l1(a, b).pow(2).mean()
    return (a - b).abs().mean()


def supervised_l1(y: torch.Tensor, g_x: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between ground truth and generator output."""
    _check_same(y, g_x, "supervised_l1")
    return (y.detach() - g_x).abs().mean()


def kd_pixel_loss(z_T: torch.Tensor, z_S: torch.Tensor, square: bool = False) -> torch.Tensor:
    _check_same(z_T, z_S, "kd_pixel_loss")
    return _l1(z_T.detach(), z_S, square)


def kd_perceptual_loss(D_T: PatchDiscriminator, x: torch.Tensor, z_T: torch.Tensor, z_S: torch.Tensor,
                       tap: Optional[int] = None, square: bool = False) -> torch.Tensor:
    """L1 distance between truncated teacher-discriminator features of teacher and student outputs."""
    _check_same(z_T, z_S, "kd_perceptual_loss")
    x = x.detach()
    with torch.no_grad():
        f_T = forward_features(D_T, z_T.detach(), x, tap, frozen=True)
    f_S = forward_features(D_T, z_S, x, tap, frozen=True)
    return _l1(f_T, f_S, square)


def kd_generator_loss(weights: LossWeights, z_T: torch.Tensor, z_S: torch.Tensor,
                      D_T: PatchDiscriminator, x: torch.Tensor, tap: Optional[int] = None) -> torch.Tensor:
    loss = kd_pixel_loss(z_T, z_S, weights.square_l1)
    if weights.gamma_g:
        loss = loss + weights.gamma_g * kd_perceptual_loss(D_T, x, z_T, z_S, tap, weights.square_l1)
    return loss


def teacher_as_real_loss(D_S: PatchDiscriminator, x: torch.Tensor, z_T: torch.Tensor,
                         mode: str = "vanilla") -> torch.Tensor:
    """Student discriminator scored on teacher outputs against the true label."""
    logits = D_S(z_T.detach(), x.detach())
    _check_finite(logits, "teacher_as_real_loss logits")
    return _target_loss(logits, True, mode)


def triplet_feature_loss(D_S: PatchDiscriminator, x: torch.Tensor, y: torch.Tensor, z_T: torch.Tensor,
                         z_S: torch.Tensor, alpha_margin: float, tap: Optional[int] = None) -> torch.Tensor:
    """Hinge on feature distances: real-teacher pairs closer than real-student by ``alpha_margin``.

    Anchor ``y``, positive ``z_T``, negative ``z_S``; features come from the
    student discriminator truncated at ``tap``, distances are per-image mean
    absolute differences.
    """
    if alpha_margin < 0:
        raise ConfigError(f"alpha_margin must be >= 0, got {alpha_margin}")
    _check_same(y, z_T, "triplet_feature_loss")
    _check_same(y, z_S, "triplet_feature_loss")
    x = x.detach()
    f_y = forward_features(D_S, y.detach(), x, tap)
    f_T = forward_features(D_S, z_T.detach(), x, tap)
    f_S = forward_features(D_S, z_S.detach(), x, tap)
    d_pos = _per_image_l1(f_y, f_T)
    d_neg = _per_image_l1(f_y, f_S)
    return F.relu(d_pos - d_neg + alpha_margin).mean()


# -- combined objectives -------------------------------------------------

def _frozen_logits(D: PatchDiscriminator, image: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
    return forward_features(D, image, condition.detach(), len(D.blocks) - 1, frozen=True)


def generator_terms(weights: LossWeights, D_S: PatchDiscriminator, x: torch.Tensor, z_S: torch.Tensor,
                    y: Optional[torch.Tensor] = None, z_T: Optional[torch.Tensor] = None,
                    D_T: Optional[PatchDiscriminator] = None, tap_T: Optional[int] = None) -> dict:
    """Weighted generator-side terms; zero-weighted terms are not evaluated.

    Returns a dict of unweighted term values plus ``"total"``. The supervised
    term is included when ``y`` is given and ``lambda_sup > 0``.
    """
    terms = {"g_gan": gan_loss_g(_frozen_logits(D_S, z_S, x), weights.gan_mode)}
    total = terms["g_gan"]
    if y is not None and weights.lambda_sup:
        terms["g_l1"] = supervised_l1(y, z_S)
        total = total + weights.lambda_sup * terms["g_l1"]
    if weights.beta1:
        terms["kd_pixel"] = kd_pixel_loss(z_T, z_S, weights.square_l1)
        total = total + weights.beta1 * terms["kd_pixel"]
    if weights.gamma1:
        terms["kd_perc"] = kd_perceptual_loss(D_T, x, z_T, z_S, tap_T, weights.square_l1)
        total = total + weights.gamma1 * terms["kd_perc"]
    terms["total"] = total
    return terms


def discriminator_terms(weights: LossWeights, D_S: PatchDiscriminator, x: torch.Tensor, y: torch.Tensor,
                        z_S: torch.Tensor, z_T: Optional[torch.Tensor] = None, tap_S: Optional[int] = None,
                        adv_scale: float = 1.0) -> dict:
    """Weighted discriminator-side terms; ``adv_scale`` multiplies only the adversarial term."""
    x = x.detach()
    terms = {"d_gan": gan_loss_d(D_S(y.detach(), x), D_S(z_S.detach(), x), weights.gan_mode)}
    total = adv_scale * terms["d_gan"]
    if weights.beta2:
        terms["gt_real"] = teacher_as_real_loss(D_S, x, z_T, weights.gan_mode)
        total = total + weights.beta2 * terms["gt_real"]
    if weights.gamma2:
        terms["triplet"] = triplet_feature_loss(D_S, x, y, z_T, z_S, weights.alpha_margin, tap_S)
        total = total + weights.gamma2 * terms["triplet"]
    terms["total"] = total
    return terms


def student_total_objective(weights: LossWeights, D_S: PatchDiscriminator, D_T: PatchDiscriminator,
                            x: torch.Tensor, y: torch.Tensor, z_T: torch.Tensor, z_S: torch.Tensor,
                            tap_T: Optional[int] = None, tap_S: Optional[int] = None,
                            adv_d_scale: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Split the student objective into the parts minimized by G_S and by D_S.

    ``g_loss = gan_g + beta1*kd_pixel + gamma1*kd_perc`` and
    ``d_loss = gan_d + beta2*teacher_as_real + gamma2*triplet``. The
    supervised pix2pix term is not part of this objective; pass
    ``lambda_sup`` through the trainer to add it.
    """
    w = weights.validate()
    no_sup = dataclasses.replace(w, lambda_sup=0.0)
    g = generator_terms(no_sup, D_S, x, z_S, z_T=z_T, D_T=D_T, tap_T=tap_T)["total"]
    d = discriminator_terms(no_sup, D_S, x, y, z_S, z_T=z_T, tap_S=tap_S, adv_scale=adv_d_scale)["total"]
    return g, d
