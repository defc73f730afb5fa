"""Evaluate every distillation loss on hand-sized inputs and compare with values worked out by hand.

    python demos/loss_walkthrough.py
"""
import math

import torch

from kdgan.losses import (LossWeights, gan_loss_d, gan_loss_g, kd_pixel_loss, student_total_objective,
                          supervised_l1, teacher_as_real_loss, triplet_feature_loss)
from kdgan.models import DiscriminatorSpec, build_patch_discriminator


def show(name, got, expected):
    got = float(got.detach())
    print(f"{name:<38}{got:>12.6f}   expected {expected:.6f}   {'ok' if abs(got - expected) < 1e-5 else 'MISMATCH'}")


def main():
    torch.manual_seed(0)
    zeros = torch.zeros(1, 1, 2, 2)

    # An undecided discriminator (logit 0) costs ln 2 per decision.
    show("gan_loss_g, logits 0", gan_loss_g(zeros), math.log(2))
    show("gan_loss_d, logits 0", gan_loss_d(zeros, zeros), 2 * math.log(2))

    # L1 terms are means of absolute differences.
    y = torch.tensor([[[[0.5, -0.5], [0.0, 1.0]]]])
    g = torch.tensor([[[[0.0, -0.5], [0.25, 0.0]]]])
    show("supervised_l1", supervised_l1(y, g), (0.5 + 0 + 0.25 + 1.0) / 4)
    show("kd_pixel_loss (teacher = y)", kd_pixel_loss(y, g), (0.5 + 0 + 0.25 + 1.0) / 4)

    # With no distillation weights the student objective is the plain GAN game.
    D_S = build_patch_discriminator(DiscriminatorSpec(6, 4, 1), seed=1)
    D_T = build_patch_discriminator(DiscriminatorSpec(6, 4, 1), seed=2)
    x, y, z_T, z_S = (torch.rand(2, 3, 16, 16) * 2 - 1 for _ in range(4))
    off = LossWeights(beta1=0, gamma1=0, beta2=0, gamma2=0)
    g_total, _ = student_total_objective(off, D_S, D_T, x, y, z_T, z_S)
    show("student G objective, KD off", g_total, gan_loss_g(D_S(z_S, x)).item())

    # The teacher-as-real term is ordinary BCE on D_S(x, z_T) with target "real".
    logits = D_S(z_T, x)
    show("teacher_as_real_loss", teacher_as_real_loss(D_S, x, z_T),
         torch.nn.functional.softplus(-logits).mean().item())

    # The triplet hinge never goes below zero and equals the margin when all three images coincide.
    show("triplet, y = z_T = z_S, margin 0.3", triplet_feature_loss(D_S, x, y, y, y, 0.3), 0.3)
    print("D objective with every term:", student_total_objective(LossWeights(), D_S, D_T, x, y, z_T, z_S)[1].item())


if __name__ == "__main__":
    main()
