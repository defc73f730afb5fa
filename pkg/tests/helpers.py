"""Independent oracles shared by the test modules."""
import math

import numpy as np
import torch
import torch.nn as nn

from kdgan.models import DiscriminatorSpec, PatchDiscriminator, build_patch_discriminator


def fd_gradient(f, t: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar ``f()`` with respect to every entry of ``t`` (in place)."""
    g = torch.zeros_like(t)
    flat, gflat = t.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(f().detach())
        flat[i] = old - h
        down = float(f().detach())
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def sampled_fd_error(f, t: torch.Tensor, n_coords: int = 16, n_dirs: int = 3, h: float = 1e-6,
                     seed: int = 0) -> float:
    """Relative error of autograd vs finite differences on random coordinates and random directions of ``t``.

    A cheaper stand-in for :func:`fd_gradient` when each evaluation runs a network.
    """
    t.grad = None
    f().backward()
    analytic = t.grad.clone()
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randperm(t.numel(), generator=gen)[:n_coords]
    flat = t.data.view(-1)
    num = torch.zeros(len(idx), dtype=t.dtype)
    for j, i in enumerate(idx.tolist()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(f().detach())
        flat[i] = old - h
        down = float(f().detach())
        flat[i] = old
        num[j] = (up - down) / (2 * h)
    errs = [rel_err(analytic.view(-1)[idx], num)]
    for _ in range(n_dirs):
        d = torch.randn(t.shape, generator=gen, dtype=t.dtype)
        d /= d.norm()
        with torch.no_grad():
            t.add_(h * d)
            up = float(f().detach())
            t.sub_(2 * h * d)
            down = float(f().detach())
            t.add_(h * d)
        n = (up - down) / (2 * h)
        errs.append(abs(float((analytic * d).sum()) - n) / max(abs(n), 1e-8))
    return max(errs)


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    """Norm-wise relative error of ``a`` against the reference ``b``."""
    den = max(float(b.norm()), 1e-8)
    return float((a - b).norm()) / den


def param_fd_error(f, params: list, h: float = 1e-6, n_coords=None, seed: int = 0) -> float:
    """Norm-wise relative error of the parameter gradient of ``f()`` against coordinate-wise differences.

    With ``n_coords`` only that many randomly chosen parameter entries are compared.
    """
    for p in params:
        p.grad = None
    f().backward()
    analytic = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in params])
    if n_coords is None:
        with torch.no_grad():
            numeric = torch.cat([fd_gradient(f, p, h).reshape(-1) for p in params])
        return rel_err(analytic, numeric)
    owners = [(p, i) for p in params for i in range(p.numel())]
    pick = torch.randperm(len(owners), generator=torch.Generator().manual_seed(seed))[:n_coords].tolist()
    numeric = torch.zeros(len(pick), dtype=analytic.dtype)
    with torch.no_grad():
        for j, k in enumerate(pick):
            p, i = owners[k]
            flat = p.data.view(-1)
            old = flat[i].item()
            flat[i] = old + h
            up = float(f())
            flat[i] = old - h
            down = float(f())
            flat[i] = old
            numeric[j] = (up - down) / (2 * h)
    return rel_err(analytic[pick], numeric)


def directional_fd(f, params: list, h: float = 1e-6, seed: int = 0) -> tuple[float, float]:
    """(analytic, numeric) derivative of scalar ``f()`` along a random unit direction in parameter space."""
    gen = torch.Generator().manual_seed(seed)
    direction = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
    norm = math.sqrt(sum(float((d * d).sum()) for d in direction))
    direction = [d / norm for d in direction]
    for p in params:
        p.grad = None
    f().backward()
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, direction) if p.grad is not None)
    with torch.no_grad():
        for p, d in zip(params, direction):
            p.add_(h * d)
        up = float(f().detach())
        for p, d in zip(params, direction):
            p.sub_(2 * h * d)
        down = float(f().detach())
        for p, d in zip(params, direction):
            p.add_(h * d)
    return analytic, (up - down) / (2 * h)


def tiny_disc64(seed: int, in_channels: int = 6) -> PatchDiscriminator:
    """Small float64 PatchGAN for 8x8 gradient checks, weights scaled up so features are not tiny."""
    d = build_patch_discriminator(DiscriminatorSpec(in_channels, 2, 1), seed).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in d.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.3)
    return d


def toy_1x1_discriminator(weight: np.ndarray, bias: np.ndarray, dtype=torch.float32) -> PatchDiscriminator:
    """PatchDiscriminator whose blocks are two hand-set 1x1 convs (features at tap 0 are affine in the input)."""
    out_ch, in_ch = weight.shape
    d = PatchDiscriminator(DiscriminatorSpec(in_ch, 1, 1))
    first = nn.Conv2d(in_ch, out_ch, 1)
    with torch.no_grad():
        first.weight.copy_(torch.tensor(weight)[:, :, None, None])
        first.bias.copy_(torch.tensor(bias))
    last = nn.Conv2d(out_ch, 1, 1)
    d.blocks = nn.ModuleList([nn.Sequential(first), nn.Sequential(last)])
    return d.to(dtype)


def identity_feature_discriminator(n_image_channels: int = 3, n_cond_channels: int = 3) -> PatchDiscriminator:
    """Tap-0 features equal the image channels exactly (condition channels get zero weight)."""
    w = np.zeros((n_image_channels, n_cond_channels + n_image_channels))
    w[:, n_cond_channels:] = np.eye(n_image_channels)
    return toy_1x1_discriminator(w, np.zeros(n_image_channels))


def constant_logit_discriminator(value: float, in_channels: int = 6) -> PatchDiscriminator:
    """Tiny PatchGAN whose final conv has zero weight and bias ``value``."""
    d = build_patch_discriminator(DiscriminatorSpec(in_channels, 2, 1), 0)
    final = [m for m in d.blocks[-1].modules() if isinstance(m, nn.Conv2d)][-1]
    with torch.no_grad():
        final.weight.zero_()
        final.bias.fill_(value)
    return d


def bce_true_oracle(logits: np.ndarray) -> float:
    """mean of -log(sigmoid(l)), evaluated elementwise in float64."""
    return float(np.mean([math.log1p(math.exp(-l)) if l > -30 else -l for l in logits.ravel()]))


def bce_false_oracle(logits: np.ndarray) -> float:
    """mean of -log(1 - sigmoid(l))."""
    return bce_true_oracle(-logits)
