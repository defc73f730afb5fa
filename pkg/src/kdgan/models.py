"""U-Net generators, PatchGAN discriminators, and parameter/FLOP accounting.

Both architectures follow the pix2pix layout. Normalization is
``InstanceNorm2d`` without affine parameters or running statistics, so train
and eval forwards differ only in dropout.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call

from .errors import ConfigError, MissingArtifactError, ShapeError

ROLES = ("teacher_generator", "student_generator", "teacher_discriminator", "student_discriminator")
INIT_STD = 0.02
WIDTH_CAP = 8


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 3
    out_channels: int = 3
    base_width: int = 64
    depth: int = 8
    use_dropout: bool = True

    def validate(self) -> "GeneratorSpec":
        for name in ("in_channels", "out_channels", "base_width", "depth"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"GeneratorSpec.{name} must be >= 1, got {getattr(self, name)}")
        return self

    def widths(self) -> list[int]:
        """Channel count after each encoder level, doubling up to 8x base."""
        return [self.base_width * min(2**i, WIDTH_CAP) for i in range(self.depth)]


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 6
    base_width: int = 64
    num_layers: int = 3
    feature_tap: Optional[int] = None

    @property
    def n_blocks(self) -> int:
        # first conv, (num_layers - 1) strided blocks, one stride-1 block, final logit conv
        return self.num_layers + 2

    @property
    def tap(self) -> int:
        return self.n_blocks - 2 if self.feature_tap is None else self.feature_tap

    def validate(self) -> "DiscriminatorSpec":
        for name in ("in_channels", "base_width", "num_layers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"DiscriminatorSpec.{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.tap < self.n_blocks:
            raise ConfigError(f"DiscriminatorSpec.feature_tap={self.feature_tap} outside [0, {self.n_blocks})")
        return self


def receptive_field(spec: DiscriminatorSpec) -> int:
    """Side length in pixels of the input patch seen by one output logit."""
    rf, jump = 1, 1
    for _, stride in _disc_kernel_strides(spec):
        rf += 3 * jump
        jump *= stride
    return rf


def _disc_kernel_strides(spec: DiscriminatorSpec):
    strides = [2] * spec.num_layers + [1, 1]
    return [(4, s) for s in strides]


def _init_weights(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            if m.weight.device.type == "meta":
                continue
            with torch.no_grad():
                m.weight.normal_(0.0, INIT_STD, generator=g)
                if m.bias is not None:
                    m.bias.zero_()


class UNetGenerator(nn.Module):
    """Encoder-decoder with skip connections; output squashed to [-1, 1] by tanh.

    Level ``i`` of the encoder maps ``c_i -> c_{i+1}`` with a 4x4 stride-2
    conv. The decoder mirrors it with transposed convs that consume the
    concatenation of the previous decoder output and the matching skip.
    """

    def __init__(self, spec: GeneratorSpec, role: str = "teacher_generator", device=None):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.role = role
        depth, widths = spec.depth, spec.widths()
        chans = [spec.in_channels] + widths

        self.down = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in range(depth):
            outermost, innermost = i == 0, i == depth - 1
            layers: list[nn.Module] = []
            if not outermost:
                layers.append(nn.LeakyReLU(0.2))
            layers.append(nn.Conv2d(chans[i], chans[i + 1], 4, 2, 1, device=device))
            if not (outermost or innermost):
                layers.append(nn.InstanceNorm2d(chans[i + 1]))
            self.down.append(nn.Sequential(*layers))

        for i in range(depth):
            outermost, innermost = i == 0, i == depth - 1
            up_in = chans[i + 1] if innermost else 2 * chans[i + 1]
            up_out = spec.out_channels if outermost else chans[i]
            layers = [nn.ReLU(), nn.ConvTranspose2d(up_in, up_out, 4, 2, 1, device=device)]
            if outermost:
                layers.append(nn.Tanh())
            else:
                layers.append(nn.InstanceNorm2d(up_out))
                capped = chans[i] == chans[i + 1] == spec.base_width * WIDTH_CAP
                if spec.use_dropout and capped and not innermost:
                    layers.append(nn.Dropout(0.5))
            self.up.append(nn.Sequential(*layers))

    def check_input(self, shape: Sequence[int]) -> None:
        if len(shape) != 4 or shape[1] != self.spec.in_channels:
            raise ShapeError(f"generator expects (N, {self.spec.in_channels}, H, W), got {tuple(shape)}")
        k = 2**self.spec.depth
        if shape[2] % k or shape[3] % k:
            raise ShapeError(f"spatial size {tuple(shape[2:])} not divisible by 2^depth={k}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x.shape)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        h = skips.pop()
        h = self.up[-1](h)
        for i in range(self.spec.depth - 2, -1, -1):
            h = self.up[i](torch.cat([skips[i], h], dim=1))
        return h


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN returning a grid of realness logits.

    The input is ``cat([condition, image])`` along channels. ``blocks[k]`` is
    one conv stage; ``blocks[-1]`` is the final 1-channel logit conv.
    """

    def __init__(self, spec: DiscriminatorSpec, role: str = "teacher_discriminator", device=None):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.role = role
        w = spec.base_width
        blocks = [nn.Sequential(nn.Conv2d(spec.in_channels, w, 4, 2, 1, device=device), nn.LeakyReLU(0.2))]
        mult = 1
        for n in range(1, spec.num_layers + 1):
            prev, mult = mult, min(2**n, WIDTH_CAP)
            stride = 2 if n < spec.num_layers else 1
            blocks.append(nn.Sequential(
                nn.Conv2d(w * prev, w * mult, 4, stride, 1, device=device),
                nn.InstanceNorm2d(w * mult),
                nn.LeakyReLU(0.2),
            ))
        blocks.append(nn.Sequential(nn.Conv2d(w * mult, 1, 4, 1, 1, device=device)))
        self.blocks = nn.ModuleList(blocks)

    def joint_input(self, image: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        if image.shape[0] != condition.shape[0] or image.shape[2:] != condition.shape[2:]:
            raise ShapeError(f"image {tuple(image.shape)} and condition {tuple(condition.shape)} not aligned")
        xy = torch.cat([condition, image], dim=1)
        if xy.shape[1] != self.spec.in_channels:
            raise ShapeError(f"discriminator expects {self.spec.in_channels} input channels, got {xy.shape[1]}")
        return xy

    def run_blocks(self, h: torch.Tensor, stop: Optional[int] = None) -> torch.Tensor:
        stop = len(self.blocks) - 1 if stop is None else stop
        for block in self.blocks[: stop + 1]:
            h = block(h)
        return h

    def forward(self, image: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        return self.run_blocks(self.joint_input(image, condition))


ModelHandle = Union[UNetGenerator, PatchDiscriminator]


def build_unet_generator(spec: GeneratorSpec, seed: int, role: str = "teacher_generator") -> UNetGenerator:
    # allocate uninitialized storage; torch's default init would be overwritten anyway
    model = UNetGenerator(spec, role=role, device="meta").to_empty(device="cpu")
    _init_weights(model, seed)
    return model


def build_patch_discriminator(spec: DiscriminatorSpec, seed: int,
                              role: str = "teacher_discriminator") -> PatchDiscriminator:
    model = PatchDiscriminator(spec, role=role, device="meta").to_empty(device="cpu")
    _init_weights(model, seed)
    return model


def build_model(spec, seed: int, role: str) -> ModelHandle:
    if isinstance(spec, GeneratorSpec):
        return build_unet_generator(spec, seed, role)
    return build_patch_discriminator(spec, seed, role)


def forward_features(model: PatchDiscriminator, image: torch.Tensor, condition: torch.Tensor,
                     tap: Optional[int] = None, frozen: bool = False) -> torch.Tensor:
    """Activations of ``model`` after block ``tap`` (default: ``model.spec.tap``, the penultimate block).

    ``tap = len(blocks) - 1`` returns the full logits. With ``frozen=True``
    the parameters enter as detached constants, so gradients reach ``image``
    (and ``condition``) but never the discriminator itself.
    """
    tap = model.spec.tap if tap is None else tap
    if not 0 <= tap < len(model.blocks):
        raise ConfigError(f"tap {tap} outside [0, {len(model.blocks)})")
    xy = model.joint_input(image, condition)
    if frozen:
        params = {f"m.{k}": v.detach() for k, v in model.named_parameters()}
        return functional_call(_BlockRunner(model), params, (xy, tap))
    return model.run_blocks(xy, stop=tap)


class _BlockRunner(nn.Module):
    # functional_call only substitutes parameters on forward(); this exposes run_blocks.
    def __init__(self, m: PatchDiscriminator):
        super().__init__()
        self.m = m

    def forward(self, xy, stop):
        return self.m.run_blocks(xy, stop)


def frozen_forward(model: nn.Module, *args) -> torch.Tensor:
    """Forward pass treating the parameters of ``model`` as constants."""
    params = {k: v.detach() for k, v in model.named_parameters()}
    return functional_call(model, params, args)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _conv_out(size: int, conv: nn.Conv2d) -> int:
    k, st, pad = conv.kernel_size[0], conv.stride[0], conv.padding[0]
    return (size + 2 * pad - k) // st + 1


def _convT_out(size: int, conv: nn.ConvTranspose2d) -> int:
    k, st, pad = conv.kernel_size[0], conv.stride[0], conv.padding[0]
    return (size - 1) * st - 2 * pad + k


def _conv_of(block: nn.Sequential):
    return next(m for m in block if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)))


def count_flops(model: ModelHandle, input_shape: Sequence[int]) -> int:
    """FLOPs of one forward pass, counted as 2 x multiply-accumulates.

    Only convolutions and transposed convolutions contribute; activations and
    normalization are ignored. ``input_shape`` is ``(C, H, W)`` or
    ``(N, C, H, W)``; for a discriminator ``C`` is the concatenated
    condition + image channel count. Spatial sizes are propagated with conv
    arithmetic, no forward pass is run.
    """
    shape = tuple(int(s) for s in input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    if len(shape) != 4:
        raise ShapeError(f"input_shape must be (C, H, W) or (N, C, H, W), got {input_shape}")
    n, c, h, w = shape
    macs = 0

    if isinstance(model, UNetGenerator):
        model.check_input(shape)
        sizes = []
        for block in model.down:
            conv = _conv_of(block)
            h, w = _conv_out(h, conv), _conv_out(w, conv)
            macs += h * w * conv.in_channels * conv.out_channels * conv.kernel_size[0] * conv.kernel_size[1]
            sizes.append((h, w))
        for i, block in enumerate(model.up):
            conv = _conv_of(block)
            h, w = sizes[i]
            macs += h * w * conv.in_channels * conv.out_channels * conv.kernel_size[0] * conv.kernel_size[1]
    else:
        if c != model.spec.in_channels:
            raise ShapeError(f"discriminator expects {model.spec.in_channels} channels, got {c}")
        for block in model.blocks:
            conv = _conv_of(block)
            h, w = _conv_out(h, conv), _conv_out(w, conv)
            if h < 1 or w < 1:
                raise ShapeError(f"input {shape[2:]} too small for discriminator")
            macs += h * w * conv.in_channels * conv.out_channels * conv.kernel_size[0] * conv.kernel_size[1]
    return 2 * n * macs


# -- checkpoints ---------------------------------------------------------

_SPEC_KEY = "__spec__"


def spec_to_dict(spec) -> dict:
    kind = "generator" if isinstance(spec, GeneratorSpec) else "discriminator"
    return {"kind": kind, **dataclasses.asdict(spec)}


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    cls = GeneratorSpec if kind == "generator" else DiscriminatorSpec
    return cls(**d)


def save_checkpoint(model: ModelHandle, path: Union[str, Path]) -> Path:
    """Write spec (JSON) and parameters (little-endian float32) to one ``.npz`` archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"role": model.role, "spec": spec_to_dict(model.spec)}, sort_keys=True)
    arrays = {_SPEC_KEY: np.frombuffer(header.encode("utf-8"), dtype=np.uint8)}
    for name, p in model.state_dict().items():
        arrays[name] = p.detach().cpu().numpy().astype("<f4")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: Union[str, Path]) -> ModelHandle:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z[_SPEC_KEY]).decode("utf-8"))
            state = {k: torch.from_numpy(z[k].astype(np.float32)) for k in z.files if k != _SPEC_KEY}
    except (OSError, ValueError, KeyError) as exc:
        raise MissingArtifactError(f"corrupt checkpoint {path}: {exc}") from exc
    spec = spec_from_dict(header["spec"])
    cls = UNetGenerator if isinstance(spec, GeneratorSpec) else PatchDiscriminator
    model = cls(spec, role=header["role"])
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise MissingArtifactError(f"checkpoint {path} does not match its spec: {exc}") from exc
    return model
