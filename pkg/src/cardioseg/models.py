"""Slice classifiers: a lite UNet and a dilated-bottleneck variant.

Both map one grayscale slice to per-pixel class probabilities over the four
segmentation classes. The architecture is deliberately small: ``depth_levels``
encoder stages of two 3x3 convs each (instance norm, ReLU), a bottleneck with
elementwise dropout at the encoder/decoder junction, a mirrored decoder with
skip concatenation, and a 1x1 head followed by a channel softmax. The dilated
variant replaces the bottleneck convs with three parallel 3x3 convs at
dilation rates 1, 2 and 4, fused by a 1x1 conv.

The exact layer schedule and parameter counts are tabulated in
``docs/architecture.md``; ``cardioseg.costs`` computes the same counts
analytically.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, VolumeShapeError
from .volume import NUM_CLASSES, CineVolume

ARCHS = ("unet_lite", "dilated_lite")
MAX_BOTTLENECK_CHANNELS = 256


@dataclass
class ClassifierSpec:
    arch: str = "unet_lite"
    base_channels: int = 8
    depth_levels: int = 3
    bottleneck_channels: int = 64
    dropout_p: float = 0.5
    seed: int = 0

    def validate(self) -> "ClassifierSpec":
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}, expected one of {ARCHS}")
        if self.base_channels < 1 or self.depth_levels < 1:
            raise ConfigError("base_channels and depth_levels must be >= 1")
        if not (1 <= self.bottleneck_channels <= MAX_BOTTLENECK_CHANNELS):
            raise ConfigError(
                f"bottleneck_channels must be in [1, {MAX_BOTTLENECK_CHANNELS}], "
                f"got {self.bottleneck_channels}"
            )
        if not (0.0 <= self.dropout_p < 1.0):
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierSpec":
        return cls(**d).validate()

    def level_channels(self) -> list[int]:
        return [self.base_channels * (2**lvl) for lvl in range(self.depth_levels)]


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class _DilatedBottleneck(nn.Module):
    """Parallel 3x3 convs at dilation 1/2/4, concatenated and fused at 1x1."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=rate, dilation=rate),
                nn.InstanceNorm2d(cout, affine=True),
                nn.ReLU(inplace=True),
            )
            for rate in (1, 2, 4)
        )
        self.fuse = nn.Sequential(
            nn.Conv2d(3 * cout, cout, 1),
            nn.InstanceNorm2d(cout, affine=True),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.fuse(torch.cat([b(x) for b in self.branches], dim=1))


class SliceClassifier(nn.Module):
    """Encoder-decoder slice classifier; doubles as the parameter store Θ.

    ``forward(x, train=...)`` takes a ``(B, 1, H, W)`` batch and returns
    ``(B, 4, H, W)`` probabilities that sum to one over the channel axis.
    Dropout at the bottleneck is driven by a per-classifier generator so that
    training is reproducible and evaluation is exactly deterministic.
    """

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        chans = spec.level_channels()

        self.encoders = nn.ModuleList()
        cin = 1
        for c in chans:
            self.encoders.append(_double_conv(cin, c))
            cin = c
        self.pool = nn.MaxPool2d(2)

        cb = spec.bottleneck_channels
        if spec.arch == "unet_lite":
            self.bottleneck = _double_conv(chans[-1], cb)
        else:
            self.bottleneck = _DilatedBottleneck(chans[-1], cb)

        self.upsamples = nn.ModuleList()
        self.decoders = nn.ModuleList()
        prev = cb
        for c in reversed(chans):
            self.upsamples.append(nn.ConvTranspose2d(prev, c, 2, stride=2))
            self.decoders.append(_double_conv(2 * c, c))
            prev = c
        self.head = nn.Conv2d(chans[0], NUM_CLASSES, 1)

        self._init_parameters(torch.Generator().manual_seed(spec.seed))
        self.dropout_rng = torch.Generator()
        self.reset_dropout_rng()

    def _init_parameters(self, gen: torch.Generator) -> None:
        # uniform(-1/sqrt(fan_in), +) on conv weights, zero biases, unit norm
        # scales; drawn in module order from ClassifierSpec.seed only
        for name, p in self.named_parameters():
            with torch.no_grad():
                if p.dim() >= 2:
                    fan_in = p[0].numel()
                    bound = float(fan_in) ** -0.5
                    p.uniform_(-bound, bound, generator=gen)
                elif name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    def reset_dropout_rng(self, seed: int | None = None) -> None:
        self.dropout_rng.manual_seed(self.spec.seed * 7919 + 1 if seed is None else seed)

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def named_arrays(self) -> dict[str, torch.Tensor]:
        """Parameters in deterministic (sorted) name order, for serialization."""
        return {name: p.detach() for name, p in sorted(self.named_parameters())}

    def _dropout(self, x: torch.Tensor) -> torch.Tensor:
        p = self.spec.dropout_p
        keep = (
            torch.rand(x.shape, generator=self.dropout_rng, dtype=x.dtype, device=x.device)
            >= p
        )
        return x * keep / (1.0 - p)

    def forward(self, x: torch.Tensor, train: bool = False) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise VolumeShapeError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        stride = 2**self.spec.depth_levels
        if h % stride or w % stride:
            raise VolumeShapeError(
                f"slice size {h}x{w} not divisible by 2^depth_levels = {stride}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        if train and self.spec.dropout_p > 0.0:
            x = self._dropout(x)
        for up, dec, skip in zip(self.upsamples, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return torch.softmax(self.head(x), dim=1)


def init_classifier(spec: ClassifierSpec) -> SliceClassifier:
    """Build a classifier with deterministic, seed-dependent initialization."""
    return SliceClassifier(spec)


def _as_tensor(x, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def forward_slice(model: SliceClassifier, slice2d, mode: str = "eval") -> torch.Tensor:
    """Probabilities (4, H, W) for one slice; ``mode`` is "train" or "eval"."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    dtype = next(model.parameters()).dtype
    x = _as_tensor(slice2d, dtype)
    if x.dim() != 2:
        raise VolumeShapeError(f"expected an (H, W) slice, got {tuple(x.shape)}")
    return model(x[None, None], train=mode == "train")[0]


def forward_volume(model: SliceClassifier, volume, mode: str = "eval") -> torch.Tensor:
    """Probabilities (D, 4, H, W) for a whole frame, slices processed independently."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    vox = volume.voxels if isinstance(volume, CineVolume) else volume
    dtype = next(model.parameters()).dtype
    x = _as_tensor(vox, dtype)
    if x.dim() != 3:
        raise VolumeShapeError(f"expected a (D, H, W) volume, got {tuple(x.shape)}")
    return model(x[:, None], train=mode == "train")
