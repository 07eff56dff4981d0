"""Analytic parameter and FLOP accounting for classifiers and pooling.

Parameter counts are closed-form per layer, mirroring the network
construction exactly (tests cross-check them against the live modules).

FLOP convention (documented, since conventions differ): one multiply-
accumulate counts as 2 FLOPs. Convolutions and transposed convolutions count
``2 * k^2 * cin * cout`` per output element (biases folded into the MAC
count), instance norms 6 per element, 2x2 max pooling 3 comparisons per
output element. Activations (ReLU, softmax) are excluded. Ensemble pooling
counts the weighted Hadamard sum at 2 FLOPs per member per voxel-channel;
uncertainty pooling adds the per-member memory reductions (depth mean,
channel variance, weight softmax), so both pooling costs are exactly
proportional to the member count.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, VolumeShapeError
from .models import ClassifierSpec
from .volume import NUM_CLASSES


def _double_conv_params(cin: int, cout: int) -> int:
    # two 3x3 convs with bias, each followed by an affine instance norm
    return (9 * cin * cout + cout) + 2 * cout + (9 * cout * cout + cout) + 2 * cout


def layer_param_counts(spec: ClassifierSpec) -> list[tuple[str, int]]:
    """Per-layer parameter counts in construction order."""
    spec.validate()
    chans = spec.level_channels()
    layers: list[tuple[str, int]] = []
    cin = 1
    for i, c in enumerate(chans):
        layers.append((f"encoder{i}", _double_conv_params(cin, c)))
        cin = c
    cb = spec.bottleneck_channels
    if spec.arch == "unet_lite":
        layers.append(("bottleneck", _double_conv_params(chans[-1], cb)))
    else:
        branches = 3 * ((9 * chans[-1] * cb + cb) + 2 * cb)
        fuse = (3 * cb * cb + cb) + 2 * cb
        layers.append(("bottleneck", branches + fuse))
    prev = cb
    for i, c in enumerate(reversed(chans)):
        layers.append((f"upsample{i}", 4 * prev * c + c))
        layers.append((f"decoder{i}", _double_conv_params(2 * c, c)))
        prev = c
    layers.append(("head", chans[0] * NUM_CLASSES + NUM_CLASSES))
    return layers


def member_param_count(spec: ClassifierSpec) -> int:
    return sum(n for _, n in layer_param_counts(spec))


def _check_frame_shape(spec: ClassifierSpec, frame_shape) -> tuple[int, int, int]:
    d, h, w = (int(x) for x in frame_shape)
    stride = 2**spec.depth_levels
    if d < 1:
        raise VolumeShapeError(f"frame depth must be >= 1, got {d}")
    if h % stride or w % stride:
        raise VolumeShapeError(
            f"slice size {h}x{w} not divisible by 2^depth_levels = {stride}"
        )
    return d, h, w


def member_flops(spec: ClassifierSpec, frame_shape) -> int:
    """FLOPs for one member's forward pass over a whole (D, H, W) frame."""
    d, h, w = _check_frame_shape(spec, frame_shape)
    chans = spec.level_channels()

    def double_conv(cin, cout, hh, ww):
        convs = 2 * 9 * cin * cout * hh * ww + 2 * 9 * cout * cout * hh * ww
        norms = 2 * 6 * cout * hh * ww
        return convs + norms

    per_slice = 0
    cin, hh, ww = 1, h, w
    for c in chans:
        per_slice += double_conv(cin, c, hh, ww)
        per_slice += 3 * c * (hh // 2) * (ww // 2)  # 2x2 max pool
        cin, hh, ww = c, hh // 2, ww // 2
    cb = spec.bottleneck_channels
    if spec.arch == "unet_lite":
        per_slice += double_conv(chans[-1], cb, hh, ww)
    else:
        per_slice += 3 * (2 * 9 * chans[-1] * cb * hh * ww + 6 * cb * hh * ww)
        per_slice += 2 * 3 * cb * cb * hh * ww + 6 * cb * hh * ww
    prev = cb
    for c in reversed(chans):
        per_slice += 2 * 4 * prev * c * hh * ww  # 2x2 stride-2 transposed conv
        hh, ww = hh * 2, ww * 2
        per_slice += double_conv(2 * c, c, hh, ww)
        prev = c
    per_slice += 2 * chans[0] * NUM_CLASSES * h * w  # 1x1 head
    return d * per_slice


def pooling_flops(n_members: int, frame_shape, mode: str = "uncertainty") -> int:
    """Cost of pooling one frame; exactly proportional to the member count."""
    if n_members < 1:
        raise ConfigError("pooling needs at least one member")
    d, h, w = (int(x) for x in frame_shape)
    hadamard_sum = 2 * n_members * d * NUM_CLASSES * h * w
    if mode == "fixed":
        return hadamard_sum
    if mode == "uncertainty":
        depth_mean = (d + 1) * NUM_CLASSES * h * w
        channel_var = 13 * h * w
        weight_softmax = 3 * h * w
        return hadamard_sum + n_members * (depth_mean + channel_var + weight_softmax)
    raise ConfigError(f"pooling cost defined for fixed/uncertainty, not {mode!r}")


@dataclass
class CostReport:
    frame_shape: tuple[int, int, int]
    mode: str
    member_params: list[int]
    member_flops: list[int]
    pooling_flops: int

    @property
    def total_params(self) -> int:
        return sum(self.member_params)

    @property
    def total_flops(self) -> int:
        return sum(self.member_flops) + self.pooling_flops

    def as_dict(self) -> dict:
        return {
            "frame_shape": list(self.frame_shape),
            "mode": self.mode,
            "member_params": self.member_params,
            "total_params": self.total_params,
            "member_flops": self.member_flops,
            "pooling_flops": self.pooling_flops,
            "total_flops": self.total_flops,
        }


def cost_report(members: list[ClassifierSpec], frame_shape, mode: str = "auto") -> CostReport:
    """Parameter and FLOP totals for one full-frame ensemble inference."""
    if not members:
        raise ConfigError("cost report needs at least one member spec")
    if mode == "auto":
        mode = "uncertainty" if len(members) >= 2 else "fixed"
    d, h, w = (int(x) for x in frame_shape)
    return CostReport(
        frame_shape=(d, h, w),
        mode=mode,
        member_params=[member_param_count(s) for s in members],
        member_flops=[member_flops(s, (d, h, w)) for s in members],
        pooling_flops=pooling_flops(len(members), (d, h, w), mode),
    )
