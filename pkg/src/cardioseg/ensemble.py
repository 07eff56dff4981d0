"""Ensemble pooling: fixed convex combination, memory-based uncertainty
weighting, and the classical strategy harness.

The uncertainty machinery works per frame and in two passes. Pass one runs
every classifier over the whole frame and stores, per classifier, the mean of
its probabilities along depth and the per-pixel variance of that mean across
the four channels. A high variance means the classifier commits to one class
consistently across slices, so it is treated as confident. Pass two turns the
variance maps into a per-pixel softmax over classifiers, broadcasts those
weights over depth and channels, and pools the member probabilities with a
final channel softmax.

All functions here are differentiable torch ops; gradients flow through the
weight field (mean, variance and softmax included) unless explicitly frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, VolumeShapeError
from .models import ClassifierSpec, SliceClassifier, forward_volume
from .volume import AugmentationSpec, CineVolume, is_right_angle

ENSEMBLE_ID = -1
MODES = ("fixed", "uncertainty", "stacking", "bagging", "augmenting")

# population variance over a 4-point probability vector peaks at one-hot
VARIANCE_MAX = 0.1875


@dataclass
class ProbVolume:
    """Per-classifier class probabilities for one frame, shape (D, 4, H, W)."""

    probs: torch.Tensor
    classifier_id: int = ENSEMBLE_ID

    def validate(self) -> "ProbVolume":
        if self.probs.dim() != 4 or self.probs.shape[1] != 4:
            raise VolumeShapeError(f"expected (D, 4, H, W), got {tuple(self.probs.shape)}")
        sums = self.probs.sum(dim=1)
        if self.probs.min() < 0 or (sums - 1.0).abs().max() > 1e-6:
            raise VolumeShapeError("channel probabilities must be >= 0 and sum to 1")
        return self


@dataclass
class UncertaintyMemory:
    """Per-classifier frame memory: depth-mean probabilities and their
    channel variance (the confidence map stored between the two passes)."""

    variance: torch.Tensor  # (H, W)
    mean_probs: torch.Tensor  # (4, H, W)
    frame_id: str = ""


@dataclass
class PixelWeightField:
    """Per-pixel classifier weights, shape (N, H, W); sums to one over N."""

    weights: torch.Tensor

    def validate(self) -> "PixelWeightField":
        if self.weights.dim() != 3:
            raise VolumeShapeError(f"expected (N, H, W), got {tuple(self.weights.shape)}")
        col = self.weights.sum(dim=0)
        if (col - 1.0).abs().max() > 1e-6:
            raise VolumeShapeError("weight field columns must sum to 1")
        if self.weights.min() <= 0.0 or self.weights.max() >= 1.0:
            raise VolumeShapeError("weights must lie strictly inside (0, 1)")
        return self


@dataclass
class EnsembleConfig:
    mode: str = "uncertainty"
    members: list[ClassifierSpec] = field(default_factory=list)
    fixed_weights: tuple[float, ...] | None = None  # None -> uniform
    bootstrap_seed: int = 0
    test_augmentations: AugmentationSpec | None = None

    def validate(self) -> "EnsembleConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown ensemble mode {self.mode!r}")
        if not self.members:
            raise ConfigError("ensemble needs at least one member spec")
        for m in self.members:
            m.validate()
        if self.mode == "uncertainty" and len(self.members) < 2:
            raise ConfigError("uncertainty pooling needs >= 2 members")
        if self.fixed_weights is not None:
            check_fixed_weights(self.fixed_weights, len(self.members))
        if self.mode == "augmenting":
            if len(self.members) != 1:
                raise ConfigError("augmenting uses exactly one member")
            if self.test_augmentations is not None:
                _check_invertible(self.test_augmentations)
        return self

    def resolved_weights(self) -> tuple[float, ...]:
        if self.fixed_weights is not None:
            return tuple(self.fixed_weights)
        n = len(self.members)
        return (1.0 / n,) * n


def check_fixed_weights(weights, n_members: int) -> None:
    if len(weights) != n_members:
        raise ConfigError(f"{len(weights)} weights for {n_members} members")
    if any(w <= 0 for w in weights):
        raise ConfigError("fixed weights must be positive")
    if abs(sum(weights) - 1.0) > 1e-6:
        raise ConfigError(f"fixed weights sum to {sum(weights)}, expected 1")


def _stack_probs(probs: list) -> torch.Tensor:
    ts = [p.probs if isinstance(p, ProbVolume) else torch.as_tensor(p) for p in probs]
    shape = ts[0].shape
    if any(t.shape != shape for t in ts):
        raise VolumeShapeError("member probability volumes disagree in shape")
    return torch.stack(ts)


def compute_memory(probs, frame_id: str = "") -> UncertaintyMemory:
    """Reduce one member's (D, 4, H, W) probabilities to its frame memory.

    Mean over depth first; then the population variance of that mean across
    the channel axis at each pixel.
    """
    t = probs.probs if isinstance(probs, ProbVolume) else torch.as_tensor(probs)
    if t.dim() != 4 or t.shape[1] != 4:
        raise VolumeShapeError(f"expected (D, 4, H, W), got {tuple(t.shape)}")
    mean_probs = t.mean(dim=0)
    variance = mean_probs.var(dim=0, unbiased=False)
    return UncertaintyMemory(variance=variance, mean_probs=mean_probs, frame_id=frame_id)


def uncertainty_weights(memories: list[UncertaintyMemory]) -> PixelWeightField:
    """Per-pixel softmax of the member variance maps; columns sum to one."""
    if len(memories) < 2:
        raise ConfigError("uncertainty weighting needs >= 2 memories")
    maps = [m.variance if isinstance(m, UncertaintyMemory) else torch.as_tensor(m) for m in memories]
    shape = maps[0].shape
    if any(v.shape != shape for v in maps):
        raise VolumeShapeError("variance maps disagree in shape")
    return PixelWeightField(torch.softmax(torch.stack(maps), dim=0))


def pool_fixed(probs: list, weights) -> torch.Tensor:
    """Convex combination with scalar weights, re-normalized by a channel
    softmax: ``softmax(sum_i w_i * p_i)`` per pixel."""
    check_fixed_weights(weights, len(probs))
    stacked = _stack_probs(probs)
    w = torch.as_tensor(list(weights), dtype=stacked.dtype).view(-1, 1, 1, 1, 1)
    return torch.softmax((w * stacked).sum(dim=0), dim=1)


def pool_uncertainty(probs: list, weight_field: PixelWeightField) -> torch.Tensor:
    """Pixelwise weighted pooling: weights broadcast over depth and channel,
    Hadamard product with each member, summed, then channel softmax."""
    stacked = _stack_probs(probs)
    wf = weight_field.weights if isinstance(weight_field, PixelWeightField) else weight_field
    if wf.shape[0] != stacked.shape[0]:
        raise VolumeShapeError(
            f"weight field has {wf.shape[0]} classifiers, got {stacked.shape[0]} volumes"
        )
    if wf.shape[-2:] != stacked.shape[-2:]:
        raise VolumeShapeError("weight field spatial shape mismatch")
    w = wf[:, None, None, :, :]
    return torch.softmax((w * stacked).sum(dim=0), dim=1)


def predict_ensemble(
    config: EnsembleConfig,
    members: list[SliceClassifier],
    volume: CineVolume,
    mode: str = "eval",
) -> tuple[ProbVolume, PixelWeightField | None, list[UncertaintyMemory] | None]:
    """Two-pass ensemble prediction of one frame.

    Pass one collects every member's probability volume (and, in uncertainty
    mode, its memory); pass two pools. Memories are recomputed per frame and
    never carried across frames. Returns the pooled volume plus the weight
    field and memories for inspection when applicable.
    """
    config.validate()
    if config.mode not in ("fixed", "uncertainty"):
        raise ConfigError(f"predict_ensemble handles fixed/uncertainty, not {config.mode!r}")
    if len(members) != len(config.members):
        raise ConfigError(f"{len(members)} classifiers for {len(config.members)} member specs")
    frame_id = volume.frame_id if isinstance(volume, CineVolume) else ""
    outputs = [
        ProbVolume(forward_volume(m, volume, mode=mode), classifier_id=i)
        for i, m in enumerate(members)
    ]
    if config.mode == "fixed":
        pooled = pool_fixed(outputs, config.resolved_weights())
        return ProbVolume(pooled), None, None
    memories = [compute_memory(p, frame_id=frame_id) for p in outputs]
    wf = uncertainty_weights(memories)
    pooled = pool_uncertainty(outputs, wf)
    return ProbVolume(pooled), wf, memories


# ---------------------------------------------------------------------------
# Classical strategy harness (prediction side)
# ---------------------------------------------------------------------------


@dataclass
class StrategySetup:
    """Trained members plus pooling weights for the strategy harness.

    Stacking and bagging expect their already-trained members here (training
    differs, pooling does not); augmenting expects exactly one member and the
    invertible test-time transform list.
    """

    members: list[SliceClassifier]
    fixed_weights: tuple[float, ...] | None = None
    test_augmentations: AugmentationSpec | None = None


def _check_invertible(spec: AugmentationSpec) -> None:
    for angle in spec.rotations:
        if not is_right_angle(angle):
            raise ConfigError(
                f"augmenting requires invertible transforms; rotation {angle} is not a "
                "multiple of 90"
            )


def _transforms(spec: AugmentationSpec | None):
    """Forward/inverse transform pairs acting on (..., H, W) tensors."""
    pairs = [(lambda t: t, lambda t: t)]
    if spec is None:
        return pairs
    _check_invertible(spec)
    for angle in spec.rotations:
        k = int(float(angle) // 90) % 4
        pairs.append(
            (
                lambda t, k=k: torch.rot90(t, k=k, dims=(-2, -1)),
                lambda t, k=k: torch.rot90(t, k=-k, dims=(-2, -1)),
            )
        )
    for direction in spec.flips:
        axis = -1 if direction == "horizontal" else -2
        pairs.append(
            (
                lambda t, a=axis: torch.flip(t, dims=(a,)),
                lambda t, a=axis: torch.flip(t, dims=(a,)),
            )
        )
    return pairs


def run_strategy(
    mode: str, setup: StrategySetup, testset: list[CineVolume]
) -> list[ProbVolume]:
    """Predict every test frame under a classical ensemble strategy.

    Stacking and bagging pool their members' outputs with the same fixed
    weights as the fixed baseline. Augmenting predicts each spatially
    transformed copy of the frame with its single member, realigns the
    predictions through the inverse transforms, then pools.
    """
    if mode not in ("stacking", "bagging", "augmenting"):
        raise ConfigError(f"run_strategy handles stacking/bagging/augmenting, not {mode!r}")
    if not setup.members:
        raise ConfigError("strategy setup has no members")

    results = []
    if mode in ("stacking", "bagging"):
        n = len(setup.members)
        weights = setup.fixed_weights if setup.fixed_weights is not None else (1.0 / n,) * n
        for vol in testset:
            outs = [forward_volume(m, vol) for m in setup.members]
            results.append(ProbVolume(pool_fixed(outs, weights)))
        return results

    if len(setup.members) != 1:
        raise ConfigError("augmenting uses exactly one member")
    member = setup.members[0]
    pairs = _transforms(setup.test_augmentations)
    square_needed = any(
        not is_right_angle(a) or int(float(a) // 90) % 2
        for a in (setup.test_augmentations.rotations if setup.test_augmentations else ())
    )
    for vol in testset:
        vox = torch.as_tensor(vol.voxels)
        if square_needed and vox.shape[-1] != vox.shape[-2]:
            raise ConfigError("90-degree test augmentation needs square slices")
        variants = []
        for fwd, inv in pairs:
            pred = forward_volume(member, CineVolume(fwd(vox).numpy(), vol.frame_id, vol.phase))
            variants.append(inv(pred))
        w = setup.fixed_weights if setup.fixed_weights is not None else (1.0 / len(variants),) * len(variants)
        results.append(ProbVolume(pool_fixed(variants, w)))
    return results


def bootstrap_trainset(pairs: list, seed: int) -> list:
    """Resample a trainset with replacement to its original size."""
    if not pairs:
        raise ConfigError("cannot bootstrap an empty trainset")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    idx = rng.integers(0, len(pairs), size=len(pairs))
    return [pairs[i] for i in idx]
