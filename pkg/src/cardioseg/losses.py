"""Training losses over pooled probabilities: weighted soft Dice plus a
scaled Focal term.

Soft Dice uses additive smoothing in numerator and denominator so empty
classes stay defined and the loss is differentiable everywhere. The Focal
term is averaged over voxels, which keeps the x10 combination weight
independent of frame resolution. Probabilities are clamped away from 0 and 1
before the log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, VolumeShapeError
from .volume import NUM_CLASSES, LabelMask


@dataclass
class LossConfig:
    # class order BG, RV, MYO, LV; RV carries double Dice weight
    dice_weights: tuple[float, float, float, float] = (1.0, 2.0, 1.0, 1.0)
    focal_alpha: tuple[float, float, float, float] = (0.1, 0.1, 0.1, 0.1)
    focal_gamma: float = 2.0
    focal_scale: float = 10.0
    smooth_eps: float = 1e-6

    def validate(self) -> "LossConfig":
        if len(self.dice_weights) != NUM_CLASSES or any(w <= 0 for w in self.dice_weights):
            raise ConfigError(f"dice_weights must be {NUM_CLASSES} positive reals")
        if len(self.focal_alpha) != NUM_CLASSES or any(a < 0 for a in self.focal_alpha):
            raise ConfigError(f"focal_alpha must be {NUM_CLASSES} nonnegative reals")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.focal_scale < 0:
            raise ConfigError(f"focal_scale must be >= 0, got {self.focal_scale}")
        if self.smooth_eps <= 0:
            raise ConfigError(f"smooth_eps must be > 0, got {self.smooth_eps}")
        return self

    @classmethod
    def with_scalars(cls, alpha: float = 0.1, **kwargs) -> "LossConfig":
        return cls(focal_alpha=(alpha,) * NUM_CLASSES, **kwargs)


def _as_pred(pred) -> torch.Tensor:
    t = pred.probs if hasattr(pred, "probs") else torch.as_tensor(pred)
    if t.dim() != 4 or t.shape[1] != NUM_CLASSES:
        raise VolumeShapeError(f"expected (D, 4, H, W) probabilities, got {tuple(t.shape)}")
    return t


def _one_hot(truth, like: torch.Tensor) -> torch.Tensor:
    labels = truth.labels if isinstance(truth, LabelMask) else truth
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long, device=like.device)
    if labels.shape != (like.shape[0],) + like.shape[2:]:
        raise VolumeShapeError(
            f"mask shape {tuple(labels.shape)} does not match prediction "
            f"{tuple(like.shape)}"
        )
    oh = torch.nn.functional.one_hot(labels, NUM_CLASSES)
    return oh.permute(0, 3, 1, 2).to(like.dtype)


def dice_loss(pred, truth, cfg: LossConfig | None = None) -> torch.Tensor:
    """Weighted soft Dice: ``sum_j w_j * (1 - DSC_soft(pred_j, truth_j))``.

    The soft DSC of one class is ``(2 * sum(p*y) + eps) / (sum(p) + sum(y) + eps)``
    over all voxels of the frame.
    """
    cfg = (cfg or LossConfig()).validate()
    p = _as_pred(pred)
    y = _one_hot(truth, p)
    inter = (p * y).sum(dim=(0, 2, 3))
    denom = p.sum(dim=(0, 2, 3)) + y.sum(dim=(0, 2, 3))
    dsc = (2.0 * inter + cfg.smooth_eps) / (denom + cfg.smooth_eps)
    w = torch.as_tensor(cfg.dice_weights, dtype=p.dtype, device=p.device)
    return (w * (1.0 - dsc)).sum()


def focal_loss(pred, truth, cfg: LossConfig | None = None) -> torch.Tensor:
    """Focal loss ``-sum_j a_j * (1 - p_j)^gamma * y_j * log(p_j)``, averaged
    over voxels."""
    cfg = (cfg or LossConfig()).validate()
    p = _as_pred(pred)
    y = _one_hot(truth, p)
    eps = cfg.smooth_eps
    pc = p.clamp(eps, 1.0 - eps)
    a = torch.as_tensor(cfg.focal_alpha, dtype=p.dtype, device=p.device).view(1, -1, 1, 1)
    per_voxel = (a * (1.0 - pc) ** cfg.focal_gamma * y * (-torch.log(pc))).sum(dim=1)
    return per_voxel.mean()


def total_loss(pred, truth, cfg: LossConfig | None = None) -> torch.Tensor:
    """Combined objective: Dice plus ``focal_scale`` times Focal."""
    cfg = (cfg or LossConfig()).validate()
    return dice_loss(pred, truth, cfg) + cfg.focal_scale * focal_loss(pred, truth, cfg)
