"""End-to-end joint training of all ensemble members through the pooling
layer, with one shared loss and a single RMSprop optimizer.

The batch unit is the whole 3D frame: the depth mean that feeds the weight
field needs complete frames, so slices of one frame are never split across
steps. Every member sees every batch; one optimizer step updates all members
jointly.

The exact RMSprop rule (per parameter ``p`` with gradient ``grad``)::

    g   = grad + weight_decay * p
    sq  = smoothing * sq + (1 - smoothing) * g^2
    buf = momentum * buf + g / (sqrt(sq) + eps)
    p  -= learning_rate * buf

i.e. uncentered square-gradient smoothing, momentum applied after the
adaptive scaling. Training is bitwise deterministic given (seed, config,
dataset): the epoch shuffle derives from (seed, epoch) and dropout draws from
per-member generators, so resuming from a checkpoint replays the exact run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch

from .ensemble import (
    EnsembleConfig,
    PixelWeightField,
    bootstrap_trainset,
    compute_memory,
    pool_fixed,
    pool_uncertainty,
    uncertainty_weights,
)
from .errors import ConfigError, DataError, NumericError
from .losses import LossConfig, total_loss
from .models import SliceClassifier, forward_volume, init_classifier

TrainPair = tuple  # (CineVolume, LabelMask)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-7
    momentum: float = 0.9
    smoothing: float = 0.99
    eps: float = 1e-8
    batch_frames: int = 2
    epochs: int = 30
    seed: int = 0
    grad_check: bool = False
    freeze_weight_field: bool = False

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")
        if not (0.0 < self.smoothing < 1.0):
            raise ConfigError("smoothing must be in (0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")
        if self.batch_frames < 1:
            raise ConfigError("batch_frames must be >= 1")
        return self


@dataclass
class OptAccumulator:
    """Optimizer state of one parameter: square-gradient average and
    momentum buffer, shapes mirroring the parameter."""

    sq: torch.Tensor
    buf: torch.Tensor


@dataclass
class TrainState:
    members: list[SliceClassifier]
    accumulators: list[OptAccumulator]
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)  # one entry per step


def flat_named_params(members: list[SliceClassifier]) -> list[tuple[str, torch.nn.Parameter]]:
    """All member parameters in a fixed order, named ``m<i>.<param>``."""
    return [
        (f"m{i}.{name}", p)
        for i, m in enumerate(members)
        for name, p in m.named_parameters()
    ]


def init_train_state(members: list[SliceClassifier]) -> TrainState:
    if not members:
        raise ConfigError("need at least one member to train")
    accs = [
        OptAccumulator(sq=torch.zeros_like(p), buf=torch.zeros_like(p))
        for _, p in flat_named_params(members)
    ]
    return TrainState(members=members, accumulators=accs)


@torch.no_grad()
def rmsprop_step(params, grads, accumulators, cfg: TrainConfig):
    """One shared optimizer step over all parameters (rule in module docs)."""
    for p, grad, acc in zip(params, grads, accumulators):
        g = grad + cfg.weight_decay * p
        acc.sq.mul_(cfg.smoothing).add_((1.0 - cfg.smoothing) * g * g)
        acc.buf.mul_(cfg.momentum).add_(g / (acc.sq.sqrt() + cfg.eps))
        p.sub_(cfg.learning_rate * acc.buf)
    return params


def pooled_frame_probs(
    members: list[SliceClassifier],
    volume,
    config: EnsembleConfig,
    mode: str = "eval",
    freeze_weight_field: bool = False,
) -> torch.Tensor:
    """Forward every member over the frame and pool; differentiable end to end.

    With ``freeze_weight_field`` the uncertainty weights are detached from the
    graph (gradients stop at the weight field), the ablation counterpart of
    the default full backpropagation.
    """
    if config.mode not in ("fixed", "uncertainty"):
        raise ConfigError(f"training pools fixed/uncertainty, not {config.mode!r}")
    outs = [forward_volume(m, volume, mode=mode) for m in members]
    if config.mode == "fixed":
        return pool_fixed(outs, config.resolved_weights())
    wf = uncertainty_weights([compute_memory(p) for p in outs])
    if freeze_weight_field:
        wf = PixelWeightField(wf.weights.detach())
    return pool_uncertainty(outs, wf)


def train_epoch(
    state: TrainState,
    trainset: list[TrainPair],
    ensemble_config: EnsembleConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
) -> TrainState:
    """One pass over the trainset in (seed, epoch)-derived shuffled order.

    Per batch of frames: forward all members over each full frame, pool,
    average the total loss over the batch, backpropagate (through the weight
    field unless frozen), and apply one joint RMSprop step.
    """
    tcfg = train_config.validate()
    ensemble_config.validate()
    loss_config.validate()
    if not trainset:
        raise DataError("cannot train on an empty trainset")
    for m in state.members:
        m.train()
    params = [p for _, p in flat_named_params(state.members)]
    if len(params) != len(state.accumulators):
        raise ConfigError("optimizer accumulators do not match parameters")
    order = np.random.default_rng(
        np.random.SeedSequence((tcfg.seed, state.epoch))
    ).permutation(len(trainset))
    for start in range(0, len(order), tcfg.batch_frames):
        batch = [trainset[int(i)] for i in order[start : start + tcfg.batch_frames]]
        for p in params:
            p.grad = None
        frame_losses = []
        for vol, mask in batch:
            pooled = pooled_frame_probs(
                state.members,
                vol,
                ensemble_config,
                mode="train",
                freeze_weight_field=tcfg.freeze_weight_field,
            )
            frame_losses.append(total_loss(pooled, mask, loss_config))
        loss = torch.stack(frame_losses).mean()
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite loss {loss.item()} at epoch {state.epoch}, "
                f"batch starting at shuffled index {start}"
            )
        loss.backward()
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
        rmsprop_step(params, grads, state.accumulators, tcfg)
        state.loss_history.append(float(loss.detach()))
    state.epoch += 1
    return state


def fit(
    state: TrainState,
    trainset: list[TrainPair],
    ensemble_config: EnsembleConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    on_epoch=None,
) -> TrainState:
    """Run epochs until ``train_config.epochs`` are completed.

    ``on_epoch(state)``, if given, runs after every epoch (checkpointing,
    logging); resuming a partially trained state continues the same schedule.
    """
    train_config.validate()
    while state.epoch < train_config.epochs:
        train_epoch(state, trainset, ensemble_config, loss_config, train_config)
        if on_epoch is not None:
            on_epoch(state)
    return state


def fit_solo(spec, trainset, loss_config, train_config, on_epoch=None) -> TrainState:
    """Train one classifier alone (degenerate single-member fixed ensemble)."""
    member = init_classifier(spec)
    config = EnsembleConfig(mode="fixed", members=[spec], fixed_weights=(1.0,))
    state = init_train_state([member])
    return fit(state, trainset, config, loss_config, train_config, on_epoch=on_epoch)


def train_strategy(
    ensemble_config: EnsembleConfig,
    trainset: list[TrainPair],
    loss_config: LossConfig,
    train_config: TrainConfig,
) -> list[TrainState]:
    """Train members for the classical strategies.

    Stacking trains each (typically heterogeneous) member on the full
    trainset; bagging trains each member on its own bootstrap resample, with
    member ``i`` resampled under ``bootstrap_seed + i``; augmenting trains its
    single member normally (the augmentation happens at test time). Member
    diversity comes from each spec's own seed.
    """
    cfg = ensemble_config.validate()
    if cfg.mode not in ("stacking", "bagging", "augmenting"):
        raise ConfigError(f"train_strategy handles classical strategies, not {cfg.mode!r}")
    states = []
    for i, spec in enumerate(cfg.members):
        subset = (
            bootstrap_trainset(trainset, cfg.bootstrap_seed + i)
            if cfg.mode == "bagging"
            else trainset
        )
        states.append(fit_solo(spec, subset, loss_config, train_config))
    return states


# ---------------------------------------------------------------------------
# Gradient diagnostics
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    mode: str  # pooling mode, plus "(frozen)" when the weight field is detached
    checked: int
    max_rel_error: float
    tolerance: float
    failures: list[tuple[str, float]] = field(default_factory=list)
    refined: int = 0  # kink-straddling samples confirmed at smaller steps

    @property
    def passed(self) -> bool:
        return not self.failures

    def raise_if_failed(self) -> None:
        if self.failures:
            path, err = max(self.failures, key=lambda f: f[1])
            raise NumericError(
                f"gradient check failed for {len(self.failures)} parameters; "
                f"worst {path}: relative error {err:.3e} > {self.tolerance}"
            )


def gradient_check(
    members: list[SliceClassifier],
    pair: TrainPair,
    ensemble_config: EnsembleConfig,
    loss_config: LossConfig,
    samples_per_member: int = 100,
    step: float = 1e-4,
    tolerance: float = 1e-3,
    seed: int = 0,
    freeze_weight_field: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Members are cast to float64 in place and switched to eval mode (dropout
    off, so the loss is a deterministic function of the parameters). A seeded
    random subset of at least ``samples_per_member`` parameters per member is
    perturbed by ``±step``; relative error uses the larger of the two
    magnitudes as denominator (floored to dodge 0/0).

    A probe interval can straddle a ReLU or max-pool kink, where a fixed-step
    finite difference is wrong by construction; samples failing at ``step``
    are therefore re-probed at smaller steps. A genuine analytic-gradient
    error persists at every scale and still fails; a kink artifact converges
    to the analytic value and is counted in ``refined``.
    """
    volume, mask = pair
    for m in members:
        m.double()
        m.eval()
        m.zero_grad(set_to_none=True)

    if ensemble_config.mode == "uncertainty" and freeze_weight_field:
        # The frozen ablation differentiates L(theta, stop-grad(w(theta))),
        # so its finite-difference counterpart must hold the weight field at
        # the base-point value while the parameters move.
        with torch.no_grad():
            base_outs = [forward_volume(m, volume, mode="eval") for m in members]
            base_wf = uncertainty_weights([compute_memory(p) for p in base_outs])

        def loss_value() -> torch.Tensor:
            outs = [forward_volume(m, volume, mode="eval") for m in members]
            return total_loss(pool_uncertainty(outs, base_wf), mask, loss_config)

    else:

        def loss_value() -> torch.Tensor:
            pooled = pooled_frame_probs(
                members, volume, ensemble_config, mode="eval",
                freeze_weight_field=freeze_weight_field,
            )
            return total_loss(pooled, mask, loss_config)

    loss_value().backward()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    report = GradCheckReport(
        mode=ensemble_config.mode + (" (frozen)" if freeze_weight_field else ""),
        checked=0,
        max_rel_error=0.0,
        tolerance=tolerance,
    )
    for mi, member in enumerate(members):
        named = list(member.named_parameters())
        sizes = [p.numel() for _, p in named]
        total = sum(sizes)
        picks = rng.choice(total, size=min(samples_per_member, total), replace=False)
        for flat in sorted(int(i) for i in picks):
            j = 0
            while flat >= sizes[j]:
                flat -= sizes[j]
                j += 1
            name, p = named[j]
            analytic = float(p.grad.view(-1)[flat]) if p.grad is not None else 0.0
            values = p.data.view(-1)
            orig = values[flat].item()

            def central(h: float) -> float:
                with torch.no_grad():
                    values[flat] = orig + h
                    upper = float(loss_value())
                    values[flat] = orig - h
                    lower = float(loss_value())
                    values[flat] = orig
                return (upper - lower) / (2.0 * h)

            def rel_of(fd: float) -> float:
                return abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)

            rel = rel_of(central(step))
            if rel > tolerance:
                for h in (step / 10.0, step / 100.0):
                    rel = min(rel, rel_of(central(h)))
                    if rel <= tolerance:
                        report.refined += 1
                        break
            report.checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel > tolerance:
                report.failures.append((f"m{mi}.{name}[{flat}]", rel))
    return report


@dataclass
class FrozenWeightGap:
    """Named diagnostic: how much the gradients change when the weight field
    is treated as a constant instead of backpropagated through."""

    max_abs_diff: float
    rel_diff: float  # ||g_full - g_frozen|| / ||g_full||


def frozen_weight_gradient_gap(
    members: list[SliceClassifier],
    pair: TrainPair,
    ensemble_config: EnsembleConfig,
    loss_config: LossConfig,
) -> FrozenWeightGap:
    """Analytic-gradient gap between full backprop and the frozen-weight-field
    ablation on one fixed instance (eval mode, same parameters)."""
    if ensemble_config.mode != "uncertainty":
        raise ConfigError("the frozen-weight diagnostic needs uncertainty mode")
    volume, mask = pair
    for m in members:
        m.eval()
    flats = {}
    for freeze in (False, True):
        for m in members:
            m.zero_grad(set_to_none=True)
        pooled = pooled_frame_probs(
            members, volume, ensemble_config, mode="eval", freeze_weight_field=freeze
        )
        total_loss(pooled, mask, loss_config).backward()
        flats[freeze] = torch.cat(
            [
                (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1)
                for _, p in flat_named_params(members)
            ]
        ).detach().clone()
    diff = flats[False] - flats[True]
    return FrozenWeightGap(
        max_abs_diff=float(diff.abs().max()),
        rel_diff=float(diff.norm()) / max(float(flats[False].norm()), 1e-12),
    )


def solo_eval_config(ensemble_config: EnsembleConfig, member_index: int) -> EnsembleConfig:
    """Config that evaluates one member of a trained ensemble on its own."""
    if not (0 <= member_index < len(ensemble_config.members)):
        raise ConfigError(f"member index {member_index} out of range")
    return dataclasses.replace(
        ensemble_config,
        mode="fixed",
        members=[ensemble_config.members[member_index]],
        fixed_weights=(1.0,),
    )
