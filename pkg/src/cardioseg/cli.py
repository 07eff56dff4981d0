"""Command-line entry points.

Subcommands: ``generate`` (phantom datasets), ``train`` (joint or
per-member), ``eval`` (metric CSVs for any pooling mode), ``sweep`` (one
metric CSV per named configuration), ``render`` (overlays and heatmaps), and
``cost`` (parameter/FLOP accounting).

Every artifact-producing run writes a ``run_manifest.json`` recording the
command, a config snapshot, the governing seed, a content hash of the inputs,
the output paths, and the wall-clock duration. Exit codes: 0 success, 2
configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .checkpoint import load_train_state, save_train_state
from .config import ExperimentConfig, load_experiment, load_phantom, load_sweep
from .costs import cost_report
from .ensemble import EnsembleConfig, StrategySetup, predict_ensemble, run_strategy
from .errors import ConfigError, DataError, NumericError
from .metrics import argmax_mask, evaluate_testset, write_metrics_csv
from .models import init_classifier
from .pvol import INDEX_NAME, load_dataset, save_dataset
from .render import render_frame
from .training import (
    fit,
    gradient_check,
    init_train_state,
    solo_eval_config,
    train_strategy,
)
from .volume import CineVolume, LabelMask, generate_phantom

STRATEGY_MODES = ("stacking", "bagging", "augmenting")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    input_hash: str
    outputs: list[str]
    duration_seconds: float


def hash_inputs(paths) -> str:
    """Content hash over the named input files, order-independent."""
    digest = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        digest.update(p.name.encode())
        digest.update(b"\0")
        digest.update(p.read_bytes())
    return digest.hexdigest()


def _dataset_files(data_dir) -> list[Path]:
    data_dir = Path(data_dir)
    return [p for p in sorted(data_dir.iterdir()) if p.is_file()]


def write_manifest(out_dir, manifest: RunManifest) -> Path:
    path = Path(out_dir) / "run_manifest.json"
    path.write_text(
        json.dumps(dataclasses.asdict(manifest), sort_keys=True, indent=2) + "\n"
    )
    return path


def _require_masks(data) -> list[tuple[CineVolume, LabelMask]]:
    for vol, mask in data:
        if mask is None:
            raise DataError(f"frame {vol.frame_id!r} has no ground-truth mask")
    return data


def _write_loss_csv(path, states, n_frames: int, batch_frames: int) -> Path:
    """Per-epoch loss rows; ``member`` is -1 for jointly trained ensembles."""
    steps = max(1, math.ceil(n_frames / batch_frames))
    with Path(path).open("w", newline="") as fh:
        fh.write("member,epoch,steps,mean_loss\n")
        for member_id, state in states:
            for epoch in range(state.epoch):
                chunk = state.loss_history[epoch * steps : (epoch + 1) * steps]
                mean = sum(chunk) / len(chunk) if chunk else float("nan")
                fh.write(f"{member_id},{epoch},{len(chunk)},{mean:.9f}\n")
    return Path(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    start = time.monotonic()
    spec = load_phantom(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed).validate()
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    pairs = generate_phantom(spec, args.count)
    out = Path(args.out)
    save_dataset(out, pairs, meta={"phantom": dataclasses.asdict(spec), "count": args.count})
    outputs = [str(out / INDEX_NAME)] + [str(out / f"{v.frame_id}.pvol") for v, _ in pairs]
    write_manifest(
        out,
        RunManifest(
            command="generate",
            config={"phantom": dataclasses.asdict(spec), "count": args.count},
            seed=spec.seed,
            input_hash=hash_inputs([args.spec]),
            outputs=outputs,
            duration_seconds=time.monotonic() - start,
        ),
    )
    print(f"wrote {len(pairs)} volumes to {out}")
    return 0


def _run_grad_check(cfg: ExperimentConfig, pairs) -> None:
    """Check analytic gradients on a cropped instance before training."""
    if cfg.ensemble.mode not in ("fixed", "uncertainty"):
        raise ConfigError("grad_check applies to joint fixed/uncertainty training")
    vol, mask = pairs[0]
    side = 2 * max(2**s.depth_levels for s in cfg.ensemble.members)
    d, h, w = vol.voxels.shape
    if h < side or w < side:
        raise ConfigError(f"gradient check needs slices of at least {side}x{side}")
    depth = min(d, 3)
    pair = (
        CineVolume(vol.voxels[:depth, :side, :side].copy(), vol.frame_id, vol.phase),
        LabelMask(mask.labels[:depth, :side, :side].copy()),
    )
    members = [init_classifier(s) for s in cfg.ensemble.members]
    report = gradient_check(
        members, pair, cfg.ensemble, cfg.loss,
        freeze_weight_field=cfg.train.freeze_weight_field,
    )
    report.raise_if_failed()
    print(
        f"gradient check passed: {report.checked} parameters, "
        f"max relative error {report.max_rel_error:.3e}"
    )


def cmd_train(args) -> int:
    start = time.monotonic()
    cfg = load_experiment(args.config)
    pairs = _require_masks(load_dataset(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.train.grad_check:
        _run_grad_check(cfg, pairs)
    outputs: list[str] = []

    if cfg.ensemble.mode in ("fixed", "uncertainty"):
        if args.resume:
            state = load_train_state(args.resume)
            have = [m.spec.to_dict() for m in state.members]
            want = [s.to_dict() for s in cfg.ensemble.members]
            if have != want:
                raise DataError(
                    f"checkpoint/config member mismatch: {have} != {want}"
                )
        else:
            state = init_train_state([init_classifier(s) for s in cfg.ensemble.members])

        def on_epoch(st):
            if args.checkpoint_every and st.epoch % args.checkpoint_every == 0:
                p = save_train_state(out / f"epoch_{st.epoch:04d}.ckpt", st)
                outputs.append(str(p))

        fit(state, pairs, cfg.ensemble, cfg.loss, cfg.train, on_epoch=on_epoch)
        outputs.append(str(save_train_state(out / "final.ckpt", state)))
        loss_rows = [(-1, state)]
    else:
        if args.resume:
            raise ConfigError("--resume is only supported for joint fixed/uncertainty training")
        states = train_strategy(cfg.ensemble, pairs, cfg.loss, cfg.train)
        for i, st in enumerate(states):
            outputs.append(str(save_train_state(out / f"member_{i}.ckpt", st)))
        loss_rows = list(enumerate(states))

    outputs.append(
        str(_write_loss_csv(out / "loss.csv", loss_rows, len(pairs), cfg.train.batch_frames))
    )
    write_manifest(
        out,
        RunManifest(
            command="train",
            config=cfg.raw,
            seed=cfg.train.seed,
            input_hash=hash_inputs([args.config] + _dataset_files(args.data)),
            outputs=outputs,
            duration_seconds=time.monotonic() - start,
        ),
    )
    print(f"trained {cfg.ensemble.mode} ensemble for {cfg.train.epochs} epochs -> {out}")
    return 0


def _load_members(paths):
    members = []
    for p in paths:
        members.extend(load_train_state(p).members)
    return members


def _predictions(cfg: ExperimentConfig, members, volumes, mode: str):
    """Pooled probability volumes for every frame under the requested mode."""
    if mode in ("fixed", "uncertainty"):
        econfig = dataclasses.replace(cfg.ensemble, mode=mode).validate()
        return [predict_ensemble(econfig, members, v)[0] for v in volumes]
    if mode.startswith("member:"):
        try:
            index = int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad member mode {mode!r}; use member:<index>") from None
        solo = solo_eval_config(cfg.ensemble, index)
        return [predict_ensemble(solo, [members[index]], v)[0] for v in volumes]
    if mode in STRATEGY_MODES:
        setup = StrategySetup(
            members=members,
            fixed_weights=cfg.ensemble.fixed_weights,
            test_augmentations=cfg.ensemble.test_augmentations,
        )
        return run_strategy(mode, setup, volumes)
    raise ConfigError(f"unknown eval mode {mode!r}")


def cmd_eval(args) -> int:
    start = time.monotonic()
    cfg = load_experiment(args.config)
    data = _require_masks(load_dataset(args.data))
    members = _load_members(args.checkpoint)
    have = [m.spec.to_dict() for m in members]
    want = [s.to_dict() for s in cfg.ensemble.members]
    if have != want:
        raise DataError(f"checkpoint/config member mismatch: {have} != {want}")
    mode = args.mode or cfg.ensemble.mode
    volumes = [v for v, _ in data]
    preds = _predictions(cfg, members, volumes, mode)
    frames = [(argmax_mask(p), mask) for p, (_, mask) in zip(preds, data)]
    records, aggregate = evaluate_testset(
        frames, cfg.eval, frame_ids=[v.frame_id for v in volumes]
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_metrics_csv(records, aggregate, out / "metrics.csv")
    write_manifest(
        out,
        RunManifest(
            command="eval",
            config={**cfg.raw, "mode": mode},
            seed=None,
            input_hash=hash_inputs(
                [args.config] + list(args.checkpoint) + _dataset_files(args.data)
            ),
            outputs=[str(csv_path)],
            duration_seconds=time.monotonic() - start,
        ),
    )
    print(
        f"evaluated {len(frames)} frames ({mode}): "
        f"average DSC {aggregate['average_dsc']:.4f}, EC {aggregate['ec']:.4f}"
    )
    return 0


def cmd_sweep(args) -> int:
    start = time.monotonic()
    variants = load_sweep(args.config)
    train_pairs = _require_masks(load_dataset(args.train_data))
    test_pairs = _require_masks(load_dataset(args.test_data))
    volumes = [v for v, _ in test_pairs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, cfg in variants:
        mode = cfg.ensemble.mode
        if mode in ("fixed", "uncertainty"):
            state = init_train_state([init_classifier(s) for s in cfg.ensemble.members])
            fit(state, train_pairs, cfg.ensemble, cfg.loss, cfg.train)
            members = state.members
        else:
            members = [
                st.members[0]
                for st in train_strategy(cfg.ensemble, train_pairs, cfg.loss, cfg.train)
            ]
        preds = _predictions(cfg, members, volumes, mode)
        frames = [(argmax_mask(p), mask) for p, (_, mask) in zip(preds, test_pairs)]
        records, aggregate = evaluate_testset(
            frames, cfg.eval, frame_ids=[v.frame_id for v in volumes]
        )
        csv_path = write_metrics_csv(records, aggregate, out / f"{name}.csv")
        outputs.append(str(csv_path))
        print(
            f"{name}: average DSC {aggregate['average_dsc']:.4f}, "
            f"EC {aggregate['ec']:.4f}"
        )
    write_manifest(
        out,
        RunManifest(
            command="sweep",
            config={"configurations": [name for name, _ in variants]},
            seed=None,
            input_hash=hash_inputs(
                [args.config] + _dataset_files(args.train_data) + _dataset_files(args.test_data)
            ),
            outputs=outputs,
            duration_seconds=time.monotonic() - start,
        ),
    )
    return 0


def _select_frame(data, token: str):
    try:
        index = int(token)
    except ValueError:
        for vol, mask in data:
            if vol.frame_id == token:
                return vol, mask
        raise DataError(f"no frame with id {token!r}") from None
    if not (0 <= index < len(data)):
        raise DataError(f"frame index {index} out of range (0..{len(data) - 1})")
    return data[index]


def cmd_render(args) -> int:
    start = time.monotonic()
    members = _load_members([args.checkpoint])
    data = load_dataset(args.data)
    vol, mask = _select_frame(data, args.frame)
    econfig = EnsembleConfig(
        mode="uncertainty" if len(members) >= 2 else "fixed",
        members=[m.spec for m in members],
    )
    pooled, weight_field, memories = predict_ensemble(econfig, members, vol)
    pred = argmax_mask(pooled)
    if args.members is not None:
        try:
            keep = [int(tok) for tok in args.members.split(",") if tok != ""]
        except ValueError:
            raise ConfigError(f"--members must be comma-separated indices, got {args.members!r}") from None
        if any(not 0 <= k < len(members) for k in keep):
            raise ConfigError(f"--members indices out of range 0..{len(members) - 1}")
        if memories is not None:
            memories = [memories[k] for k in keep]
        if weight_field is not None:
            weight_field = weight_field.weights[keep]
    out = Path(args.out)
    meta = render_frame(
        out, vol, pred, truth_mask=mask, weight_field=weight_field, memories=memories
    )
    meta_path = out / "render_meta.json"
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    write_manifest(
        out,
        RunManifest(
            command="render",
            config={"frame": vol.frame_id, "members": args.members},
            seed=None,
            input_hash=hash_inputs([args.checkpoint] + _dataset_files(args.data)),
            outputs=meta["files"] + [str(meta_path)],
            duration_seconds=time.monotonic() - start,
        ),
    )
    print(f"rendered {vol.frame_id} -> {out}")
    return 0


def _parse_frame_shape(token: str):
    parts = token.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"--frame-shape must look like 10x64x64, got {token!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--frame-shape must be integers, got {token!r}") from None


def cmd_cost(args) -> int:
    start = time.monotonic()
    cfg = load_experiment(args.config)
    shape = _parse_frame_shape(args.frame_shape)
    mode = cfg.ensemble.mode if cfg.ensemble.mode in ("fixed", "uncertainty") else "auto"
    report = cost_report(cfg.ensemble.members, shape, mode=mode)
    text = json.dumps(report.as_dict(), sort_keys=True, indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cost_path = out / "cost.json"
        cost_path.write_text(text + "\n")
        write_manifest(
            out,
            RunManifest(
                command="cost",
                config=cfg.raw,
                seed=None,
                input_hash=hash_inputs([args.config]),
                outputs=[str(cost_path)],
                duration_seconds=time.monotonic() - start,
            ),
        )
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardioseg",
        description="Ensemble slice-classifier segmentation toolkit for 3D cardiac volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic phantom dataset")
    g.add_argument("--spec", required=True, help="config file with a phantom section")
    g.add_argument("--count", type=int, required=True, help="number of volumes")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, default=None, help="override the phantom seed")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train an ensemble on a dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="training dataset directory")
    t.add_argument("--out", required=True, help="output directory for checkpoints")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                   help="also checkpoint every N epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints on a dataset")
    e.add_argument("--checkpoint", required=True, nargs="+",
                   help="checkpoint file(s); members are concatenated in order")
    e.add_argument("--config", required=True)
    e.add_argument("--data", required=True, help="evaluation dataset directory")
    e.add_argument("--mode", default=None,
                   help="fixed | uncertainty | stacking | bagging | augmenting | member:<i> "
                        "(default: the config's mode)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train and evaluate every named configuration")
    s.add_argument("--config", required=True, help="sweep config file")
    s.add_argument("--train-data", required=True)
    s.add_argument("--test-data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("render", help="render overlays and uncertainty heatmaps")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--frame", default="0", help="frame index or frame id")
    r.add_argument("--members", default=None,
                   help="comma-separated member indices to render heatmaps for")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("cost", help="parameter and FLOP accounting")
    c.add_argument("--config", required=True)
    c.add_argument("--frame-shape", required=True, help="e.g. 10x64x64")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
