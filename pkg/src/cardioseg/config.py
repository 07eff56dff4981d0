"""Declarative YAML experiment configuration.

One file with sections mirroring the module configs — ``members``,
``ensemble``, ``loss``, ``train``, ``eval``, ``phantom`` — plus sweep files
that add a ``configurations`` list of named member/ensemble variants sharing
the other sections. Unknown keys are hard errors (reported with their full
key path) so typos never pass silently; numeric fields accept strings like
``1e-4`` that YAML would otherwise keep as text.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .ensemble import EnsembleConfig
from .errors import ConfigError
from .losses import LossConfig
from .metrics import EvalConfig
from .models import ClassifierSpec
from .training import TrainConfig
from .volume import AugmentationSpec, PhantomSpec

SECTIONS = ("members", "ensemble", "loss", "train", "eval", "phantom")


@dataclass
class ExperimentConfig:
    ensemble: EnsembleConfig
    loss: LossConfig
    train: TrainConfig
    eval: EvalConfig
    phantom: PhantomSpec | None = None
    raw: dict = field(default_factory=dict)  # parsed file, for manifests


def load_yaml(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _check_keys(d: dict, allowed, path: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(d).__name__}")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"unknown config key {path}.{key}")


def _as_float(value, path: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a number, got {value!r}") from None


def _as_int(value, path: str) -> int:
    f = _as_float(value, path)
    if f != int(f):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    return int(f)


def _as_bool(value, path: str) -> bool:
    if isinstance(value, bool):
        return value
    raise ConfigError(f"{path}: expected true/false, got {value!r}")


def _as_list(value, path: str) -> list:
    if not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
    return value


def parse_member(d: dict, path: str) -> ClassifierSpec:
    _check_keys(d, ("arch", "base_channels", "depth_levels", "bottleneck_channels",
                    "dropout_p", "seed"), path)
    spec = ClassifierSpec()
    kwargs = dict(
        arch=d.get("arch", spec.arch),
        base_channels=_as_int(d.get("base_channels", spec.base_channels), f"{path}.base_channels"),
        depth_levels=_as_int(d.get("depth_levels", spec.depth_levels), f"{path}.depth_levels"),
        bottleneck_channels=_as_int(
            d.get("bottleneck_channels", spec.bottleneck_channels), f"{path}.bottleneck_channels"
        ),
        dropout_p=_as_float(d.get("dropout_p", spec.dropout_p), f"{path}.dropout_p"),
        seed=_as_int(d.get("seed", spec.seed), f"{path}.seed"),
    )
    return ClassifierSpec(**kwargs).validate()


def parse_members(value, path: str = "members") -> list[ClassifierSpec]:
    members = _as_list(value, path)
    if not members:
        raise ConfigError(f"{path}: at least one member is required")
    return [parse_member(m, f"{path}[{i}]") for i, m in enumerate(members)]


def parse_augmentations(d: dict, path: str) -> AugmentationSpec:
    _check_keys(d, ("rotations", "flips", "enabled"), path)
    return AugmentationSpec(
        rotations=tuple(
            _as_float(a, f"{path}.rotations[{i}]")
            for i, a in enumerate(_as_list(d.get("rotations", []), f"{path}.rotations"))
        ),
        flips=tuple(_as_list(d.get("flips", []), f"{path}.flips")),
        enabled=_as_bool(d.get("enabled", True), f"{path}.enabled"),
    ).validate()


def parse_ensemble(d: dict, members: list[ClassifierSpec], path: str = "ensemble") -> EnsembleConfig:
    _check_keys(d, ("mode", "fixed_weights", "bootstrap_seed", "test_augmentations"), path)
    weights = d.get("fixed_weights")
    if weights is not None:
        weights = tuple(
            _as_float(w, f"{path}.fixed_weights[{i}]")
            for i, w in enumerate(_as_list(weights, f"{path}.fixed_weights"))
        )
    aug = d.get("test_augmentations")
    return EnsembleConfig(
        mode=d.get("mode", "uncertainty"),
        members=members,
        fixed_weights=weights,
        bootstrap_seed=_as_int(d.get("bootstrap_seed", 0), f"{path}.bootstrap_seed"),
        test_augmentations=(
            parse_augmentations(aug, f"{path}.test_augmentations") if aug is not None else None
        ),
    ).validate()


def parse_loss(d: dict, path: str = "loss") -> LossConfig:
    _check_keys(d, ("dice_weights", "focal_alpha", "focal_gamma", "focal_scale",
                    "smooth_eps"), path)
    base = LossConfig()
    weights = d.get("dice_weights")
    if weights is not None:
        weights = tuple(
            _as_float(w, f"{path}.dice_weights[{i}]")
            for i, w in enumerate(_as_list(weights, f"{path}.dice_weights"))
        )
    alpha = d.get("focal_alpha")
    if alpha is None:
        alpha = base.focal_alpha
    elif isinstance(alpha, list):
        alpha = tuple(_as_float(a, f"{path}.focal_alpha[{i}]") for i, a in enumerate(alpha))
    else:
        alpha = (_as_float(alpha, f"{path}.focal_alpha"),) * 4
    return LossConfig(
        dice_weights=weights if weights is not None else base.dice_weights,
        focal_alpha=alpha,
        focal_gamma=_as_float(d.get("focal_gamma", base.focal_gamma), f"{path}.focal_gamma"),
        focal_scale=_as_float(d.get("focal_scale", base.focal_scale), f"{path}.focal_scale"),
        smooth_eps=_as_float(d.get("smooth_eps", base.smooth_eps), f"{path}.smooth_eps"),
    ).validate()


def parse_train(d: dict, path: str = "train") -> TrainConfig:
    _check_keys(d, ("learning_rate", "weight_decay", "momentum", "smoothing", "eps",
                    "batch_frames", "epochs", "seed", "grad_check",
                    "freeze_weight_field"), path)
    base = TrainConfig()
    return TrainConfig(
        learning_rate=_as_float(d.get("learning_rate", base.learning_rate), f"{path}.learning_rate"),
        weight_decay=_as_float(d.get("weight_decay", base.weight_decay), f"{path}.weight_decay"),
        momentum=_as_float(d.get("momentum", base.momentum), f"{path}.momentum"),
        smoothing=_as_float(d.get("smoothing", base.smoothing), f"{path}.smoothing"),
        eps=_as_float(d.get("eps", base.eps), f"{path}.eps"),
        batch_frames=_as_int(d.get("batch_frames", base.batch_frames), f"{path}.batch_frames"),
        epochs=_as_int(d.get("epochs", base.epochs), f"{path}.epochs"),
        seed=_as_int(d.get("seed", base.seed), f"{path}.seed"),
        grad_check=_as_bool(d.get("grad_check", base.grad_check), f"{path}.grad_check"),
        freeze_weight_field=_as_bool(
            d.get("freeze_weight_field", base.freeze_weight_field), f"{path}.freeze_weight_field"
        ),
    ).validate()


def parse_eval(d: dict, path: str = "eval") -> EvalConfig:
    _check_keys(d, ("ec_threshold", "end_slice_count", "slice_spacing"), path)
    base = EvalConfig()
    return EvalConfig(
        ec_threshold=_as_float(d.get("ec_threshold", base.ec_threshold), f"{path}.ec_threshold"),
        end_slice_count=_as_int(
            d.get("end_slice_count", base.end_slice_count), f"{path}.end_slice_count"
        ),
        slice_spacing=_as_float(
            d.get("slice_spacing", base.slice_spacing), f"{path}.slice_spacing"
        ),
    ).validate()


def parse_phantom(d: dict, path: str = "phantom") -> PhantomSpec:
    _check_keys(d, ("depth_range", "image_size", "ring_radii", "noise_sigma",
                    "taper", "seed"), path)
    base = PhantomSpec()

    def pair(value, p, cast):
        items = _as_list(value, p)
        if len(items) != 2:
            raise ConfigError(f"{p}: expected two values")
        return (cast(items[0], f"{p}[0]"), cast(items[1], f"{p}[1]"))

    radii = dict(base.ring_radii)
    if "ring_radii" in d:
        _check_keys(d["ring_radii"], ("lv", "myo", "rv"), f"{path}.ring_radii")
        for name, rng in d["ring_radii"].items():
            radii[name] = pair(rng, f"{path}.ring_radii.{name}", _as_float)
    return PhantomSpec(
        depth_range=(
            pair(d["depth_range"], f"{path}.depth_range", _as_int)
            if "depth_range" in d
            else base.depth_range
        ),
        image_size=(
            pair(d["image_size"], f"{path}.image_size", _as_int)
            if "image_size" in d
            else base.image_size
        ),
        ring_radii=radii,
        noise_sigma=_as_float(d.get("noise_sigma", base.noise_sigma), f"{path}.noise_sigma"),
        taper=_as_float(d.get("taper", base.taper), f"{path}.taper"),
        seed=_as_int(d.get("seed", base.seed), f"{path}.seed"),
    ).validate()


def build_experiment(data: dict) -> ExperimentConfig:
    _check_keys(data, SECTIONS, "config")
    if "members" not in data:
        raise ConfigError("config: a members section is required")
    members = parse_members(data["members"])
    return ExperimentConfig(
        ensemble=parse_ensemble(data.get("ensemble", {}), members),
        loss=parse_loss(data.get("loss", {})),
        train=parse_train(data.get("train", {})),
        eval=parse_eval(data.get("eval", {})),
        phantom=parse_phantom(data["phantom"]) if "phantom" in data else None,
        raw=data,
    )


def load_experiment(path) -> ExperimentConfig:
    return build_experiment(load_yaml(path))


def load_phantom(path) -> PhantomSpec:
    """Phantom spec from a config file's ``phantom`` section."""
    data = load_yaml(path)
    if "phantom" not in data:
        raise ConfigError(f"{path}: no phantom section")
    return parse_phantom(data["phantom"])


def load_sweep(path) -> list[tuple[str, ExperimentConfig]]:
    """Named experiment variants sharing loss/train/eval/phantom sections."""
    data = load_yaml(path)
    _check_keys(data, ("loss", "train", "eval", "phantom", "configurations"), "config")
    variants = _as_list(data.get("configurations", []), "configurations")
    if not variants:
        raise ConfigError("sweep config has no configurations")
    out = []
    seen = set()
    for i, entry in enumerate(variants):
        path_i = f"configurations[{i}]"
        _check_keys(entry, ("name", "members", "ensemble"), path_i)
        name = entry.get("name")
        if not isinstance(name, str) or not name:
            raise ConfigError(f"{path_i}: a non-empty name is required")
        if name in seen:
            raise ConfigError(f"{path_i}: duplicate configuration name {name!r}")
        seen.add(name)
        merged = {
            "members": entry.get("members"),
            "ensemble": entry.get("ensemble", {}),
            **{k: data[k] for k in ("loss", "train", "eval", "phantom") if k in data},
        }
        if merged["members"] is None:
            raise ConfigError(f"{path_i}: a members list is required")
        out.append((name, build_experiment(merged)))
    return out
