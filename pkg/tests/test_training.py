"""Joint training loop, shared optimizer, gradient checks, checkpoints."""

import math

import numpy as np
import pytest
import torch

import cardioseg as cs
from cardioseg.checkpoint import load_train_state, read_arrays, save_train_state, write_arrays
from cardioseg.training import OptAccumulator, flat_named_params, pooled_frame_probs


def _tiny_specs(dropout=0.0, seeds=(1, 2)):
    return [cs.ClassifierSpec(base_channels=4, depth_levels=2, bottleneck_channels=8,
                              dropout_p=dropout, seed=s) for s in seeds]


def _tiny_run(pairs, dropout=0.0, epochs=2, mode="uncertainty", lr=1e-3, seed=0):
    specs = _tiny_specs(dropout)
    cfg = cs.EnsembleConfig(mode=mode, members=specs)
    state = cs.init_train_state([cs.init_classifier(s) for s in specs])
    tcfg = cs.TrainConfig(learning_rate=lr, epochs=epochs, batch_frames=2, seed=seed)
    cs.fit(state, pairs, cfg, cs.LossConfig(), tcfg)
    return state, cfg, tcfg


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_rmsprop_scalar_hand_steps():
    cfg = cs.TrainConfig(learning_rate=0.1, weight_decay=0.0, momentum=0.9,
                         smoothing=0.99, eps=1e-8)
    p = torch.tensor([1.0], dtype=torch.float64)
    acc = OptAccumulator(sq=torch.zeros_like(p), buf=torch.zeros_like(p))
    cs.rmsprop_step([p], [torch.tensor([1.0], dtype=torch.float64)], [acc], cfg)
    # sq = 0.01, buf = 1/(0.1 + 1e-8), p = 1 - 0.1*buf
    assert float(acc.sq) == pytest.approx(0.01, rel=1e-12)
    buf1 = 1.0 / (0.1 + 1e-8)
    assert float(acc.buf) == pytest.approx(buf1, rel=1e-12)
    assert float(p) == pytest.approx(1.0 - 0.1 * buf1, rel=1e-12)

    cs.rmsprop_step([p], [torch.tensor([1.0], dtype=torch.float64)], [acc], cfg)
    sq2 = 0.99 * 0.01 + 0.01
    buf2 = 0.9 * buf1 + 1.0 / (math.sqrt(sq2) + 1e-8)
    assert float(acc.sq) == pytest.approx(sq2, rel=1e-12)
    assert float(acc.buf) == pytest.approx(buf2, rel=1e-12)


def test_rmsprop_weight_decay_enters_gradient():
    cfg = cs.TrainConfig(learning_rate=0.1, weight_decay=0.5, momentum=0.0,
                         smoothing=0.99, eps=1e-8)
    p = torch.tensor([2.0], dtype=torch.float64)
    acc = OptAccumulator(sq=torch.zeros_like(p), buf=torch.zeros_like(p))
    cs.rmsprop_step([p], [torch.tensor([0.0], dtype=torch.float64)], [acc], cfg)
    g = 0.0 + 0.5 * 2.0
    sq = 0.01 * g * g
    want = 2.0 - 0.1 * g / (math.sqrt(sq) + 1e-8)
    assert float(p) == pytest.approx(want, rel=1e-12)


def test_train_config_validation():
    with pytest.raises(cs.ConfigError):
        cs.TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(cs.ConfigError):
        cs.TrainConfig(momentum=1.0).validate()
    with pytest.raises(cs.ConfigError):
        cs.TrainConfig(smoothing=0.0).validate()
    with pytest.raises(cs.ConfigError):
        cs.TrainConfig(batch_frames=0).validate()
    cfg = cs.TrainConfig().validate()
    assert (cfg.learning_rate, cfg.weight_decay) == (1e-4, 1e-7)
    assert (cfg.momentum, cfg.smoothing, cfg.eps) == (0.9, 0.99, 1e-8)


def test_one_shared_optimizer_across_members(tiny_pairs):
    state, _, _ = _tiny_run(tiny_pairs, epochs=1)
    n_params = len(flat_named_params(state.members))
    assert len(state.accumulators) == n_params
    # the step really moved parameters in both members
    fresh = [cs.init_classifier(s) for s in _tiny_specs()]
    moved = [
        not torch.equal(pt, pi)
        for (_, pt), (_, pi) in zip(flat_named_params(state.members),
                                    flat_named_params(fresh))
    ]
    assert sum(moved[: n_params // 2]) > 0
    assert sum(moved[n_params // 2:]) > 0


# ---------------------------------------------------------------------------
# pooled forward
# ---------------------------------------------------------------------------

def test_pooled_frame_probs_matches_predict(tiny_pairs, small_specs, small_members):
    cfg = cs.EnsembleConfig(mode="uncertainty", members=small_specs)
    pooled = pooled_frame_probs(small_members, tiny_pairs[0][0], cfg)
    via_predict, _, _ = cs.predict_ensemble(cfg, small_members, tiny_pairs[0][0])
    assert torch.allclose(pooled, via_predict.probs, atol=1e-7)


def test_frozen_weight_field_same_value_different_grad(tiny_pairs, small_specs, small_members):
    cfg = cs.EnsembleConfig(mode="uncertainty", members=small_specs)
    vol, mask = tiny_pairs[0]
    live = pooled_frame_probs(small_members, vol, cfg)
    frozen = pooled_frame_probs(small_members, vol, cfg, freeze_weight_field=True)
    assert torch.allclose(live, frozen, atol=1e-7)  # identical forward value
    gap = cs.frozen_weight_gradient_gap(small_members, (vol, mask), cfg, cs.LossConfig())
    assert gap.max_abs_diff > 0.0  # gradients do differ through the weights


# ---------------------------------------------------------------------------
# epochs, determinism, resume
# ---------------------------------------------------------------------------

def test_training_deterministic(tiny_pairs):
    a, _, _ = _tiny_run(tiny_pairs, dropout=0.3, epochs=2)
    b, _, _ = _tiny_run(tiny_pairs, dropout=0.3, epochs=2)
    assert a.loss_history == b.loss_history
    for (na, pa), (nb, pb) in zip(flat_named_params(a.members),
                                  flat_named_params(b.members)):
        assert na == nb and torch.equal(pa, pb)


def test_training_seed_changes_order(tiny_pairs):
    a, _, _ = _tiny_run(tiny_pairs, epochs=1, seed=0)
    b, _, _ = _tiny_run(tiny_pairs, epochs=1, seed=1)
    assert a.loss_history != b.loss_history


def test_loss_history_per_step(tiny_pairs):
    state, _, tcfg = _tiny_run(tiny_pairs, epochs=2)
    steps_per_epoch = math.ceil(len(tiny_pairs) / tcfg.batch_frames)
    assert state.epoch == 2
    assert len(state.loss_history) == 2 * steps_per_epoch
    assert all(math.isfinite(v) for v in state.loss_history)


def test_loss_decreases_on_tiny_problem(tiny_pairs):
    state, _, _ = _tiny_run(tiny_pairs, epochs=6, lr=3e-3)
    first = sum(state.loss_history[:2]) / 2
    last = sum(state.loss_history[-2:]) / 2
    assert last < first


def test_resume_matches_uninterrupted(tiny_pairs, tmp_path):
    straight, cfg, tcfg = _tiny_run(tiny_pairs, dropout=0.3, epochs=4)

    specs = _tiny_specs(0.3)
    state = cs.init_train_state([cs.init_classifier(s) for s in specs])
    half = cs.TrainConfig(learning_rate=1e-3, epochs=2, batch_frames=2, seed=0)
    cs.fit(state, tiny_pairs, cfg, cs.LossConfig(), half)
    ckpt = save_train_state(tmp_path / "half.ckpt", state)
    resumed = load_train_state(ckpt)
    full = cs.TrainConfig(learning_rate=1e-3, epochs=4, batch_frames=2, seed=0)
    cs.fit(resumed, tiny_pairs, cfg, cs.LossConfig(), full)

    assert resumed.loss_history == straight.loss_history
    for (_, pa), (_, pb) in zip(flat_named_params(resumed.members),
                                flat_named_params(straight.members)):
        assert torch.equal(pa, pb)


def test_fit_solo_trains_single_member(tiny_pairs):
    spec = _tiny_specs()[0]
    tcfg = cs.TrainConfig(learning_rate=1e-3, epochs=1, batch_frames=2, seed=0)
    state = cs.fit_solo(spec, tiny_pairs, cs.LossConfig(), tcfg)
    assert len(state.members) == 1
    assert state.epoch == 1
    assert len(state.loss_history) > 0


def test_solo_eval_config(small_specs):
    cfg = cs.EnsembleConfig(mode="uncertainty", members=small_specs)
    solo = cs.solo_eval_config(cfg, 1)
    assert solo.mode == "fixed"
    assert solo.members == [small_specs[1]]
    assert solo.resolved_weights() == (1.0,)
    with pytest.raises(cs.ConfigError):
        cs.solo_eval_config(cfg, 5)


# ---------------------------------------------------------------------------
# strategy training
# ---------------------------------------------------------------------------

def test_train_strategy_stacking(tiny_pairs):
    specs = _tiny_specs()
    cfg = cs.EnsembleConfig(mode="stacking", members=specs)
    tcfg = cs.TrainConfig(learning_rate=1e-3, epochs=1, batch_frames=2, seed=0)
    states = cs.train_strategy(cfg, tiny_pairs, cs.LossConfig(), tcfg)
    assert len(states) == 2
    assert all(len(s.members) == 1 for s in states)


def test_train_strategy_bagging_seeds_differ(tiny_pairs):
    specs = _tiny_specs(seeds=(1, 1))  # identical member specs
    cfg = cs.EnsembleConfig(mode="bagging", members=specs, bootstrap_seed=7)
    tcfg = cs.TrainConfig(learning_rate=1e-3, epochs=1, batch_frames=2, seed=0)
    states = cs.train_strategy(cfg, tiny_pairs, cs.LossConfig(), tcfg)
    # different bootstrap resamples -> different trained parameters
    pa = flat_named_params(states[0].members)
    pb = flat_named_params(states[1].members)
    assert any(not torch.equal(x, y) for (_, x), (_, y) in zip(pa, pb))


def test_train_strategy_rejects_pooling_modes(tiny_pairs):
    cfg = cs.EnsembleConfig(mode="uncertainty", members=_tiny_specs())
    with pytest.raises(cs.ConfigError):
        cs.train_strategy(cfg, tiny_pairs, cs.LossConfig(), cs.TrainConfig(epochs=1))


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

def test_gradient_check_small_sample(tiny_pairs):
    specs = _tiny_specs()
    cfg = cs.EnsembleConfig(mode="uncertainty", members=specs)
    members = [cs.init_classifier(s) for s in specs]
    report = cs.gradient_check(members, tiny_pairs[0], cfg, cs.LossConfig(),
                               samples_per_member=8, seed=3)
    assert report.checked == 16
    assert report.max_rel_error <= report.tolerance
    assert report.passed


def test_gradient_check_fixed_mode(tiny_pairs):
    specs = _tiny_specs()
    cfg = cs.EnsembleConfig(mode="fixed", members=specs, fixed_weights=(0.6, 0.4))
    members = [cs.init_classifier(s) for s in specs]
    report = cs.gradient_check(members, tiny_pairs[0], cfg, cs.LossConfig(),
                               samples_per_member=8, seed=4)
    assert report.passed


def test_frozen_weight_gap_reported(tiny_pairs):
    specs = _tiny_specs()
    cfg = cs.EnsembleConfig(mode="uncertainty", members=specs)
    members = [cs.init_classifier(s) for s in specs]
    gap = cs.frozen_weight_gradient_gap(members, tiny_pairs[0], cfg, cs.LossConfig())
    assert gap.max_abs_diff >= 0.0
    assert gap.rel_diff >= 0.0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_array_container_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"b": rng.normal(size=(3, 4)).astype(np.float32),
              "a": rng.integers(0, 255, size=7).astype(np.uint8)}
    meta = {"kind": "test", "epoch": 3}
    p = write_arrays(tmp_path / "c.ckpt", arrays, meta)
    back, got_meta = read_arrays(p)
    assert got_meta == meta
    assert set(back) == {"a", "b"}
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])
        assert back[k].dtype == arrays[k].dtype


def test_checkpoint_bytes_deterministic(tiny_pairs, tmp_path):
    state, _, _ = _tiny_run(tiny_pairs, dropout=0.3, epochs=1)
    p1 = save_train_state(tmp_path / "a.ckpt", state)
    p2 = save_train_state(tmp_path / "b.ckpt", state)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_roundtrip_restores_everything(tiny_pairs, tmp_path):
    state, cfg, _ = _tiny_run(tiny_pairs, dropout=0.3, epochs=2)
    path = save_train_state(tmp_path / "s.ckpt", state)
    loaded = load_train_state(path)
    assert loaded.epoch == state.epoch
    assert loaded.loss_history == state.loss_history
    assert [m.spec for m in loaded.members] == [m.spec for m in state.members]
    for (na, pa), (nb, pb) in zip(flat_named_params(state.members),
                                  flat_named_params(loaded.members)):
        assert na == nb and torch.equal(pa, pb)
    for aa, ab in zip(state.accumulators, loaded.accumulators):
        assert torch.equal(aa.sq, ab.sq)
        assert torch.equal(aa.buf, ab.buf)
    # dropout generators continue identically after the roundtrip
    x = tiny_pairs[0][0].voxels[0]
    a = cs.forward_slice(state.members[0], x, mode="train")
    b = cs.forward_slice(loaded.members[0], x, mode="train")
    assert torch.equal(a, b)


def test_checkpoint_rejects_corrupt_magic(tmp_path, tiny_pairs):
    state, _, _ = _tiny_run(tiny_pairs, epochs=1)
    path = save_train_state(tmp_path / "x.ckpt", state)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"ZZZZ"
    path.write_bytes(bytes(blob))
    with pytest.raises(cs.DataError):
        load_train_state(path)


def test_identical_members_stay_identical(tiny_pairs):
    # same spec, same seed, no dropout: gradients are symmetric, so joint
    # training can never break the tie between the members
    specs = _tiny_specs(dropout=0.0, seeds=(1, 1))
    cfg = cs.EnsembleConfig(mode="uncertainty", members=specs)
    state = cs.init_train_state([cs.init_classifier(s) for s in specs])
    tcfg = cs.TrainConfig(learning_rate=1e-3, epochs=2, batch_frames=2, seed=0)
    cs.fit(state, tiny_pairs, cfg, cs.LossConfig(), tcfg)
    a, b = state.members
    for (name, pa), (_, pb) in zip(
        sorted(a.named_parameters()), sorted(b.named_parameters())
    ):
        assert torch.equal(pa, pb), name
