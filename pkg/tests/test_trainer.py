import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from detailnet.data import SynthSceneConfig, generate_synthetic
from detailnet.errors import ConfigError, DataError, UsageError
from detailnet.gradcheck import check_gradients
from detailnet.network import FROZEN_PREFIXES, NetworkConfig, build_network
from detailnet.tensor import Tensor, default_dtype
from detailnet.trainer import (
    AugmentConfig,
    AugmentDraw,
    LrSchedule,
    Trainer,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    apply_augmentation,
    augment_sample,
    draw_augmentation,
    log_l1_loss,
    poly_lr,
    train,
)

TOY = NetworkConfig.from_preset("toy")


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(SynthSceneConfig(seed=3, height=16, width=16), 4)


# -- loss ---------------------------------------------------------------------------


def test_loss_zero_for_identical():
    d = np.random.default_rng(0).uniform(0.5, 5, (1, 1, 4, 4))
    assert log_l1_loss(Tensor(d.copy()), d).item() == 0.0


def test_loss_single_pixel_closed_form():
    assert log_l1_loss(Tensor(np.zeros((1, 1, 1, 1)), dtype=np.float64), np.full((1, 1, 1, 1), math.e - 1)).item() \
        == pytest.approx(1.0, abs=1e-15)


def test_loss_ignores_masked_pixels():
    truth = np.array([[[[1.0, 2.0]]]])
    pred = Tensor(np.array([[[[1.0, 100.0]]]]), dtype=np.float64)
    assert log_l1_loss(pred, truth, np.array([[[[True, False]]]])).item() == 0.0


@given(seed=st.integers(0, 2**31 - 1))
def test_loss_non_negative_and_zero_iff_equal(seed):
    g = np.random.default_rng(seed)
    truth = g.uniform(0.1, 10, (1, 1, 3, 3))
    pred = g.uniform(0.1, 10, (1, 1, 3, 3))
    mask = g.random((1, 1, 3, 3)) > 0.3
    mask[0, 0, 0, 0] = True
    value = log_l1_loss(Tensor(pred, dtype=np.float64), truth, mask).item()
    assert value >= 0
    assert (value == 0) == bool(np.all(pred[mask] == truth[mask]))


def test_loss_gradient(rng):
    with default_dtype(np.float64):
        pred = Tensor(rng.uniform(0.5, 4, (2, 1, 5, 5)), requires_grad=True)
        truth = rng.uniform(0.5, 4, (2, 1, 5, 5))
        assert check_gradients(lambda: log_l1_loss(pred, truth), [pred]) < 1e-4


@pytest.mark.parametrize("pred,truth,mask", [
    (np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), np.zeros((1, 1, 2, 2), bool)),
    (np.ones((1, 1, 2, 2)), -np.ones((1, 1, 2, 2)), None),
    (-np.ones((1, 1, 2, 2)) * 2, np.ones((1, 1, 2, 2)), None),
    (np.ones((1, 1, 2, 3)), np.ones((1, 1, 2, 2)), None),
])
def test_loss_validation(pred, truth, mask):
    with pytest.raises(DataError):
        log_l1_loss(Tensor(pred), truth, mask)


# -- schedule -------------------------------------------------------------------------


def test_poly_lr_closed_forms():
    s = LrSchedule(1e-4, 1e-6, 1600, 1.0)
    assert abs(poly_lr(s, 0) - 1e-4) <= 1e-12
    assert abs(poly_lr(s, 1600) - 1e-6) <= 1e-12
    assert abs(poly_lr(s, 5000) - 1e-6) <= 1e-12
    assert abs(poly_lr(s, 800) - (1e-4 + 1e-6) / 2) <= 1e-12


@given(steps=st.lists(st.integers(0, 3000), min_size=2, max_size=20), power=st.floats(0.1, 4))
def test_poly_lr_monotone_and_matches_oracle(steps, power):
    s = LrSchedule(1e-3, 1e-5, 1000, power)
    steps = sorted(steps)
    vals = [poly_lr(s, t) for t in steps]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    for t, v in zip(steps, vals):
        assert v == pytest.approx(oracles.poly_lr(1e-3, 1e-5, 1000, power, t), rel=1e-12)


@pytest.mark.parametrize("args", [(1e-6, 1e-4, 10), (1e-4, 0.0, 10), (1e-4, 1e-6, 0), (1e-4, 1e-6, 10, 0.0)])
def test_schedule_validation(args):
    with pytest.raises(ConfigError):
        LrSchedule(*args)


def test_group_lr_ordering_every_step(tiny_data):
    cfg = TrainConfig()
    trainer = Trainer(build_network(TOY, 0), tiny_data, cfg)
    for step in range(0, 200, 7):
        lr = trainer.learning_rates(step)
        assert lr["dfe"] < lr["dmg"]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(dfe_lr_init=1e-3).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr_scale=-1).validate()


def test_decay_steps_is_sixteen_epochs():
    cfg = TrainConfig()
    assert cfg.steps_per_epoch(12) == 4
    assert cfg.resolved_decay_steps(12) == 64
    assert TrainConfig(decay_steps=1600).resolved_decay_steps(12) == 1600


# -- optimiser ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    before = p["w"].copy()
    adam_step(p, {"w": np.zeros(3)}, {}, 1e-3, 1)
    assert np.array_equal(p["w"], before)


def test_adam_first_step_magnitude_is_lr():
    p = {"w": np.zeros(5)}
    adam_step(p, {"w": np.ones(5)}, {}, 1e-3, 1)
    assert np.all(np.abs(np.abs(p["w"]) - 1e-3) <= 1e-6)
    assert np.allclose(p["w"], oracles.adam_scalar([1.0], 1e-3)[0], rtol=0, atol=1e-15)


def test_adam_constant_gradient_tends_to_lr_sign():
    p = {"w": np.zeros(2)}
    moments = {}
    g = np.array([0.3, -2.0])
    seq = []
    for t in range(1, 501):
        before = p["w"].copy()
        adam_step(p, {"w": g}, moments, 1e-2, t)
        seq.append(p["w"] - before)
    ref = oracles.adam_scalar([0.3] * 500, 1e-2)
    assert np.allclose([s[0] for s in seq], ref, rtol=1e-9, atol=1e-15)
    assert np.allclose(seq[-1], -1e-2 * np.sign(g), rtol=1e-6)


def test_adam_rejects_bad_calls():
    with pytest.raises(UsageError):
        adam_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, {}, 1e-3, 0)
    with pytest.raises(UsageError):
        adam_step({"w": np.zeros(1)}, {"v": np.zeros(1)}, {}, 1e-3, 1)


# -- augmentation ---------------------------------------------------------------------


def test_augmentation_ranges_and_flip_rate():
    cfg = AugmentConfig()
    rng = np.random.default_rng(0)
    draws = [draw_augmentation(cfg, rng) for _ in range(10_000)]
    b = np.array([d.brightness for d in draws])
    c = np.array([d.contrast for d in draws])
    assert b.min() >= -0.2 and b.max() <= 0.2
    assert c.min() >= 0.8 and c.max() <= 1.2
    assert abs(np.mean([d.flip for d in draws]) - 0.5) <= 0.02


def test_neutral_augmentation_is_identity(tiny_data):
    s = tiny_data[0]
    out = apply_augmentation(s, AugmentDraw(0.0, 1.0, False))
    assert np.array_equal(out.rgb, s.rgb) and np.array_equal(out.depth, s.depth)


def test_double_flip_is_identity(tiny_data):
    s = tiny_data[1]
    once = apply_augmentation(s, AugmentDraw(0.0, 1.0, True))
    assert not np.array_equal(once.depth, s.depth)
    twice = apply_augmentation(once, AugmentDraw(0.0, 1.0, True))
    assert np.array_equal(twice.rgb, s.rgb) and np.array_equal(twice.depth, s.depth)
    assert np.array_equal(twice.mask, s.mask) and twice.intrinsics == s.intrinsics


def test_photometric_augmentation_leaves_depth(tiny_data):
    s = tiny_data[2]
    out = apply_augmentation(s, AugmentDraw(0.15, 0.85, False))
    assert np.array_equal(out.depth, s.depth)
    assert not np.array_equal(out.rgb, s.rgb)
    assert out.rgb.min() >= 0 and out.rgb.max() <= 1


def test_disabled_augmentation_still_consumes_draws(tiny_data):
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    augment_sample(tiny_data[0], AugmentConfig(enabled=False), r1)
    draw_augmentation(AugmentConfig(), r2)
    assert r1.random() == r2.random()


# -- training loop ----------------------------------------------------------------------


def test_zero_learning_rate_gives_constant_loss(tiny_data):
    cfg = TrainConfig(batch_size=1, lr_scale=0.0, steps=5)
    result = train(tiny_data[:1], build_network(TOY, 0), cfg, AugmentConfig(enabled=False))
    assert len(result.history) == 5 and len(set(result.history)) == 1


def test_training_reduces_loss_and_keeps_frozen_stages(tiny_data):
    net = build_network(TOY, 0)
    init = {n: t.data.copy() for n, t in net.params.items()}
    result = train(tiny_data, net, TrainConfig(steps=12, lr_scale=10.0), AugmentConfig(enabled=False))
    assert np.mean(result.history[-3:]) < np.mean(result.history[:3])
    for name, t in net.params.items():
        if name.startswith(FROZEN_PREFIXES) or name.endswith((".mean", ".var", ".gamma", ".beta")):
            assert np.array_equal(t.data, init[name]), name
    assert not np.array_equal(net.params["head.weight"].data, init["head.weight"])


def test_resume_replays_exact_loss_sequence(tiny_data, tmp_path):
    cfg = TrainConfig(steps=6, deterministic=True)
    full = train(tiny_data, build_network(TOY, 0), cfg).history

    first = Trainer(build_network(TOY, 0), tiny_data, cfg)
    first.run(3)
    first.save(tmp_path / "mid.ckpt")
    resumed = Trainer(build_network(TOY, 5), tiny_data, cfg)  # different init: restore must overwrite it
    resumed.restore(tmp_path / "mid.ckpt")
    resumed.run(3)
    assert resumed.history == full


def test_nan_loss_aborts_with_dump(tiny_data, tmp_path):
    net = build_network(TOY, 0)
    net.params["head.bias"].data[...] = np.nan
    dump = tmp_path / "dump.ckpt"
    trainer = Trainer(net, tiny_data, TrainConfig(steps=1), dump_path=str(dump))
    with pytest.raises(TrainingDiverged) as info:
        trainer.step()
    assert info.value.dump_path == str(dump) and dump.exists()


def test_inconsistent_sample_shapes_rejected(tiny_data):
    other = generate_synthetic(SynthSceneConfig(seed=1, height=8, width=8), 1)
    with pytest.raises(DataError):
        Trainer(build_network(TOY, 0), tiny_data + other, TrainConfig())


def test_sample_stream_covers_dataset_each_pass(tiny_data):
    trainer = Trainer(build_network(TOY, 0), tiny_data, TrainConfig(batch_size=2))
    seen = trainer.next_indices() + trainer.next_indices()
    assert sorted(seen) == [0, 1, 2, 3]
