import numpy as np
import pytest

import oracles
from detailnet import blocks
from detailnet.blocks import ParamStore
from detailnet.errors import ConfigError, ShapeError
from detailnet.gradcheck import check_gradients
from detailnet.tensor import Tensor, default_dtype, weighted_sum

EPS = 1e-5


def randomize(store, rng):
    for name, t in store.items():
        if name.endswith((".gamma", ".var")):
            t.data[...] = rng.uniform(0.5, 1.5, t.shape)
        elif name.endswith((".beta", ".mean", ".bias")):
            t.data[...] = rng.normal(0, 0.3, t.shape)
    return store


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_param_store_rejects_duplicates():
    s = ParamStore(np.float64)
    s.add("a.weight", np.zeros(2), "dfe")
    with pytest.raises(ConfigError):
        s.add("a.weight", np.zeros(2), "dfe")


def test_frozen_tensors_absent_from_grad_map(rng):
    s = ParamStore(np.float64)
    blocks.init_stem(s, rng, 4)
    blocks.init_crb(s, rng, "crb", 4, 4, 1)
    s.freeze("stem.")
    x = t64(rng.standard_normal((1, 3, 8, 8)), grad=False)
    from detailnet.tensor import backward, sum_all

    backward(sum_all(blocks.crb_forward(blocks.stem_forward(x, s), s, "crb", 1)))
    grads = s.grad_map()
    assert grads and not any(n.startswith("stem.") for n in grads)
    assert not any(n.endswith((".mean", ".var", ".gamma", ".beta")) for n in grads)


@pytest.mark.parametrize("hw,expect", [((240, 320), (60, 80)), ((8, 8), (2, 2)), ((64, 64), (16, 16))])
def test_stem_quarter_resolution(rng, hw, expect):
    s = ParamStore()
    blocks.init_stem(s, rng, 6)
    y = blocks.stem_forward(Tensor(np.zeros((1, 3) + hw)), s)
    assert y.shape == (1, 6) + expect


def test_stem_rejects_indivisible(rng):
    s = ParamStore()
    blocks.init_stem(s, rng, 4)
    with pytest.raises(ShapeError):
        blocks.stem_forward(Tensor(np.zeros((1, 3, 10, 8))), s)


def test_stem_matches_oracle(rng):
    s = ParamStore(np.float64)
    blocks.init_stem(s, rng, 3)
    randomize(s, rng)
    x = rng.standard_normal((1, 3, 8, 12))
    y = blocks.stem_forward(t64(x), s)
    assert np.max(np.abs(y.data - oracles.stem_oracle(x, s, EPS))) <= 1e-9


@pytest.mark.parametrize("r", blocks.DILATIONS)
@pytest.mark.parametrize("in_ch", [8, 12])
def test_bottleneck_matches_oracle_and_keeps_dims(rng, r, in_ch):
    s = ParamStore(np.float64)
    blocks.init_bottleneck(s, rng, "u", in_ch, 8, r)
    randomize(s, rng)
    x = rng.standard_normal((2, in_ch, 6, 7))
    y = blocks.bottleneck_forward(t64(x), s, "u", r)
    assert y.shape == (2, 8, 6, 7)
    assert np.max(np.abs(y.data - oracles.bottleneck_oracle(x, s, "u", r, EPS))) <= 1e-6


def test_resblock_zero_residual_is_relu(rng):
    s = ParamStore(np.float64)
    blocks.init_resblock(s, rng, "stage", 8, 8, 2, 4)
    for name in s.names("stage."):
        if name.endswith(".weight"):
            s[name].data[...] = 0.0
    x = rng.standard_normal((1, 8, 5, 5))
    y = blocks.resblock_forward(t64(x), s, "stage", 4)
    assert np.array_equal(y.data, np.maximum(x, 0.0))


def test_resblock_rejects_unknown_dilation(rng):
    with pytest.raises(ConfigError):
        blocks.init_resblock(ParamStore(), rng, "s", 4, 4, 1, 3)


def test_crb_width_and_zero_residual(rng):
    s = ParamStore(np.float64)
    blocks.init_crb(s, rng, "crb", 2048, 64, 8)
    x = rng.standard_normal((1, 2048, 3, 4))
    y = blocks.crb_forward(t64(x), s, "crb", 8)
    assert y.shape == (1, 64, 3, 4)
    for name in ("crb.conv1.weight", "crb.conv1.bias", "crb.conv2.weight", "crb.conv2.bias"):
        s[name].data[...] = 0.0
    y = blocks.crb_forward(t64(x), s, "crb", 8)
    reduced = np.einsum("oc,nchw->nohw", s["crb.reduce.weight"].data[:, :, 0, 0], x)
    ref = np.maximum(reduced + s["crb.reduce.bias"].data[None, :, None, None], 0.0)
    assert np.max(np.abs(y.data - ref)) <= 1e-9


@pytest.mark.parametrize("r", blocks.DILATIONS)
def test_crb_matches_oracle(rng, r):
    s = ParamStore(np.float64)
    blocks.init_crb(s, rng, "crb", 6, 4, r)
    randomize(s, rng)
    x = rng.standard_normal((1, 6, 5, 6))
    y = blocks.crb_forward(t64(x), s, "crb", r)
    assert np.max(np.abs(y.data - oracles.crb_oracle(x, s, "crb", r, EPS))) <= 1e-6


def test_crb_rejects_widening(rng):
    with pytest.raises(ConfigError):
        blocks.init_crb(ParamStore(), rng, "crb", 4, 8, 1)


def _afb(rng, c=8):
    s = ParamStore(np.float64)
    blocks.init_afb(s, rng, "afb", c, 4)
    randomize(s, rng)
    return s


def test_afb_matches_oracle_and_weight_range(rng):
    s = _afb(rng)
    d, so = rng.standard_normal((2, 2, 8, 3, 4))
    y = blocks.afb_forward(t64(d), t64(so), s, "afb")
    ref, att = oracles.afb_oracle(d, so, s, "afb")
    assert np.max(np.abs(y.data - ref)) <= 1e-6
    w = blocks.afb_attention(t64(d), t64(so), s, "afb").data
    assert w.shape == (2, 8, 1, 1)
    assert np.all((w > 0) & (w < 1))
    assert np.max(np.abs(w[:, :, 0, 0] - att)) <= 1e-12


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_afb_forced_attention_is_exact(rng, dtype):
    s = _afb(rng).astype(dtype)
    d = Tensor(rng.standard_normal((1, 8, 4, 4)), dtype=dtype)
    so = Tensor(rng.standard_normal((1, 8, 4, 4)), dtype=dtype)
    zero = blocks.afb_forward(d, so, blocks.force_attention(s, 0), "afb")
    one = blocks.afb_forward(d, so, blocks.force_attention(s, 1), "afb")
    assert np.array_equal(zero.data, so.data)
    assert np.array_equal(one.data, so.data + d.data)
    assert np.all(np.isfinite(s["afb.fc2.bias"].data))  # original untouched


def test_afb_depends_on_context(rng):
    s = _afb(rng)
    d = t64(rng.standard_normal((1, 8, 4, 4)))
    w1 = blocks.afb_attention(d, t64(rng.standard_normal((1, 8, 4, 4))), s, "afb").data
    w2 = blocks.afb_attention(d, t64(rng.standard_normal((1, 8, 4, 4)) + 1.0), s, "afb").data
    assert not np.array_equal(w1, w2)


def test_afb_shape_mismatch(rng):
    s = _afb(rng)
    with pytest.raises(ShapeError):
        blocks.afb_forward(t64(np.zeros((1, 8, 2, 2))), t64(np.zeros((1, 8, 3, 2))), s, "afb")


def test_force_attention_validation(rng):
    with pytest.raises(ConfigError):
        blocks.force_attention(_afb(rng), 0.5)


def test_afb_gradient_matches_finite_differences(rng):
    s = _afb(rng)
    with default_dtype(np.float64):
        d, so = t64(rng.standard_normal((2, 8, 3, 3)), True), t64(rng.standard_normal((2, 8, 3, 3)), True)
        proj = rng.standard_normal((2, 8, 3, 3))
        tensors = [d, so] + list(s.trainable().values())
        assert check_gradients(lambda: weighted_sum(blocks.afb_forward(d, so, s, "afb"), proj), tensors) < 1e-4
