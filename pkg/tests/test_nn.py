import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amsam.nn import (
    MLP, Attention, ConfigError, FourierPositionalEncoder, LayerNorm, Linear, LoraAdapter, LoraLinear,
    TransposedConv2x, TransposedConvUpscaler, attention_forward, lora_effective_weight, mlp_forward,
    pos_encode_point, upscale_forward,
)
from amsam.tensor import ShapeError, Tensor, backward
from gradcheck import numeric_grad, rel_err


def rng(seed=0):
    return np.random.default_rng(seed)


# -- LoRA -------------------------------------------------------------------------

def test_zero_b_leaves_weight_unchanged():
    base = Linear(6, 6, rng(), frozen=True)
    layer = LoraLinear(base, LoraAdapter(6, 6, 2, rng(1)))
    assert np.array_equal(lora_effective_weight(layer).data, base.weight.data)


def test_effective_weight_adds_ba():
    r = rng(3)
    base = Linear(4, 4, r, frozen=True)
    ad = LoraAdapter(4, 4, 2, r)
    ad.B.data = r.normal(size=(4, 2))
    delta = np.zeros((4, 4))
    for o in range(4):
        for i in range(4):
            delta[o, i] = sum(ad.B.data[o, k] * ad.A.data[k, i] for k in range(2))
    layer = LoraLinear(base, ad)
    assert np.allclose(layer.effective_weight().data - base.weight.data, delta.T, atol=1e-14)
    x = r.normal(size=(3, 4))
    assert np.allclose(layer(Tensor(x)).data, x @ layer.effective_weight().data + base.bias.data, atol=1e-13)


def test_no_adapter_returns_base():
    base = Linear(4, 4, rng(), frozen=True)
    assert lora_effective_weight(LoraLinear(base)) is base.weight


@pytest.mark.parametrize("rank", [0, 4, 5])
def test_rank_bounds(rank):
    with pytest.raises(ConfigError):
        LoraAdapter(4, 4, rank, rng())


def test_lora_requires_frozen_base():
    with pytest.raises(ConfigError):
        LoraLinear(Linear(4, 4, rng()), LoraAdapter(4, 4, 2, rng()))


def test_lora_init_scale():
    a = LoraAdapter(64, 64, 4, rng(5))
    assert np.all(a.B.data == 0)
    assert abs(a.A.data.var() - 1 / 4) < 0.05


def test_frozen_linear_flags():
    lin = Linear(3, 2, rng(), frozen=True)
    assert not lin.weight.requires_grad and not lin.bias.requires_grad
    assert lin.trainable_parameters() == {}


# -- attention ---------------------------------------------------------------------

def _loop_attention(blk, q, kv):
    """Scalar-loop reference of single-head LoRA attention."""
    def proj(layer, x):
        W = layer.effective_weight().data
        b = layer.base.bias.data
        return np.array([[sum(x[n, i] * W[i, o] for i in range(len(b))) + b[o] for o in range(len(b))]
                         for n in range(x.shape[0])])

    Q, K, V = proj(blk.q_proj, q), proj(blk.k_proj, kv), proj(blk.v_proj, kv)
    d = blk.dim
    out = np.zeros((q.shape[0], d))
    for n in range(q.shape[0]):
        s = [sum(Q[n, j] * K[m, j] for j in range(d)) / math.sqrt(d) for m in range(kv.shape[0])]
        top = max(s)
        e = [math.exp(v - top) for v in s]
        z = math.fsum(e)
        for j in range(d):
            out[n, j] = sum(e[m] / z * V[m, j] for m in range(kv.shape[0]))
    Wo, bo = blk.out_proj.weight.data, blk.out_proj.bias.data
    return out @ Wo + bo


def _nonzero_adapters(blk, r):
    for layer in (blk.q_proj, blk.v_proj):
        layer.adapter.B.data = r.normal(size=layer.adapter.B.shape)


def test_self_attention_matches_loops():
    r = rng(7)
    blk = Attention(8, r, rank=2)
    _nonzero_adapters(blk, r)
    x = r.normal(size=(1, 3, 8))
    out = attention_forward(blk, Tensor(x), Tensor(x)).data[0]
    assert np.max(np.abs(out - _loop_attention(blk, x[0], x[0]))) < 1e-10


def test_single_key_collapses_to_values():
    r = rng(8)
    blk = Attention(8, r, rank=2)
    _nonzero_adapters(blk, r)
    kv = r.normal(size=(2, 1, 8))
    q = r.normal(size=(2, 5, 8))
    out = attention_forward(blk, Tensor(q), Tensor(kv)).data
    v = blk.out_proj(blk.v_proj(Tensor(kv))).data
    assert np.allclose(out, np.broadcast_to(v, out.shape), atol=1e-12)


def test_zero_b_matches_adapter_free_attention():
    r = rng(9)
    blk = Attention(8, r, rank=3)
    plain = Attention(8, rng(9), rank=None)
    for name in ("q_proj", "k_proj", "v_proj"):
        getattr(plain, name).base.weight.data = getattr(blk, name).base.weight.data.copy()
        getattr(plain, name).base.bias.data = getattr(blk, name).base.bias.data.copy()
    plain.out_proj.weight.data = blk.out_proj.weight.data.copy()
    x = r.normal(size=(2, 4, 8))
    assert np.array_equal(blk(Tensor(x), Tensor(x), Tensor(x)).data, plain(Tensor(x), Tensor(x), Tensor(x)).data)


def test_key_path_has_no_adapter():
    blk = Attention(8, rng(), rank=2)
    assert blk.k_proj.adapter is None and blk.q_proj.adapter is not None and blk.v_proj.adapter is not None
    names = set(blk.trainable_parameters())
    assert {"q_proj.adapter.A", "q_proj.adapter.B", "v_proj.adapter.A", "v_proj.adapter.B"} <= names
    assert not any(n.startswith("k_proj") for n in names)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_key_permutation_equivariance(seed):
    r = rng(seed)
    blk = Attention(8, r, rank=2)
    _nonzero_adapters(blk, r)
    q = r.normal(size=(1, 3, 8))
    kv = r.normal(size=(1, 5, 8))
    perm = r.permutation(5)
    a = attention_forward(blk, Tensor(q), Tensor(kv)).data
    b = attention_forward(blk, Tensor(q), Tensor(kv[:, perm])).data
    assert np.allclose(a, b, atol=1e-12)


def test_attention_dim_mismatch():
    blk = Attention(8, rng(), rank=2)
    with pytest.raises(ShapeError):
        attention_forward(blk, Tensor(np.ones((1, 2, 6))), Tensor(np.ones((1, 2, 8))))


# -- MLP ---------------------------------------------------------------------------

def test_mlp_zero_weights_zero_output():
    head = MLP([8, 8, 8, 4], rng())
    for layer in head.layers:
        layer.weight.data[...] = 0.0
    assert np.array_equal(mlp_forward(head, Tensor(rng(1).normal(size=(2, 3, 8)))).data, np.zeros((2, 3, 4)))


def test_identity_single_layer_passes_through():
    head = MLP([5, 5], rng())
    head.layers[0].weight.data = np.eye(5)
    x = rng(2).normal(size=(1, 2, 5))
    assert np.array_equal(mlp_forward(head, Tensor(x)).data, x)


def test_mlp_gradients_match_finite_differences():
    head = MLP([4, 6, 6, 3], rng(4))
    x = rng(5).normal(size=(2, 2, 4))
    w = rng(6).normal(size=(2, 2, 3))
    params = list(head.trainable_parameters().values())
    backward((head(Tensor(x)) * Tensor(w)).sum())
    got = [p.grad.copy() for p in params]

    def f(*arrays):
        for p, a in zip(params, arrays):
            p.data = a
        return float((head(Tensor(x)).data * w).sum())

    originals = [p.data.copy() for p in params]
    expected = numeric_grad(f, [a.copy() for a in originals])
    assert max(rel_err(g, e) for g, e in zip(got, expected)) < 1e-3


def test_mlp_dim_mismatch():
    with pytest.raises(ShapeError):
        MLP([4, 3], rng())(Tensor(np.ones((1, 1, 5))))


# -- upscaler -------------------------------------------------------------------------

def test_upscaler_shape_law():
    up = TransposedConvUpscaler(32, 8, rng())
    assert upscale_forward(up, Tensor(np.ones((2, 32, 2, 2)))).shape == (2, 8, 8, 8)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4))
def test_upscaler_shape_property(b, h, w):
    up = TransposedConvUpscaler(8, 3, rng())
    assert up(Tensor(np.ones((b, 8, h, w)))).shape == (b, 3, 4 * h, 4 * w)


def test_upscaler_zero_kernels():
    up = TransposedConvUpscaler(8, 3, rng())
    up.stage1.kernel.data[...] = 0.0
    up.stage2.kernel.data[...] = 0.0
    assert np.array_equal(up(Tensor(rng(1).normal(size=(1, 8, 2, 2)))).data, np.zeros((1, 3, 8, 8)))


def test_transposed_conv_single_pixel_places_kernel():
    conv = TransposedConv2x(2, 3, rng(3))
    x = np.array([1.5, -0.5]).reshape(1, 2, 1, 1)
    out = conv(Tensor(x)).data
    K = conv.kernel.data.reshape(2, 3, 2, 2)  # (c_in, c_out, ky, kx)
    want = np.zeros((1, 3, 2, 2))
    for o in range(3):
        for ky in range(2):
            for kx in range(2):
                want[0, o, ky, kx] = 1.5 * K[0, o, ky, kx] - 0.5 * K[1, o, ky, kx]
    assert np.allclose(out, want, atol=1e-15)


def test_transposed_conv_stride_places_blocks():
    conv = TransposedConv2x(1, 1, rng())
    conv.kernel.data = np.array([[1.0, 2.0, 3.0, 4.0]])
    out = conv(Tensor(np.array([[[[1.0, 10.0], [100.0, 0.0]]]]))).data[0, 0]
    assert out.tolist() == [[1, 2, 10, 20], [3, 4, 30, 40], [100, 200, 0, 0], [300, 400, 0, 0]]


def test_upscaler_channel_mismatch():
    with pytest.raises(ShapeError):
        TransposedConvUpscaler(8, 3, rng())(Tensor(np.ones((1, 4, 2, 2))))


def test_upscaler_all_trainable():
    up = TransposedConvUpscaler(8, 3, rng())
    assert all(t.requires_grad for t in up.trainable_parameters().values())
    assert up.frozen_parameters() == {}


# -- layer norm ---------------------------------------------------------------------

def test_layer_norm_normalizes():
    y = LayerNorm(6)(Tensor(rng(1).normal(3.0, 2.0, size=(4, 6)))).data
    assert np.allclose(y.mean(-1), 0, atol=1e-12) and np.allclose(y.var(-1), 1, atol=1e-5)


# -- positional encoding -----------------------------------------------------------------

def test_pe_deterministic():
    a = pos_encode_point(FourierPositionalEncoder(16, seed=3), [0.2, 0.7]).data
    b = pos_encode_point(FourierPositionalEncoder(16, seed=3), [0.2, 0.7]).data
    assert np.array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_pe_norm_bounded(x, y):
    v = pos_encode_point(FourierPositionalEncoder(16, seed=0), [x, y]).data
    assert v.shape == (16,)
    assert np.linalg.norm(v) <= math.sqrt(16) + 1e-12


def test_pe_distinct_corners_differ():
    enc = FourierPositionalEncoder(32, seed=0, scale=0.5)
    a = pos_encode_point(enc, [5 / 31, 6 / 31]).data
    b = pos_encode_point(enc, [20 / 31, 25 / 31]).data
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) < 1.0


def test_pe_out_of_range_clamped_with_warning():
    enc = FourierPositionalEncoder(8, seed=0)
    with pytest.warns(RuntimeWarning):
        v = pos_encode_point(enc, [1.5, -0.2]).data
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.array_equal(v, pos_encode_point(enc, [1.0, 0.0]).data)


def test_pe_is_frozen():
    enc = FourierPositionalEncoder(8)
    assert enc.trainable_parameters() == {} and not enc.G.requires_grad
