import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sarfusion.encoders import AttnBlock, DownBlock, UpBlock, init_weights
from sarfusion.nn_backend import (
    BN_EPS,
    BN_MOMENTUM,
    TensorSpec,
    batch_norm,
    batchnorm_params,
    conv2d_output_shape,
    conv2d_params,
    conv_transpose2d_output_shape,
    conv_transpose2d_params,
    cross_entropy,
    global_avg_pool,
    grad_check,
    grad_check_param,
    softmax_axis,
)


def test_conv_shapes():
    assert conv2d_output_shape(TensorSpec((2, 14, 128, 128)), 64, 7, 2, 3).shape == (2, 64, 64, 64)
    assert conv2d_output_shape(TensorSpec((2, 64, 64, 64)), 128, 3, 2, 1).shape == (2, 128, 32, 32)
    assert conv2d_output_shape(TensorSpec((1, 5, 9, 7)), 3, 1).shape == (1, 3, 9, 7)
    assert conv_transpose2d_output_shape(TensorSpec((1, 512, 8, 8)), 256, 2, 2).shape == (1, 256, 16, 16)
    with pytest.raises(ValueError):
        conv2d_output_shape(TensorSpec((1, 3, 2, 2)), 3, 5)
    with pytest.raises(ValueError):
        TensorSpec((1, 0, 4, 4))


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 24), k=st.integers(1, 5), s=st.integers(1, 3), p=st.integers(0, 2),
       cin=st.integers(1, 4), cout=st.integers(1, 4), bias=st.booleans())
def test_conv_shape_and_params_match_torch(h, k, s, p, cin, cout, bias):
    if (h + 2 * p - k) // s + 1 < 1:
        return
    conv = torch.nn.Conv2d(cin, cout, k, s, p, bias=bias)
    out = conv(torch.zeros(1, cin, h, h))
    assert conv2d_output_shape(TensorSpec((1, cin, h, h)), cout, k, s, p).shape == tuple(out.shape)
    assert conv2d_params(cin, cout, k, bias) == sum(t.numel() for t in conv.parameters())
    tconv = torch.nn.ConvTranspose2d(cin, cout, k, s, p, bias=bias)
    expect = (h - 1) * s - 2 * p + k
    if expect >= 1:
        shape = conv_transpose2d_output_shape(TensorSpec((1, cin, h, h)), cout, k, s, p).shape
        assert shape == tuple(tconv(torch.zeros(1, cin, h, h)).shape)
    assert conv_transpose2d_params(cin, cout, k, bias) == sum(t.numel() for t in tconv.parameters())


def test_batchnorm_defaults_and_identity():
    bn = batch_norm(6)
    assert bn.eps == BN_EPS == 1e-5 and bn.momentum == BN_MOMENTUM == 0.1
    assert batchnorm_params(6) == sum(p.numel() for p in bn.parameters())
    bn.eval()
    x = torch.randn(3, 6, 5, 5)
    assert (bn(x) - x).abs().max() < 1e-5 * x.abs().max() + 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(softmax_axis(np.full((2, 5), 3.0), axis=1), 0.2)
    hot = softmax_axis(torch.eye(4) * 1000, axis=0)
    assert hot.diagonal().min() > 1 - 1e-6
    x = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(softmax_axis(x), np.exp(x) / np.exp(x).sum(), atol=1e-7)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-80, 80), min_size=1, max_size=20), st.integers(0, 1))
def test_softmax_sums_to_one(vals, axis):
    x = torch.tensor(vals, dtype=torch.float32).reshape(1, -1)
    x = x if axis == 1 else x.T
    s = softmax_axis(x, axis=axis).sum(dim=axis)
    assert torch.all((s - 1).abs() <= 1e-6)


def test_pool_and_ce():
    x = torch.randn(2, 3, 4, 4)
    assert torch.allclose(global_avg_pool(x), x.mean(dim=(2, 3)))
    logits = torch.zeros(1, 6, 3, 3)
    labels = torch.randint(1, 6, (1, 3, 3))
    assert abs(cross_entropy(logits, labels).item() - math.log(6)) < 1e-5
    with pytest.raises(ValueError):
        cross_entropy(logits, torch.zeros(1, 3, 3, dtype=torch.long))


def test_grad_check_quadratic():
    # float64: in float32 the rounding of the sum alone is ~1e-3 of the gradient
    x = torch.randn(8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    r = grad_check(lambda t: (t**2).sum(), x)
    assert r.passed and r.max_rel_error < 1e-4 and r.n_checked == 64


def test_grad_check_conv_mse():
    g = torch.Generator().manual_seed(1)
    conv = torch.nn.Conv2d(3, 4, 3, padding=1)
    target = torch.randn(1, 4, 4, 4, generator=g)
    r = grad_check(lambda t: torch.nn.functional.mse_loss(conv(t), target), torch.randn(1, 3, 4, 4, generator=g))
    assert r.passed, r.message
    assert r.n_checked == 48  # every coordinate of a 48-element input


def test_grad_check_relu_negative_is_exactly_zero():
    x = -torch.rand(4, 4) - 0.1
    xg = x.clone().requires_grad_(True)
    torch.relu(xg).sum().backward()
    assert torch.count_nonzero(xg.grad) == 0
    assert grad_check(lambda t: torch.relu(t).sum(), x).max_rel_error == 0.0


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.sin(x)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * torch.cos(x) * 1.1


def test_grad_check_catches_wrong_backward():
    x = torch.randn(10, 10, generator=torch.Generator().manual_seed(2))
    assert grad_check(lambda t: torch.sin(t).sum(), x).passed
    bad = grad_check(lambda t: _WrongGrad.apply(t).sum(), x)
    assert not bad.passed and bad.max_rel_error > 0.05


def test_grad_check_nonfinite_reports_location():
    x = torch.ones(3, 3)
    x[1, 2] = -1.0
    r = grad_check(lambda t: torch.sqrt(t).sum(), x)
    assert not r.passed and "non-finite" in r.message
    # finite at x, NaN one step to the left of coordinate (2, 0)
    x = torch.ones(3, 3)
    x[2, 0] = 5e-4
    r = grad_check(lambda t: torch.log(t).sum(), x)
    assert not r.passed and r.worst_index == (2, 0)


def _block_cases(seed):
    g = torch.Generator().manual_seed(seed)
    attn = AttnBlock(16)
    init_weights(attn, seed)
    with torch.no_grad():
        attn.gamma.fill_(0.7)  # open the gate so the attention path is exercised
    return [
        ("down", init_weights(DownBlock(8, 16, 2), seed), torch.randn(2, 8, 8, 8, generator=g)),
        ("down_identity", init_weights(DownBlock(8, 8, 1), seed), torch.randn(2, 8, 8, 8, generator=g)),
        ("up", init_weights(UpBlock(16), seed), torch.randn(2, 16, 8, 8, generator=g)),
        ("attn", attn, torch.randn(2, 16, 8, 8, generator=g)),
    ]


@pytest.mark.parametrize("train_mode", [True, False])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_blocks_pass_grad_check(seed, train_mode):
    for name, m, x in _block_cases(seed):
        m.train()
        m(x)  # populate running statistics
        m.train(train_mode)
        w = torch.randn(m(x).shape, generator=torch.Generator().manual_seed(seed + 100))
        r = grad_check(lambda t: (m(t) * w).sum(), x, seed=seed)
        assert r.passed, f"{name}: {r.message}"


def test_grad_check_param_leaves_module_untouched():
    lin = torch.nn.Linear(5, 3)
    before = lin.weight.detach().clone()
    x = torch.randn(4, 5, dtype=torch.float64)
    lin.double()
    r = grad_check_param(lambda m: (m(x) ** 2).sum(), lin, "weight")
    assert r.passed and r.max_rel_error < 1e-6
    assert torch.equal(lin.weight.float(), before.float())
    with pytest.raises(KeyError):
        grad_check_param(lambda m: m(x).sum(), lin, "nope")
