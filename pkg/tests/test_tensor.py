import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rockgpt import tensor as T
from rockgpt.checks import adjoint_gap, run_suite
from rockgpt.errors import ConfigurationError, DefinitionError, DimensionError, GeometryError, NonFiniteError

from oracles import adam_reference, attention_direct, conv3d_loops


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# -- conv3d ----------------------------------------------------------------

def test_conv3d_scalar_multiply():
    out = T.conv3d(torch.full((1, 1, 1, 1, 1), 2.0), torch.full((1, 1, 1, 1, 1), 3.0))
    assert out.item() == 6.0


def test_conv3d_eight_taps():
    out = T.conv3d(torch.ones(1, 1, 2, 2, 2), torch.ones(1, 1, 2, 2, 2))
    assert out.shape == (1, 1, 1, 1, 1) and out.item() == 8.0


def test_conv3d_encoder_downsampling_shape():
    out = T.conv3d(torch.zeros(1, 1, 8, 64, 64), torch.zeros(240, 1, 4, 4, 4), 2, 1)
    assert out.shape == (1, 240, 4, 32, 32)


@pytest.mark.parametrize("stride,pad", [((1, 1, 1), (0, 0, 0)), ((2, 1, 2), (1, 0, 1)), ((1, 2, 1), (0, 1, 1))])
def test_conv3d_matches_loops(rng, stride, pad):
    x = rng.standard_normal((2, 2, 5, 4, 5))
    k = rng.standard_normal((3, 2, 3, 2, 3))
    b = rng.standard_normal(3)
    got = T.conv3d(t64(x), t64(k), stride, pad, t64(b)).numpy()
    np.testing.assert_allclose(got, conv3d_loops(x, k, stride, pad, b), rtol=0, atol=1e-12)


def test_conv3d_errors():
    with pytest.raises(DimensionError):
        T.conv3d(torch.zeros(1, 2, 3, 3, 3), torch.zeros(1, 3, 1, 1, 1))
    with pytest.raises(GeometryError):
        T.conv3d(torch.zeros(1, 1, 2, 2, 2), torch.zeros(1, 1, 3, 3, 3))
    with pytest.raises(DimensionError):
        T.conv3d(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 1, 1))


# -- conv_transpose3d -------------------------------------------------------

def test_conv_transpose_decoder_upsampling_shape():
    out = T.conv_transpose3d(torch.zeros(1, 8, 2, 32, 32), torch.zeros(8, 8, 4, 4, 4), 2, 1)
    assert out.shape == (1, 8, 4, 64, 64)


def test_conv_transpose_identity_kernel(rng):
    x = t64(rng.standard_normal((2, 1, 3, 4, 5)))
    assert torch.equal(T.conv_transpose3d(x, torch.ones(1, 1, 1, 1, 1, dtype=torch.float64)), x)


def test_conv_adjoint_identity():
    assert adjoint_gap(0) <= 1e-10


@given(seed=st.integers(0, 2**31 - 1), s=st.integers(1, 2), p=st.integers(0, 1))
@settings(max_examples=25, deadline=None)
def test_conv_adjoint_identity_property(seed, s, p):
    # extents chosen so that (n + 2p - k) is divisible by the stride
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 4, 6, 8, generator=g, dtype=torch.float64)
    k = torch.randn(2, 3, 2, 2, 2, generator=g, dtype=torch.float64)
    y = torch.randn(*T.conv3d(x, k, s, p).shape, generator=g, dtype=torch.float64)
    lhs = (T.conv3d(x, k, s, p) * y).sum()
    rhs = (x * T.conv_transpose3d(y, k, s, p)).sum()
    assert abs(float(lhs - rhs)) <= 1e-10 * max(1.0, float(lhs.abs()))


def test_same_padding():
    assert T.same_padding(4, 2) == (1, 1)
    assert T.same_padding(4, 1) == (2, 1)
    assert T.same_padding(3, 1) == (1, 1)


# -- stop_gradient ---------------------------------------------------------

def test_stop_gradient_product_rule():
    x = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    (T.stop_gradient(x) * x).backward()
    assert x.grad.item() == 3.0


def test_stop_gradient_zero_derivative():
    x = torch.tensor([1.5, -2.0], requires_grad=True)
    y = T.stop_gradient(x ** 2).sum() + 0 * x.sum()
    y.backward()
    assert torch.equal(x.grad, torch.zeros(2))


def test_stop_gradient_forward_identity(rng):
    x = torch.as_tensor(rng.standard_normal(7))
    assert torch.equal(T.stop_gradient(x), x)


# -- layer_norm ------------------------------------------------------------

def test_layer_norm_constant_input_gives_bias():
    out = T.layer_norm(torch.full((2, 5), 4.0), -1, torch.ones(5), torch.full((5,), 0.7))
    assert torch.allclose(out, torch.full((2, 5), 0.7))


def test_layer_norm_two_values():
    out = T.layer_norm(torch.tensor([[1.0, 3.0]], dtype=torch.float64), -1, eps=1e-12)
    np.testing.assert_allclose(out.numpy(), [[-1.0, 1.0]], atol=1e-9)


def test_layer_norm_zero_mean(rng):
    out = T.layer_norm(torch.as_tensor(rng.standard_normal((4, 3, 6))), (1, 2))
    assert out.mean(dim=(1, 2)).abs().max() <= 1e-6


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ConfigurationError):
        T.layer_norm(torch.ones(3), -1, eps=0.0)


# -- attention -------------------------------------------------------------

def test_attention_single_key(rng):
    q = torch.as_tensor(rng.standard_normal((1, 2, 4, 3)))
    k = torch.as_tensor(rng.standard_normal((1, 2, 1, 3)))
    v = torch.as_tensor(rng.standard_normal((1, 2, 1, 3)))
    out = T.masked_attention(q, k, v)
    assert torch.allclose(out, v.expand(1, 2, 4, 3))


def test_attention_identical_keys_average_values(rng):
    q = torch.as_tensor(rng.standard_normal((1, 1, 3, 4)))
    k = torch.as_tensor(np.tile(rng.standard_normal(4), (5, 1)))[None, None]
    v = torch.as_tensor(rng.standard_normal((1, 1, 5, 4)))
    out = T.masked_attention(q, k, v)
    assert torch.allclose(out, v.mean(dim=2, keepdim=True).expand_as(out), atol=1e-12)


def test_causal_attention_matches_direct_softmax(rng):
    q, k, v = (rng.standard_normal((1, 1, 4, 3)) for _ in range(3))
    mask = T.causal_mask(4)
    out, w = T.masked_attention(t64(q), t64(k), t64(v), mask, return_weights=True)
    ref_out, ref_w = attention_direct(q, k, v, mask.numpy())
    np.testing.assert_allclose(w.numpy(), ref_w, atol=1e-12)
    np.testing.assert_allclose(out.numpy(), ref_out, atol=1e-12)
    w = w[0, 0].numpy()
    assert np.all(np.triu(w, 1) == 0.0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_attention_fully_masked_row():
    mask = torch.tensor([[True, False], [False, False]])
    with pytest.raises(DefinitionError):
        T.masked_attention(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2), mask)


# -- Adam ------------------------------------------------------------------

def test_adam_zero_gradient():
    p = torch.tensor([1.0, -2.0])
    st_ = T.AdamState()
    T.adam_step([p], [torch.zeros(2)], st_)
    assert torch.equal(p, torch.tensor([1.0, -2.0])) and st_.step == 1


def test_adam_first_step_is_lr_times_sign():
    p = torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64)
    g = torch.tensor([2.0, -0.01, 30.0], dtype=torch.float64)
    T.adam_step([p], [g], T.AdamState())
    np.testing.assert_allclose(0.5 - p.numpy(), 3e-4 * np.sign(g.numpy()), rtol=1e-5)


def test_adam_equal_gradients_equal_updates():
    a, b = torch.tensor([1.0]), torch.tensor([1.0])
    g = torch.tensor([0.3])
    T.adam_step([a, b], [g, g.clone()], T.AdamState())
    assert torch.equal(a, b)


def test_adam_matches_textbook(rng):
    p0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(7)]
    p = torch.as_tensor(p0.copy())
    st_ = T.AdamState()
    for g in grads:
        T.adam_step([p], [torch.as_tensor(g)], st_)
    np.testing.assert_allclose(p.numpy(), adam_reference(p0, grads), rtol=1e-12, atol=1e-15)
    assert all((v >= 0).all() for v in st_.v)


def test_adam_rejects_nonfinite_without_touching_params():
    a, b = torch.tensor([1.0]), torch.tensor([2.0])
    st_ = T.AdamState()
    with pytest.raises(NonFiniteError):
        T.adam_step([a, b], [torch.tensor([0.1]), torch.tensor([float("nan")])], st_)
    assert a.item() == 1.0 and b.item() == 2.0 and st_.step == 0


# -- grad_check ------------------------------------------------------------

def test_grad_check_square():
    res = T.grad_check(lambda x: (x ** 2).sum(), [torch.tensor([3.0], dtype=torch.float64)], delta=1e-4)
    assert abs(res.analytic[0] - 6.0) < 1e-8 and abs(res.numeric[0] - 6.0) < 1e-8


def test_grad_check_conv_sum(rng):
    x = t64(rng.standard_normal((1, 1, 3, 4, 4)))
    k = t64(rng.standard_normal((2, 1, 2, 2, 2)))
    res = T.grad_check(lambda x, k: T.conv3d(x, k).sum(), [x, k])
    assert res.max_rel_error <= 1e-5


def test_grad_check_flags_stop_gradient():
    res = T.grad_check(lambda x: T.stop_gradient(x ** 2).sum(), [torch.tensor([1.0, 2.0], dtype=torch.float64)],
                       nondifferentiable=True)
    assert np.all(res.analytic == 0.0) and np.all(res.numeric != 0.0)
    assert res.expected_by_contract


def test_grad_check_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        T.grad_check(lambda x: torch.log(x).sum(), [torch.tensor([1e-5], dtype=torch.float64)], delta=1e-4)


def test_gradient_suite_passes():
    records = run_suite()
    failing = [r for r in records if not r["passed"]]
    assert not failing, failing
    assert all(r["probes"] >= 20 for r in records if r["op"] != "conv_adjoint_identity")


def test_deterministic_backward_is_bitwise_reproducible(rng):
    x0 = rng.standard_normal((2, 3, 5, 5, 5)).astype(np.float32)
    k0 = rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32)

    def grads():
        x = torch.tensor(x0, requires_grad=True)
        k = torch.tensor(k0, requires_grad=True)
        T.conv3d(x, k, 1, 1).square().sum().backward()
        return x.grad.clone(), k.grad.clone()

    a, b = grads(), grads()
    assert all(torch.equal(u, v) for u, v in zip(a, b))
