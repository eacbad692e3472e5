import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deformcorr import autodiff as ad
from deformcorr import linalg3


def rand(*shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape))


def test_sine_value_and_gradient_at_zero():
    x = torch.zeros(1, requires_grad=True)
    y = ad.sine(x, omega=30.0)
    assert float(y.detach()) == 0.0
    (g,) = torch.autograd.grad(y.sum(), x)
    assert float(g) == pytest.approx(30.0)


def test_smooth_l1_example_and_gradient():
    x = torch.tensor(3.0, requires_grad=True)
    y = ad.smooth_l1(x, torch.tensor(1.0), beta=1.0)
    assert float(y) == pytest.approx(1.5)
    (g,) = torch.autograd.grad(y, x)
    assert float(g) == pytest.approx(1.0)
    assert float(ad.smooth_l1(torch.tensor(1.5), torch.tensor(1.0))) == pytest.approx(0.125)


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(torch.zeros(20)).numpy(), 0.05)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
        ad.add(torch.zeros(2), torch.zeros(3))
    with pytest.raises(ad.ShapeError):
        ad.matvec(torch.zeros(3, 3), torch.zeros(2))
    with pytest.raises(ad.ShapeError):
        ad.matmul(torch.zeros(3, 2), torch.zeros(3, 3))
    with pytest.raises(ad.ShapeError):
        ad.cosine_similarity3(torch.zeros(2), torch.zeros(2))
    with pytest.raises(ad.ShapeError):
        ad.svd3_singular_values(torch.zeros(2, 2))


def test_primitive_catalogue_complete():
    names = set(ad.primitive_set())
    need = {"add", "sub", "mul", "matvec", "matmul", "sine", "scale", "relu", "abs", "exp", "norm", "sum", "mean",
            "smooth_l1", "softmax", "cosine_similarity3", "clamp_min", "svd3_singular_values"}
    assert need <= names


def test_backward_sum_of_squares_and_disconnected():
    x = torch.tensor([1.0, 2.0, 3.0], requires_grad=True)
    z = torch.tensor([5.0], requires_grad=True)
    g = ad.backward(ad.total(x * x), {"x": x, "z": z})
    np.testing.assert_allclose(g["x"].numpy(), [2, 4, 6])
    np.testing.assert_allclose(g["z"].numpy(), [0.0])


def test_backward_rejects_non_scalar():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(x * 2, [x])


def test_gradient_accumulates_over_paths():
    x = torch.tensor(2.0, requires_grad=True)
    g = ad.backward(x * 3 + x * x, [x])
    assert float(g[0]) == pytest.approx(3 + 4)


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x_in = torch.from_numpy(rng.normal(size=(5, 3)))
    w_shape = [(4, 3), (4,), (1, 4), (1,)]
    sizes = [int(np.prod(s)) for s in w_shape]
    flat = torch.from_numpy(rng.normal(size=sum(sizes)) * 0.5)

    def f(w):
        parts = torch.split(w, sizes)
        w1, b1, w2, b2 = [p.reshape(s) for p, s in zip(parts, w_shape)]
        h = ad.sine(x_in @ w1.T + b1, 2.0)
        return ad.mean((h @ w2.T + b2) ** 2)

    assert ad.finite_diff_check(f, flat) < 1e-4


def test_finite_diff_harness():
    x = rand(5, seed=1)
    assert ad.finite_diff_check(lambda v: torch.sum(v * v), x) < 1e-8
    j = rand(3, 3, seed=2)
    from deformcorr.losses import loss_arap

    assert ad.finite_diff_check(lambda m: loss_arap(m), j) < 1e-3


class _WrongSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 3 * x  # should be 2x


def test_finite_diff_harness_catches_wrong_rule():
    assert ad.finite_diff_check(lambda v: _WrongSquare.apply(v).sum(), rand(4, seed=3)) > 0.1


def test_finite_diff_non_finite_raises():
    with pytest.raises(FloatingPointError):
        ad.finite_diff_check(lambda v: torch.sum(torch.log(v)), torch.tensor([-1.0]))


@pytest.mark.parametrize("name", ["relu", "abs", "exp", "sine", "norm", "softmax", "clamp_min", "det3", "cos3"])
def test_elementwise_primitive_gradients(name):
    rng = np.random.default_rng(7)
    for k in range(100):
        x = torch.from_numpy(rng.normal(size=6))
        if name in ("relu", "abs", "clamp_min"):
            x = x + torch.sign(x) * 0.05  # keep away from the kink
        f = {
            "relu": lambda v: ad.total(ad.relu(v) * torch.arange(6.0)),
            "abs": lambda v: ad.total(ad.absolute(v) * torch.arange(6.0)),
            "exp": lambda v: ad.total(ad.exp(v)),
            "sine": lambda v: ad.total(ad.sine(v, 3.0)),
            "norm": lambda v: ad.norm(v),
            "softmax": lambda v: ad.total(ad.softmax(v) * torch.arange(6.0)),
            "clamp_min": lambda v: ad.total(ad.clamp_min(v, 0.0) * torch.arange(6.0)),
            "det3": lambda v: ad.det3(torch.cat([v, v[:3] * 0.3 + 1.0]).reshape(3, 3)),
            "cos3": lambda v: ad.cosine_similarity3(v[:3], v[3:]),
        }[name]
        assert ad.finite_diff_check(f, x) < 1e-4, (name, k)


def test_linear_primitive_gradients():
    a, v = rand(3, 3, seed=4), rand(3, seed=5)
    assert ad.finite_diff_check(lambda m: ad.total(ad.matvec(m, v) ** 2), a) < 1e-4
    assert ad.finite_diff_check(lambda m: ad.total(ad.matmul(m, a) ** 2), a) < 1e-4
    assert ad.finite_diff_check(lambda x: ad.total(ad.mul(x, x) + ad.sub(x, ad.scale(x, 2.0))), v) < 1e-4


def _random_mats(n, seed):
    rng = np.random.default_rng(seed)
    return [torch.from_numpy(rng.normal(size=(3, 3))) for _ in range(n)]


def test_singular_value_gradients_random():
    w = torch.tensor([1.0, -2.0, 0.7])
    dets = set()
    for m in _random_mats(100, 11):
        dets.add(float(torch.sign(torch.det(m))))
        err = ad.finite_diff_check(lambda x: torch.sum(ad.svd3_singular_values(x)[0] * w), m)
        assert err < 1e-4
    assert dets == {-1.0, 1.0}


def test_singular_values_match_linalg3():
    m = _random_mats(1, 12)[0]
    s, d = ad.svd3_singular_values(m)
    dec = linalg3.svd3(m.numpy())
    np.testing.assert_allclose(s.numpy(), dec.sigma)
    assert float(d) == dec.det_uv


def test_tied_singular_values_gradient_is_finite_and_symmetric():
    m = torch.eye(3, requires_grad=True)
    s, _ = ad.svd3_singular_values(m)
    (g,) = torch.autograd.grad(s[0], m)
    # A symmetric function of the tied triple: d(sum/3)/dM = I/3.
    np.testing.assert_allclose(g.numpy(), np.eye(3) / 3, atol=1e-12)


def test_s_sigma_gradient_is_rotation():
    m = torch.diag(torch.tensor([2.0, 1.0, 1.0])).requires_grad_(True)
    (g,) = torch.autograd.grad(ad.s_sigma(m), m)
    np.testing.assert_allclose(g.numpy(), np.eye(3), atol=1e-12)
    for k, m in enumerate(_random_mats(100, 13)):
        assert ad.finite_diff_check(lambda x: ad.s_sigma(x), m) < 1e-4


def test_closest_rotation_analytic_backward():
    wts = rand(3, 3, seed=14)
    for m in _random_mats(50, 15):
        f = lambda x: torch.sum(ad.closest_rotation(x, ad.SVDGradMode.ANALYTIC_S_SIGMA) * wts)
        assert ad.finite_diff_check(f, m) < 1e-4


def test_stop_gradient_rotation_has_zero_gradient():
    m = rand(3, 3, seed=16).requires_grad_(True)
    r = ad.closest_rotation(m, "stop_gradient_rotation")
    assert not r.requires_grad
    g = ad.backward(torch.sum(r) + 0.0 * torch.sum(m), [m])
    assert float(torch.abs(g[0]).max()) == 0.0


def test_both_modes_finite_on_random_jacobians():
    for mode in ad.SVDGradMode:
        for m in _random_mats(100, 17):
            x = m.clone().requires_grad_(True)
            r = ad.closest_rotation(x, mode)
            loss = torch.sum(r * m) + ad.s_sigma(x)
            (g,) = torch.autograd.grad(loss, x)
            assert torch.isfinite(g).all()


def test_grad_mode_parse():
    assert ad.SVDGradMode.parse("analytic_s_sigma") is ad.SVDGradMode.ANALYTIC_S_SIGMA
    with pytest.raises(ValueError, match="svd3_grad_mode"):
        ad.SVDGradMode.parse("bogus")


def test_deterministic_replay():
    m = rand(20, 3, 3, seed=18)

    def run():
        x = m.clone().requires_grad_(True)
        s, _ = ad.svd3_singular_values(x)
        loss = torch.sum(s ** 2) + torch.sum(ad.s_sigma(x))
        (g,) = torch.autograd.grad(loss, x)
        return loss.detach().numpy().tobytes(), g.numpy().tobytes()

    assert run() == run()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-2, 2, allow_nan=False)))
def test_singular_values_invariant_under_transpose(m):
    t = torch.from_numpy(m)
    a, _ = ad.svd3_singular_values(t)
    b, _ = ad.svd3_singular_values(t.T.contiguous())
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-9)
