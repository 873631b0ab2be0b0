import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import top_singular_value
from ugatit.gradcheck import finite_diff_check
from ugatit.norm import (EPS, SpectralState, ada_lin, clip_rho, group_norm, instance_norm,
                         layer_norm, lin_norm, moments, power_iterate, rho_update,
                         spectral_normalize)
from ugatit.tensor import Tensor


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# moments and the plain norms
# ---------------------------------------------------------------------------

def test_moments_examples():
    mu, sd = moments(np.array([1.0, 3, 5, 7]).reshape(1, 1, 2, 2), "channel")
    assert mu.item() == 4.0
    assert sd.item() == pytest.approx(math.sqrt(5.0), abs=1e-15)

    const = np.full((2, 3, 2, 2), 4.2)
    for scope, g in (("channel", None), ("layer", None), ("group", 3)):
        assert np.all(moments(const, scope, g)[1] == 0.0)

    x = np.stack([np.zeros((2, 2)), np.full((2, 2), 2.0)])[None]
    mu, sd = moments(x, "layer")
    assert (mu.item(), sd.item()) == (1.0, 1.0)

    with pytest.raises(ValueError, match="divide"):
        moments(np.zeros((1, 4, 2, 2)), "group", 3)


def test_instance_norm_example(f64):
    y = instance_norm(T(np.array([1.0, 3, 5, 7]).reshape(1, 1, 2, 2)), eps=1e-5)
    np.testing.assert_allclose(y.data.ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)


def test_zero_gamma_gives_beta(f64, rng):
    x = T(rng.normal(size=(2, 3, 4, 4)))
    beta = rng.normal(size=3)
    for fn in (instance_norm, layer_norm):
        y = fn(x, T(np.zeros(3)), T(beta))
        np.testing.assert_array_equal(y.data, np.broadcast_to(beta.reshape(1, 3, 1, 1), y.shape))


def test_group_norm_scope_coincidences(f64, rng):
    x = T(rng.normal(size=(2, 4, 3, 3)))
    np.testing.assert_allclose(group_norm(x, groups=4).data, instance_norm(x).data, atol=1e-6)
    np.testing.assert_allclose(group_norm(x, groups=1).data, layer_norm(x).data, atol=1e-6)


def test_instance_norm_statistics(f64, rng):
    x = rng.normal(2.0, 3.0, size=(3, 4, 5, 5))
    y = instance_norm(T(x)).data
    assert np.abs(y.mean(axis=(2, 3))).max() <= 1e-6
    var = x.var(axis=(2, 3))
    target = var / (var + EPS)
    ratio = y.var(axis=(2, 3)) / target
    assert np.all((ratio >= 1 - 1e-3) & (ratio <= 1 + 1e-12))


# ---------------------------------------------------------------------------
# AdaLIN / LIN
# ---------------------------------------------------------------------------

def _case(rng, b=2, c=3, hw=4):
    x = rng.normal(size=(b, c, hw, hw)) * rng.uniform(0.5, 3) + rng.normal()
    return x, rng.normal(size=(b, c)), rng.normal(size=(b, c))


def test_ada_lin_gate_limits(f64, rng):
    x, g, b = _case(rng)
    ones, zeros = T(np.ones(3)), T(np.zeros(3))
    gi, bi = T(g), T(b)
    np.testing.assert_allclose(ada_lin(T(x), gi, bi, ones).data, instance_norm(T(x), gi, bi).data,
                               atol=1e-6, rtol=0)
    np.testing.assert_allclose(ada_lin(T(x), gi, bi, zeros).data, layer_norm(T(x), gi, bi).data,
                               atol=1e-6, rtol=0)


def test_ada_lin_midpoint_against_recomputation(f64):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 2, 4, 4))
    # Recompute both normalized paths by hand.
    x_in = (x - x.mean(axis=(2, 3), keepdims=True)) / np.sqrt(x.var(axis=(2, 3), keepdims=True) + EPS)
    x_ln = (x - x.mean(axis=(1, 2, 3), keepdims=True)) / np.sqrt(
        x.var(axis=(1, 2, 3), keepdims=True) + EPS)
    y = ada_lin(T(x), None, None, T(np.full(2, 0.5)))
    np.testing.assert_allclose(y.data, 0.5 * x_in + 0.5 * x_ln, atol=1e-10, rtol=0)


def test_ada_lin_linear_in_gamma_beta(f64, rng):
    for _ in range(10):
        x, g, b = _case(rng)
        rho = T(rng.uniform(0, 1, 3))
        lhs = ada_lin(T(x), T(2 * g), T(b), rho).data - ada_lin(T(x), T(g), T(b), rho).data
        np.testing.assert_allclose(lhs, ada_lin(T(x), T(g), T(np.zeros_like(b)), rho).data,
                                   atol=1e-12)


def test_ada_lin_affine_in_rho(f64):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x, g, b = _case(rng)
        r = rng.uniform(0, 1, 3)
        out = lambda rho: ada_lin(T(x), T(g), T(b), T(rho)).data  # noqa: E731
        expect = r.reshape(1, 3, 1, 1) * out(np.ones(3)) + (1 - r.reshape(1, 3, 1, 1)) * out(np.zeros(3))
        np.testing.assert_allclose(out(r), expect, atol=1e-6, rtol=0)


def test_ada_lin_rejects_unclamped_rho(f64):
    x = T(np.zeros((1, 2, 2, 2)))
    with pytest.raises(ValueError, match="clamp"):
        ada_lin(x, None, None, T([0.5, 1.2]))


def test_lin_norm_limits(f64, rng):
    x = T(rng.normal(size=(1, 3, 4, 4)))
    g, b = T(np.ones(3)), T(np.zeros(3))
    np.testing.assert_allclose(lin_norm(x, g, b, T(np.ones(3))).data, instance_norm(x).data, atol=1e-12)
    np.testing.assert_allclose(lin_norm(x, g, b, T(np.zeros(3))).data, layer_norm(x).data, atol=1e-12)


def test_lin_norm_rho_gradient(f64, rng):
    x = leaf(rng.normal(size=(2, 3, 4, 4)))
    g, b, rho = leaf(rng.normal(size=3)), leaf(rng.normal(size=3)), leaf([0.3, 0.5, 0.8])
    rep = finite_diff_check(lambda: lin_norm(x, g, b, rho).sum(), {"rho": rho, "gamma": g},
                            tolerance=1e-6)
    assert rep.passed, rep.lines()


def test_ada_lin_gradients_small_case(f64):
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(1, 2, 4, 4)))
    g, b = leaf(rng.normal(size=(1, 2))), leaf(rng.normal(size=(1, 2)))
    rho = leaf([0.25, 0.7])
    probe = T(rng.uniform(0.5, 1.5, (1, 2, 4, 4)))
    rep = finite_diff_check(lambda: (ada_lin(x, g, b, rho) * probe).sum(),
                            {"x": x, "gamma": g, "beta": b, "rho": rho}, tolerance=1e-6)
    assert rep.passed, rep.lines()


# ---------------------------------------------------------------------------
# clip_rho
# ---------------------------------------------------------------------------

def test_clip_rho_examples():
    assert clip_rho([1.2, -0.3, 0.47]).tolist() == [1.0, 0.0, 0.47]
    assert rho_update([0.99995], 1.0, [-0.00025]).tolist() == [1.0]
    t = T([2.0, 0.5])
    assert clip_rho(t) is t and t.data.tolist() == [1.0, 0.5]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=16))
def test_clip_rho_idempotent(values):
    once = clip_rho(values)
    np.testing.assert_array_equal(clip_rho(once), once)
    assert np.all((once >= 0) & (once <= 1))


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------

def _state(w, seed=0):
    return SpectralState.init(w.shape[0], int(np.prod(w.shape[1:])), np.random.default_rng(seed),
                              np.float64)


def test_spectral_identity_unchanged(f64):
    w = T(np.eye(2))
    np.testing.assert_allclose(spectral_normalize(w, _state(w.data)).data, np.eye(2), atol=1e-12)


def test_spectral_diag_example(f64):
    w = T(np.diag([2.0, 1.0]))
    y = spectral_normalize(w, _state(w.data), power_iters=50)
    assert abs(np.linalg.svd(w.data, compute_uv=False)[0] - 2.0) < 1e-12
    np.testing.assert_allclose(y.data, np.diag([1.0, 0.5]), atol=1e-6)


def test_spectral_scale_invariance(f64, rng):
    w = rng.normal(size=(6, 5))
    s1, s2 = _state(w), _state(w)
    a = spectral_normalize(T(w), s1, power_iters=200).data
    b = spectral_normalize(T(7.5 * w), s2, power_iters=200).data
    np.testing.assert_allclose(a, b, atol=1e-6)


SN_SHAPES = [(2, 3), (8, 8), (16, 16), (32, 32), (64, 64), (64, 8), (8, 64)]


def _normalized_norms(rounds, seeds=range(50)):
    worst = 0.0
    for shape in SN_SHAPES:
        for seed in seeds:
            w = np.random.default_rng(seed).normal(size=shape)
            state = _state(w, seed)
            for _ in range(rounds):
                y = spectral_normalize(T(w), state).data
            worst = max(worst, top_singular_value(y))
    return worst


@pytest.mark.xfail(strict=True, reason="20 power rounds do not resolve close top singular "
                                       "values of Gaussian matrices to 1e-3")
def test_spectral_output_norm_bounded_after_20_rounds(f64):
    assert _normalized_norms(20) <= 1 + 1e-3


def test_spectral_output_norm_bounded_after_convergence(f64):
    worst = _normalized_norms(500, seeds=range(10))
    assert worst <= 1 + 1e-3
    assert worst >= 1 - 1e-9       # the estimate never overshoots the true norm


def test_spectral_persistent_state_and_zero_error(f64, rng):
    w = rng.normal(size=(4, 3))
    state = _state(w)
    u0 = state.u.copy()
    spectral_normalize(T(w), state, update=False)
    np.testing.assert_array_equal(state.u, u0)
    spectral_normalize(T(w), state)
    assert not np.array_equal(state.u, u0)
    with pytest.raises(ZeroDivisionError):
        power_iterate(np.zeros((3, 3)), _state(np.zeros((3, 3))))
    with pytest.raises(ValueError):
        spectral_normalize(T(w), state, power_iters=0)


def test_spectral_gradient(f64, rng):
    w = leaf(rng.normal(size=(3, 2, 2, 2)))
    state = _state(w.data)
    power_iterate(w.data.reshape(3, -1), state, 5)
    probe = T(rng.uniform(0.5, 1.5, w.shape))
    rep = finite_diff_check(lambda: (spectral_normalize(w, state, update=False) * probe).sum(),
                            {"w": w}, tolerance=1e-6)
    assert rep.passed, rep.lines()
