import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptq import autodiff as ad
from adaptq.levels import Codebook, KmeansConfig, apot_levels, kmeans_levels, pot_levels, uniform_levels
from adaptq.quantizer import (
    FakeQuantState,
    LayerQuant,
    alpha_gradient,
    attach,
    dequantize,
    quantize,
    ste_backward,
)


def random_codebook(rng, scheme="kmeans"):
    k = int(rng.integers(2, 17))
    levels = np.sort(rng.uniform(-1, 1, k))
    while np.unique(levels).size != k:
        levels = np.sort(rng.uniform(-1, 1, k))
    return Codebook(levels, float(rng.uniform(0.01, 3.0)), scheme, int(np.ceil(np.log2(k))))


def nearest_by_scan(w, cb):
    out = []
    for x in np.ravel(w):
        dist = [abs(x / cb.alpha - q) for q in cb.levels]
        out.append(int(np.argmin(dist)))  # first minimum = lower index
    return np.array(out)


def test_quantize_matches_scan():
    rng = np.random.default_rng(0)
    for _ in range(10):
        cb = random_codebook(rng)
        w = rng.uniform(-2 * cb.alpha, 2 * cb.alpha, 1000)
        np.testing.assert_array_equal(quantize(w, cb), nearest_by_scan(w, cb))


def test_exact_level_is_fixed_point():
    cb = uniform_levels(4, alpha=0.3)
    for k in range(cb.size):
        assert quantize(cb.alpha * cb.levels[k], cb) == k


def test_clamping():
    cb = pot_levels(3, alpha=0.5)
    assert quantize(100.0, cb) == cb.size - 1
    assert quantize(-100.0, cb) == 0


def test_tie_goes_to_lower_index():
    cb = Codebook([-1.0, 0.0, 1.0], 1.0, "uniform", 2)
    assert quantize(0.5, cb) == 1
    assert quantize(-0.5, cb) == 0


def test_dequantize():
    cb = Codebook([-0.5, 0.0, 0.5], 2.0, "kmeans", 2)
    assert dequantize(2, cb) == 1.0
    assert Codebook([-1.0, 0.0, 1.0], 1.0, "uniform", 2).values()[1] == 0.0
    with pytest.raises(IndexError):
        dequantize(3, cb)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["kmeans", "uniform", "pot", "apot"]))
def test_quantize_is_a_projection(seed, scheme):
    rng = np.random.default_rng(seed)
    if scheme == "kmeans":
        cb = kmeans_levels(rng.normal(0, 0.05, 512), KmeansConfig(int(rng.integers(1, 5))))
    elif scheme == "apot":
        cb = apot_levels(4, float(rng.uniform(0.1, 2)))
    else:
        cb = (uniform_levels if scheme == "uniform" else pot_levels)(int(rng.integers(2, 5)), float(rng.uniform(0.1, 2)))
    w = rng.normal(0, cb.alpha, 300)
    once = dequantize(quantize(w, cb), cb)
    twice = dequantize(quantize(once, cb), cb)
    np.testing.assert_array_equal(once, twice)


def test_error_bound_in_range():
    rng = np.random.default_rng(1)
    cb = kmeans_levels(rng.normal(0, 0.02, 2048), KmeansConfig(3))
    w = rng.uniform(cb.values()[0], cb.values()[-1], 5000)
    err = np.abs(w - dequantize(quantize(w, cb), cb))
    assert err.max() <= cb.alpha * np.diff(cb.levels).max() / 2 + 1e-15


def test_ste_is_identity():
    latent = ad.Tensor(np.zeros((3, 2)), requires_grad=True)
    state = FakeQuantState(uniform_levels(2), latent)
    g = np.random.default_rng(0).normal(size=(3, 2))
    assert ste_backward(g, state) is g or np.array_equal(ste_backward(g, state), g)
    np.testing.assert_array_equal(ste_backward(np.zeros((3, 2)), state), 0)
    with pytest.raises(ValueError):
        ste_backward(np.zeros(6), state)


def test_alpha_gradient_examples():
    cb = Codebook([-1.0, 0.0, 1.0], 1.0, "uniform", 2)
    assert alpha_gradient(np.ones(4), [1, 1, 1, 1], cb) == 0.0
    cb2 = Codebook([-0.4, 0.7], 1.0, "kmeans", 1)
    assert alpha_gradient([2.5], [1], cb2) == pytest.approx(2.5 * 0.7)


def _fq_loss(state, w, target):
    q = state(w)
    return ad.sum_((q - ad.Tensor(target)) * (q - ad.Tensor(target)))


def test_alpha_gradient_finite_difference():
    rng = np.random.default_rng(3)
    w = ad.Tensor(rng.normal(0, 0.3, 5), requires_grad=True)
    target = rng.normal(0, 0.3, 5)
    state = FakeQuantState(uniform_levels(3, 0.4), w)
    loss = _fq_loss(state, w, target)
    g_alpha, g_w = ad.grad(loss, [state.alpha, w])
    # codes are held fixed, as in the product-rule derivation
    codes = state.codes()
    np.testing.assert_allclose(g_alpha.data, alpha_gradient(g_w.data, codes, state.codebook), rtol=1e-12)

    def f(a):
        q = a * state.codebook.levels[codes]
        return np.sum((q - target) ** 2)

    eps = 1e-6
    a0 = float(state.alpha.data)
    fd = (f(a0 + eps) - f(a0 - eps)) / (2 * eps)
    assert abs(float(g_alpha.data) - fd) <= 1e-5 * abs(fd)


def test_fake_quant_forward_and_ste():
    w = ad.Tensor(np.array([0.11, -0.52, 0.3]), requires_grad=True)
    state = FakeQuantState(uniform_levels(2, 0.5), w)
    q = state(w)
    np.testing.assert_array_equal(q.data, [0.0, -0.5, 0.5])
    (g,) = ad.grad(ad.sum_(q * ad.Tensor([1.0, 2.0, 3.0])), [w])
    np.testing.assert_array_equal(g.data, [1.0, 2.0, 3.0])


def test_disabled_state_passes_weights_through():
    w = ad.Tensor(np.array([0.11, -0.52]), requires_grad=True)
    state = FakeQuantState(uniform_levels(2, 0.5), w, enabled=False)
    assert state(w) is w


def test_attach_builds_requested_scheme():
    w = ad.Tensor(np.random.default_rng(0).normal(0, 0.1, (16, 8)), requires_grad=True)
    assert attach(LayerQuant("kmeans", 3), w).codebook.size == 8
    assert attach(LayerQuant("uniform", 3), w).codebook.size == 7
    assert attach(LayerQuant("pot", 2), w).codebook.size == 5
    assert attach(LayerQuant("apot", 4), w).codebook.scheme.value == "apot"
    assert attach(LayerQuant("static", 1), w).codebook.size == 2
