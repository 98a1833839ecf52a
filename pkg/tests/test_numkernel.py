import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from milpath.numkernel import (AdamState, DimensionError, NumericError, ParamSet, Rng, adam_step,
                               affine, cross_entropy, cross_entropy_grad, grad_check, init_uniform,
                               log_softmax, softmax, splitmix64_next)

MASK = (1 << 64) - 1


def reference_splitmix(seed, n):
    """Textbook SplitMix64, written out independently of the package."""
    out, x = [], seed
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) & MASK
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def test_splitmix_seed0_first_value():
    value, state = splitmix64_next(0)
    assert value == 0xE220A8397B1DCDAF
    assert state == 0x9E3779B97F4A7C15


def test_splitmix_stream_changes_and_repeats():
    a, b = Rng(0), Rng(0)
    first, second = a.next_u64(), a.next_u64()
    assert first != second
    assert [Rng(0).next_u64() for _ in range(1)] == [first]
    s1 = [b.next_u64() for _ in range(1000)]
    c = Rng(0)
    assert s1 == [c.next_u64() for _ in range(1000)]


@given(st.integers(min_value=0, max_value=MASK), st.integers(min_value=1, max_value=50))
@settings(max_examples=50, deadline=None)
def test_vector_stream_matches_scalar(seed, n):
    assert [int(v) for v in Rng(seed).u64_array(n)] == reference_splitmix(seed, n)
    r = Rng(seed)
    r.u64_array(n)
    assert r.next_u64() == reference_splitmix(seed, n + 1)[-1]


def test_uniform_in_unit_interval():
    u = Rng(3).uniform_array(10000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.02
    r = Rng(3)
    assert [r.uniform() for _ in range(5)] == list(Rng(3).uniform_array(5))


def test_permutation_is_permutation():
    for n in (0, 1, 2, 17):
        assert sorted(Rng(n).permutation(n)) == list(range(n))


def test_normals_have_unit_moments():
    z = Rng(1).normal_array(20001)
    assert z.shape == (20001,)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03


def test_affine_identity_and_zero():
    np.testing.assert_array_equal(affine(np.array([3.0, 4.0]), np.eye(2), np.zeros(2)), [3.0, 4.0])
    np.testing.assert_array_equal(affine(np.array([7.0, -1.0, 2.0]), np.zeros((2, 3)), np.array([1.0, 2.0])),
                                  [1.0, 2.0])


def test_affine_matches_scalar_loop():
    rng = np.random.default_rng(42)
    W, b, x = rng.normal(size=(5, 7)), rng.normal(size=5), rng.normal(size=7)
    expected = [b[i] + sum(W[i, j] * x[j] for j in range(7)) for i in range(5)]
    np.testing.assert_allclose(affine(x, W, b), expected, rtol=0, atol=1e-12)


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        affine(np.ones(3), np.ones((2, 4)), np.ones(2))
    with pytest.raises(DimensionError):
        affine(np.ones(4), np.ones((2, 4)), np.ones(3))


def test_softmax_examples():
    np.testing.assert_array_equal(softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    s = softmax(np.array([5.0, 1005.0]))
    assert np.all(np.isfinite(s)) and s[1] == 1.0 and s[0] < 1e-300
    exact = [Fraction(math.exp(k)) for k in (1, 2, 3)]
    total = sum(exact)
    np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), [float(e / total) for e in exact],
                               rtol=0, atol=1e-12)
    with pytest.raises(DimensionError):
        softmax(np.array([]))


@given(st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=1, max_size=30))
def test_softmax_is_probability_vector(values):
    s = softmax(np.array(values))
    assert np.all(s >= 0.0)
    assert abs(s.sum() - 1.0) <= 1e-12
    order = np.argsort(values, kind="stable")
    assert np.all(np.diff(s[order]) >= 0.0)


def test_cross_entropy_examples():
    assert cross_entropy(np.array([100.0, 0.0, 0.0]), 0) < 1e-40
    assert cross_entropy(np.zeros(3), 1) == pytest.approx(math.log(3), abs=1e-15)
    z = [0.2, -0.1, 0.5]
    naive = -math.log(math.exp(0.5) / sum(math.exp(v) for v in z))
    assert cross_entropy(np.array(z), 2) == pytest.approx(naive, abs=1e-12)
    with pytest.raises(IndexError):
        cross_entropy(np.zeros(2), 2)


def test_cross_entropy_grad_is_softmax_minus_onehot():
    z = np.array([0.3, -1.2, 2.0])
    loss, g = cross_entropy_grad(z, 0)
    assert loss == cross_entropy(z, 0)
    np.testing.assert_allclose(g, softmax(z) - np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(log_softmax(z), np.log(softmax(z)))


def test_adam_zero_gradient_is_identity():
    p = np.array([1.0, -2.0, 3.5])
    state = AdamState.for_params(3, lr=0.1)
    for _ in range(3):
        adam_step(p, np.zeros(3), state)
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.5])


def test_adam_single_scalar_step_closed_form():
    p = np.array([0.0])
    state = AdamState.for_params(1, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    adam_step(p, np.array([1.0]), state)
    assert state.t == 1
    assert p[0] == pytest.approx(-0.1 * 1.0 / (1.0 + 1e-8), rel=1e-12)


def test_adam_decoupled_decay_applied_before_delta():
    p = np.array([2.0])
    state = AdamState.for_params(1, lr=0.1, weight_decay=0.5)
    adam_step(p, np.array([1.0]), state)
    assert p[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0 - 0.1 / (1.0 + 1e-8), rel=1e-12)


def test_adam_coupled_decay_folds_into_gradient():
    p = np.array([2.0])
    state = AdamState.for_params(1, lr=0.1, weight_decay=0.5, decay="l2")
    adam_step(p, np.array([0.0]), state)
    # the gradient becomes wd * p = 1.0, so the first step has unit magnitude
    assert p[0] == pytest.approx(2.0 - 0.1 / (1.0 + 1e-8), rel=1e-12)


def test_adam_mask_freezes_entries():
    p = np.array([1.0, 1.0])
    state = AdamState.for_params(2, lr=0.1, weight_decay=0.1)
    adam_step(p, np.array([1.0, 1.0]), state, mask=np.array([True, False]))
    assert p[1] == 1.0 and p[0] < 1.0
    assert state.m[1] == 0.0 and state.v[1] == 0.0


def test_adam_state_validation():
    with pytest.raises(ValueError):
        AdamState.for_params(1, beta1=1.0)
    with pytest.raises(ValueError):
        AdamState.for_params(1, decay="sgd")
    with pytest.raises(DimensionError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.for_params(2))


def test_paramset_views_share_flat():
    ps = ParamSet({"a.W": (2, 3), "a.b": (1, 2)})
    assert ps.flat.size == 8
    ps["a.W"][...] = 1.0
    assert ps.flat[:6].sum() == 6.0
    ps["a.b"] += 2.0
    assert list(ps.flat[6:]) == [2.0, 2.0]
    assert ps.slice_of("a.b") == slice(6, 8)
    with pytest.raises(DimensionError):
        ParamSet({"a.W": (2, 3)}, np.zeros(5))


def test_init_uniform_bounds_use_weight_fan_in():
    ps = ParamSet({"l.W": (50, 16), "l.b": (1, 50)})
    init_uniform(ps, Rng(0))
    assert np.abs(ps.flat).max() <= 0.25
    assert np.abs(ps["l.b"]).max() > 0.2
    again = ParamSet(ps.shapes)
    init_uniform(again, Rng(0))
    np.testing.assert_array_equal(ps.flat, again.flat)


def test_grad_check_quadratic_and_corruption():
    p = np.random.default_rng(0).normal(size=20)
    assert grad_check(lambda q: (0.5 * float(q @ q), q.copy()), p) < 1e-9

    def corrupted(q):
        g = q.copy()
        g[3] *= 2.0
        return 0.5 * float(q @ q), g

    assert grad_check(corrupted, p) > 0.3


def test_grad_check_rejects_non_finite():
    with pytest.raises(NumericError):
        grad_check(lambda q: (float("nan"), q), np.ones(2))
    with pytest.raises(ValueError):
        grad_check(lambda q: (0.0, q), np.ones(2), eps=0.0)
