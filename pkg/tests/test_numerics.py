import numpy as np
import pytest

import accuquant as aq


def test_gaussian_sample_deterministic():
    a1 = aq.gaussian_sample(aq.Rng(7), [4])
    a2 = aq.gaussian_sample(aq.Rng(7), [4])
    assert np.array_equal(a1, a2)
    rng = aq.Rng(7)
    first = aq.gaussian_sample(rng, [4])
    second = aq.gaussian_sample(rng, [4])
    assert not np.array_equal(first, second)
    rng2 = aq.Rng(7)
    assert np.array_equal(first, aq.gaussian_sample(rng2, [4]))
    assert np.array_equal(second, aq.gaussian_sample(rng2, [4]))


def test_gaussian_sample_moments():
    x = aq.gaussian_sample(aq.Rng(1), [10000])
    assert -0.05 < x.mean() < 0.05
    assert 0.9 < x.var() < 1.1


def test_gaussian_sample_empty_shape():
    with pytest.raises(ValueError, match="empty shape"):
        aq.gaussian_sample(aq.Rng(0), [0])
    with pytest.raises(ValueError, match="empty shape"):
        aq.gaussian_sample(aq.Rng(0), [])


def test_substreams_independent():
    base = aq.Rng(3)
    a = aq.gaussian_sample(base.substream(0), [8])
    b = aq.gaussian_sample(base.substream(1), [8])
    assert not np.array_equal(a, b)
    assert np.array_equal(a, aq.gaussian_sample(aq.Rng(3).substream(0), [8]))


def test_adam_zero_gradient_fixed_point():
    params = np.array([1.5, -2.0, 0.3])
    state = aq.AdamState(lr=0.1)
    new, state = aq.adam_step(params, np.zeros(3), state)
    assert np.array_equal(new, params)
    assert state.step == 1
    assert np.all(state.m == 0) and np.all(state.v == 0)


def test_adam_first_step_by_hand():
    new, state = aq.adam_step(np.array([1.0]), np.array([1.0]), aq.AdamState(lr=0.1))
    expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
    assert new[0] == pytest.approx(expected, abs=1e-15)


def test_adam_trajectories_reproducible():
    def run():
        p = np.array([1.0, 2.0])
        st = aq.AdamState(lr=0.05)
        rng = aq.Rng(9)
        out = []
        for _ in range(20):
            g = aq.gaussian_sample(rng, [2])
            p, st = aq.adam_step(p, g, st)
            out.append(p.copy())
        return np.stack(out)

    assert np.array_equal(run(), run())


def test_adam_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        aq.adam_step(np.zeros(2), np.zeros(3), aq.AdamState(lr=0.1))


def test_finite_diff_quadratic_exact():
    g = aq.finite_diff_grad(lambda v: float(v[0] ** 2), np.array([3.0]), eps=1e-5)
    assert g[0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_constant_zero():
    g = aq.finite_diff_grad(lambda v: 4.2, np.array([1.0, -1.0, 0.5]))
    assert np.array_equal(g, np.zeros(3))


def test_finite_diff_polynomials_deg2_exact():
    coefs = aq.gaussian_sample(aq.Rng(2), [3])

    def f(v):
        return float(coefs[0] + coefs[1] * v.sum() + coefs[2] * (v**2).sum())

    x = aq.gaussian_sample(aq.Rng(4), [4])
    g = aq.finite_diff_grad(f, x, eps=1e-5)
    expected = coefs[1] + 2.0 * coefs[2] * x
    assert np.allclose(g, expected, atol=1e-9)


def test_finite_diff_nonfinite_names_coordinate():
    def f(v):
        return float("nan") if v[1] > 0.5 else 0.0

    with pytest.raises(ValueError, match="coordinate 1"):
        aq.finite_diff_grad(f, np.array([0.0, 0.5]), eps=1e-3)
