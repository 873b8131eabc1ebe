import numpy as np
import pytest

import accuquant as aq


def test_linear_schedule_product_formula():
    T = 100
    sched = aq.make_schedule("linear", T, 1e-4, 0.02)
    # independent oracle: evaluate the cumulative product directly
    betas = np.linspace(1e-4, 0.02, T)
    betas = np.concatenate([betas, betas[-1:]])
    expected = np.cumprod(1.0 - betas)
    assert np.allclose(sched.alpha, expected, rtol=1e-15)
    b1 = 1e-4 + (0.02 - 1e-4) / 99
    assert sched.alpha[1] == pytest.approx((1 - 1e-4) * (1 - b1), rel=1e-14)
    assert np.all(np.diff(sched.alpha) < 0)
    assert 0.99 < sched.alpha[0] <= 1.0


def test_schedule_two_factor_product():
    sched = aq.make_schedule("linear", 1, 0.5, 0.5)
    assert sched.alpha[0] == pytest.approx(0.5)
    assert sched.alpha[1] == pytest.approx(0.25)


def test_schedule_invalid_beta():
    with pytest.raises(ValueError):
        aq.make_schedule("linear", 10, 1e-4, 1.5)
    with pytest.raises(ValueError):
        aq.make_schedule("linear", 10, 0.0, 0.02)


def test_cosine_schedule_valid():
    sched = aq.make_schedule("cosine", 50)
    assert np.all(np.diff(sched.alpha) < 0)
    assert sched.alpha[0] > 0.99


def test_schedule_json_roundtrip(default_schedule):
    restored = aq.NoiseSchedule.from_json(default_schedule.to_json())
    assert restored.T == default_schedule.T
    assert np.array_equal(restored.alpha, default_schedule.alpha)
    assert restored.kind == default_schedule.kind


def test_forward_diffuse_zero_noise_limit():
    sched = aq.NoiseSchedule(T=1, alpha=np.array([1.0, 0.5]), kind="manual")
    x0 = np.array([3.0, -1.0])
    out = aq.forward_diffuse(x0, 0, np.array([5.0, 5.0]), sched)
    assert np.array_equal(out, x0)


def test_forward_diffuse_substitution():
    sched = aq.NoiseSchedule(T=1, alpha=np.array([1.0, 0.25]), kind="manual")
    out = aq.forward_diffuse(np.array([2.0, 0.0]), 1, np.array([0.0, 4.0]), sched)
    assert np.allclose(out, [1.0, 2.0 * np.sqrt(3.0)])


def test_forward_diffuse_zero_eps(default_schedule):
    x0 = np.array([1.0, 2.0])
    out = aq.forward_diffuse(x0, 40, np.zeros(2), default_schedule)
    assert np.allclose(out, np.sqrt(default_schedule.alpha[40]) * x0)


def test_forward_diffuse_shape_mismatch(default_schedule):
    with pytest.raises(ValueError, match="shape mismatch"):
        aq.forward_diffuse(np.zeros(2), 1, np.zeros(3), default_schedule)


def test_step_coeffs_equal_alpha_point():
    sched = aq.NoiseSchedule(T=1, alpha=np.array([0.5, 0.5 - 1e-12]), kind="manual")
    k = aq.step_coeffs(1, sched)
    assert k.d == pytest.approx(1.0, abs=1e-9)
    assert k.c == pytest.approx(0.0, abs=1e-9)


def test_step_coeffs_values():
    sched = aq.NoiseSchedule(T=1, alpha=np.array([0.0625, 0.04]), kind="manual")
    k = aq.step_coeffs(1, sched)
    assert k.d == pytest.approx(1.25)
    assert k.c == pytest.approx(-1.25 * np.sqrt(0.96) + np.sqrt(0.9375))
    assert k.c == pytest.approx(-0.2565, abs=5e-5)


def test_d_exceeds_one_everywhere(default_schedule):
    for t in range(1, default_schedule.T + 1):
        assert aq.step_coeffs(t, default_schedule).d > 1.0


def test_ddim_step_zero_prediction(default_schedule):
    x = np.array([1.0, -2.0])
    out = aq.ddim_step(x, np.zeros(2), 30, default_schedule)
    assert np.allclose(out, aq.step_coeffs(30, default_schedule).d * x)


def test_ddim_step_example():
    sched = aq.NoiseSchedule(T=1, alpha=np.array([0.0625, 0.04]), kind="manual")
    out = aq.ddim_step(np.array([1.0]), np.array([1.0]), 1, sched)
    assert out[0] == pytest.approx(0.9935, abs=5e-5)


def test_ddim_step_affinity(default_schedule):
    rng = aq.Rng(21)
    x = aq.gaussian_sample(rng, [2])
    e = aq.gaussian_sample(rng, [2])
    dx = aq.gaussian_sample(rng, [2])
    de = aq.gaussian_sample(rng, [2])
    t = 17
    k = aq.step_coeffs(t, default_schedule)
    lhs = aq.ddim_step(x + dx, e + de, t, default_schedule) - aq.ddim_step(x, e, t, default_schedule)
    assert np.allclose(lhs, k.d * dx + k.c * de, rtol=1e-12, atol=1e-14)


def test_ddim_step_t0_error(default_schedule):
    with pytest.raises(ValueError, match="no step below 0"):
        aq.ddim_step(np.zeros(2), np.zeros(2), 0, default_schedule)


def test_telescoping_identity(default_schedule):
    t, k = 80, 13
    prod = 1.0
    for j in range(1, k + 1):
        prod *= aq.step_coeffs(t - j + 1, default_schedule).d
    ratio = np.sqrt(default_schedule.alpha[t - k] / default_schedule.alpha[t])
    assert prod == pytest.approx(ratio, rel=1e-12)


class ZeroModel:
    dim = 2

    def predict(self, x, t):
        return np.zeros_like(x)


def test_rollout_zero_steps(default_schedule):
    x = np.array([1.0, 2.0])
    traj = aq.rollout(ZeroModel(), x, 50, 0, default_schedule)
    assert traj.steps == [50]
    assert np.array_equal(traj.states[0], x)
    assert traj.eps_preds == []


def test_rollout_zero_model_telescopes(default_schedule):
    x = np.array([1.0, -1.0])
    t, M = 60, 7
    traj = aq.rollout(ZeroModel(), x, t, M, default_schedule)
    scale = np.sqrt(default_schedule.alpha[t - M] / default_schedule.alpha[t])
    assert np.allclose(traj.final_state, x * scale, rtol=1e-12)


def test_rollout_matches_chained_steps(linear_model, short_schedule):
    x = aq.gaussian_sample(aq.Rng(33), [2])
    traj = aq.rollout(linear_model, x, 8, 5, short_schedule)
    cur = x
    for i, t in enumerate(range(8, 3, -1)):
        eps = linear_model.predict(cur, t)
        cur = aq.ddim_step(cur, eps, t, short_schedule)
        assert np.array_equal(traj.states[i + 1], cur)
    assert traj.steps == [8, 7, 6, 5, 4, 3]


def test_rollout_too_many_steps(default_schedule):
    with pytest.raises(ValueError):
        aq.rollout(ZeroModel(), np.zeros(2), 5, 6, default_schedule)
