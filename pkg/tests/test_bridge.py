import numpy as np
import pytest

from refbridge import bridge


def test_boundary_values_are_exact():
    assert bridge.coefficients(0.0) == (1.0, 0.0, 0.0)
    a, b, s = bridge.coefficients(0.2)
    assert (float(a), float(b), float(s)) == (0.0, 0.8, 0.2)


def test_midpoint_values():
    np.testing.assert_allclose(bridge.coefficients(0.1), (0.45, 0.45, 0.1), atol=1e-15)


def test_coefficients_and_rates_sum_to_one_and_zero():
    t = np.random.default_rng(0).uniform(0, 0.2, 1000)
    a, b, s = bridge.coefficients(t)
    da, db, ds = bridge.coefficient_derivatives(t)
    assert np.max(np.abs(a + b + s - 1)) < 1e-12
    assert np.max(np.abs(da + db + ds)) < 1e-12


def test_derivatives_match_finite_differences():
    t = np.linspace(0.01, 0.19, 37)
    h = 1e-6
    hi = np.array(bridge.coefficients(t + h))
    lo = np.array(bridge.coefficients(t - h))
    np.testing.assert_allclose((hi - lo) / (2 * h), np.array(bridge.coefficient_derivatives(t)), atol=1e-8)


@pytest.mark.parametrize("t", [-0.01, 0.21, 1.0])
def test_out_of_window_time_is_rejected(t):
    with pytest.raises(bridge.ScheduleError):
        bridge.coefficients(t)


def test_velocity_target_is_time_derivative_of_the_state():
    rng = np.random.default_rng(1)
    for _ in range(100):
        t = rng.uniform(1e-3, 0.2 - 1e-3)
        zh, zl, eps = rng.standard_normal(3)
        h = 1e-6
        fd = (bridge.forward_sample(zh, zl, t + h, eps).z_t - bridge.forward_sample(zh, zl, t - h, eps).z_t) / (2 * h)
        assert abs(bridge.forward_sample(zh, zl, t, eps).target_velocity - fd) < 1e-5


def test_forward_sample_endpoints():
    rng = np.random.default_rng(2)
    zh, zl, eps = rng.standard_normal((3, 4, 2, 2))
    np.testing.assert_array_equal(bridge.forward_sample(zh, zl, 0.0, eps).z_t, zh)
    np.testing.assert_allclose(bridge.forward_sample(zh, zl, 0.2, eps).z_t, 0.8 * zl + 0.2 * eps, atol=1e-12)


def test_per_sample_times_broadcast():
    rng = np.random.default_rng(3)
    zh, zl, eps = rng.standard_normal((3, 3, 2, 4, 4))
    t = np.array([0.0, 0.1, 0.2])
    batch = bridge.forward_sample(zh, zl, t, eps)
    for i in range(3):
        single = bridge.forward_sample(zh[i], zl[i], t[i], eps[i])
        np.testing.assert_allclose(batch.z_t[i], single.z_t, atol=1e-12)
        np.testing.assert_allclose(batch.target_velocity[i], single.target_velocity, atol=1e-12)


def test_draw_sample_is_seeded():
    zh = np.zeros((5, 3, 2, 2), np.float32)
    a = bridge.draw_sample(zh, zh, 9)
    b = bridge.draw_sample(zh, zh, 9)
    np.testing.assert_array_equal(a.z_t, b.z_t)
    assert a.t.shape == (5,) and np.all((a.t >= 0) & (a.t <= 0.2))


def test_loss_of_the_oracle_velocity_is_zero():
    rng = np.random.default_rng(4)
    zh, zl = rng.standard_normal((2, 4, 3, 2, 2))
    target = bridge.draw_sample(zh, zl, 11).target_velocity
    loss = bridge.bridge_loss(lambda z, t: target, zh, zl, 11)
    assert float(loss.data) == 0.0


def test_sampler_starts_from_the_biased_mixture():
    zl = np.ones((2, 2))
    eps = np.full((2, 2), 3.0)
    np.testing.assert_allclose(bridge.start_state(zl, eps), 0.8 + 0.6)
    # a zero velocity leaves the start state untouched
    np.testing.assert_allclose(bridge.sample(lambda z, t: np.zeros_like(z), zl, eps=eps), 1.4)


def test_sampler_is_exact_for_constant_velocity():
    zl = np.random.default_rng(5).standard_normal((3, 4))
    eps = np.zeros_like(zl)
    v = np.random.default_rng(6).standard_normal((3, 4))
    for steps in (1, 3, 6, 50):
        out = bridge.sample(lambda z, t: v, zl, steps=steps, eps=eps)
        np.testing.assert_allclose(out, 0.8 * zl - 0.2 * v, rtol=0, atol=1e-14)


def _end_state_error(steps, zh, zl, eps):
    def true_field(z, t):
        return bridge.forward_sample(zh, zl, t, eps).target_velocity

    return np.max(np.abs(bridge.sample(true_field, zl, steps=steps, eps=eps) - zh))


def test_halving_the_step_halves_the_error():
    rng = np.random.default_rng(7)
    zh, zl, eps = rng.standard_normal((3, 16))
    for steps in (6, 12, 24):
        ratio = _end_state_error(steps, zh, zl, eps) / _end_state_error(2 * steps, zh, zl, eps)
        assert 1.7 <= ratio <= 2.3


def test_state_dependent_affine_field_is_first_order():
    # dz/dt = k (z - c) integrated backwards from z(0.2) = z0
    k, c, z0 = 3.0, 0.5, 2.0
    exact = c + (z0 - c) * np.exp(-k * 0.2)
    errs = []
    for steps in (8, 16, 32):
        out = bridge.sample(lambda z, t: k * (z - c), np.array([z0 / 0.8]), steps=steps, eps=np.zeros(1))
        errs.append(abs(out[0] - exact))
    assert 1.7 <= errs[0] / errs[1] <= 2.3 and 1.7 <= errs[1] / errs[2] <= 2.3


def test_default_step_count_is_six():
    seen = []
    bridge.sample(lambda z, t: seen.append(t) or np.zeros_like(z), np.zeros(2), eps=np.zeros(2))
    assert bridge.DEFAULT_STEPS == 6 and len(seen) == 6
    np.testing.assert_allclose(seen, [0.2 - k * 0.2 / 6 for k in range(6)])


def test_divergence_names_the_step():
    calls = []

    def blowup(z, t):
        calls.append(t)
        return np.full_like(z, np.inf) if len(calls) == 3 else np.zeros_like(z)

    with pytest.raises(bridge.DivergenceError, match="step 3"):
        bridge.sample(blowup, np.zeros(2), eps=np.zeros(2))
