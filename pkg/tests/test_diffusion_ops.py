import numpy as np
import pytest

from stemforge.diffusion import (Mode, TaskSpec, TimestepVector, assemble_input,
                                 assemble_input_batch, build_schedule, cfg_combine,
                                 conditional_task, forward_diffuse, joint_task,
                                 posterior_mean, timestep_vector)


@pytest.fixture(scope="module")
def sched4():
    return build_schedule("linear", 4, 0.1, 0.4)


class TestForwardDiffuse:
    def test_hand_value(self):
        # abar_t = 0.25 at t=3 of this schedule: betas 0.5,0.5,... -> craft directly
        s = build_schedule("linear", 2, 0.5, 0.5)  # abar_2 = 0.25
        out = forward_diffuse(np.array(2.0), 2, np.array(1.0), s)
        assert abs(out - (0.5 * 2.0 + np.sqrt(0.75) * 1.0)) < 1e-12
        assert abs(out - 1.8660254037844386) < 1e-9

    def test_zero_noise(self, sched4):
        z0 = np.arange(6.0).reshape(2, 3)
        for t in range(1, 5):
            out = forward_diffuse(z0, t, np.zeros_like(z0), sched4)
            np.testing.assert_array_equal(out, np.sqrt(sched4.alpha_bars[t - 1]) * z0)

    def test_high_noise_limit(self):
        s = build_schedule("linear", 400, 0.02, 0.5)
        z0 = np.full(16, 3.0)
        eps = np.linspace(-1, 1, 16)
        out = forward_diffuse(z0, 400, eps, s)
        bound = np.sqrt(s.alpha_bars[-1]) * np.linalg.norm(z0)
        assert np.linalg.norm(out - np.sqrt(1 - s.alpha_bars[-1]) * eps) <= bound + 1e-12
        assert np.linalg.norm(out - eps) <= bound + np.linalg.norm(
            (1 - np.sqrt(1 - s.alpha_bars[-1])) * eps) + 1e-12

    def test_shape_mismatch(self, sched4):
        with pytest.raises(ValueError):
            forward_diffuse(np.zeros(3), 1, np.zeros(4), sched4)

    def test_t_out_of_range(self, sched4):
        for t in (0, 5):
            with pytest.raises(ValueError):
                forward_diffuse(np.zeros(3), t, np.zeros(3), sched4)

    def test_batched_timesteps(self, sched4):
        z0 = np.ones((3, 2))
        eps = np.zeros((3, 2))
        out = forward_diffuse(z0, np.array([1, 2, 4]), eps, sched4)
        np.testing.assert_allclose(out[:, 0], np.sqrt(sched4.alpha_bars[[0, 1, 3]]))

    def test_marginal_statistics(self):
        # sample mean ~ sqrt(abar)*c, sample var ~ 1-abar over 1e5 draws
        s = build_schedule("linear", 100, 1e-4, 0.02)
        rng = np.random.default_rng(7)
        c = 0.8
        n = 100_000
        for t in (1, 50, 100):
            eps = rng.standard_normal(n)
            out = forward_diffuse(np.full(n, c), t, eps, s)
            ab = s.alpha_bars[t - 1]
            assert abs(out.mean() - np.sqrt(ab) * c) < 0.02
            assert abs(out.var() - (1 - ab)) < 0.02


class TestPosteriorMean:
    def test_hand_value(self):
        # alpha=0.9, beta=0.1, abar=0.9 (single step), z_t=1.0, eps_hat=0.5
        s = build_schedule("linear", 1, 0.1, 0.1)
        out = posterior_mean(np.array(1.0), np.array(0.5), 1, s)
        expected = (1.0 - 0.1 / np.sqrt(0.1) * 0.5) / np.sqrt(0.9)
        np.testing.assert_allclose(out, expected, rtol=1e-12)
        assert abs(out - 0.8874259) < 1e-6

    def test_zero_prediction(self, sched4):
        z = np.linspace(-1, 1, 5)
        for t in range(1, 5):
            out = posterior_mean(z, np.zeros_like(z), t, sched4)
            np.testing.assert_allclose(out, z / np.sqrt(sched4.alphas[t - 1]), rtol=1e-15)

    def test_matches_exact_posterior_of_round_trip(self):
        # with the true eps, eq-form mean == closed-form q(z_{t-1}|z_t, z0) mean
        s = build_schedule("linear", 10, 0.01, 0.3)
        rng = np.random.default_rng(3)
        z0 = rng.standard_normal(8)
        for t in range(2, 11):
            eps = rng.standard_normal(8)
            zt = forward_diffuse(z0, t, eps, s)
            got = posterior_mean(zt, eps, t, s)
            ab, ab_prev = s.alpha_bars[t - 1], s.alpha_bars[t - 2]
            beta, alpha = s.betas[t - 1], s.alphas[t - 1]
            exact = (np.sqrt(ab_prev) * beta * z0 + np.sqrt(alpha) * (1 - ab_prev) * zt) / (1 - ab)
            np.testing.assert_allclose(got, exact, atol=1e-12)

    def test_rejects_nonfinite(self, sched4):
        with pytest.raises(ValueError):
            posterior_mean(np.array([np.nan]), np.array([0.0]), 1, sched4)


class TestAssembleInput:
    def test_three_cases(self, sched4):
        rng = np.random.default_rng(0)
        clean = rng.standard_normal((4, 3, 6))
        noise = rng.standard_normal((4, 3, 6))
        T = sched4.num_steps
        t = 2
        tvec = TimestepVector(np.array([T, 0, t, T]))
        out = assemble_input(clean, tvec, noise, sched4)
        np.testing.assert_array_equal(out[0], noise[0])
        np.testing.assert_array_equal(out[3], noise[3])
        np.testing.assert_array_equal(out[1], clean[1])
        np.testing.assert_allclose(
            out[2], forward_diffuse(clean[2], t, noise[2], sched4), rtol=1e-15)

    def test_all_clean_bit_identical(self, sched4):
        rng = np.random.default_rng(1)
        clean = rng.standard_normal((4, 2, 4))
        noise = rng.standard_normal((4, 2, 4))
        out = assemble_input(clean, TimestepVector(np.zeros(4, dtype=int)), noise, sched4)
        assert np.array_equal(out, clean)

    def test_all_noise_bit_identical(self, sched4):
        rng = np.random.default_rng(2)
        clean = rng.standard_normal((4, 2, 4))
        noise = rng.standard_normal((4, 2, 4))
        tvec = TimestepVector(np.full(4, sched4.num_steps))
        out = assemble_input(clean, tvec, noise, sched4)
        assert np.array_equal(out, noise)

    def test_idempotent_on_frozen_entries(self, sched4):
        rng = np.random.default_rng(3)
        clean = rng.standard_normal((3, 2, 4))
        noise = rng.standard_normal((3, 2, 4))
        tvec = TimestepVector(np.array([0, sched4.num_steps, 0]))
        once = assemble_input(clean, tvec, noise, sched4)
        twice = assemble_input(once, tvec, noise, sched4)
        assert np.array_equal(once, twice)

    def test_batched(self, sched4):
        rng = np.random.default_rng(4)
        clean = rng.standard_normal((2, 3, 2, 4))
        noise = rng.standard_normal((2, 3, 2, 4))
        ts = np.array([[0, 4, 2], [1, 0, 4]])
        out = assemble_input_batch(clean, ts, noise, sched4)
        np.testing.assert_array_equal(out[0, 0], clean[0, 0])
        np.testing.assert_array_equal(out[0, 1], noise[0, 1])
        np.testing.assert_array_equal(out[1, 2], noise[1, 2])

    def test_invalid_tvec(self, sched4):
        clean = np.zeros((2, 2, 2))
        with pytest.raises(ValueError):
            assemble_input(clean, TimestepVector(np.array([0, 9])), clean, sched4)


class TestCfgCombine:
    def test_identity_cases(self):
        rng = np.random.default_rng(5)
        m = rng.standard_normal((3, 4))
        c = rng.standard_normal((3, 4))
        assert np.array_equal(cfg_combine(m, c, 1.0), c)
        assert np.array_equal(cfg_combine(m, c, 0.0), m)

    def test_lambda_seven(self):
        assert cfg_combine(np.array(0.0), np.array(1.0), 7.0) == 7.0

    def test_affine_in_lambda(self):
        rng = np.random.default_rng(6)
        m = rng.standard_normal(10)
        c = rng.standard_normal(10)
        for lam in (0.0, 0.5, 1.0, 7.0):
            np.testing.assert_allclose(
                cfg_combine(m, c, lam), m + lam * (c - m), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cfg_combine(np.zeros(3), np.zeros(4), 1.0)


class TestTaskAndTimestepVector:
    def test_task_partition_enforced(self):
        with pytest.raises(ValueError):
            TaskSpec(frozenset(), {0: Mode.CONDITIONAL})
        with pytest.raises(ValueError):
            TaskSpec(frozenset({0}), {0: Mode.CONDITIONAL})
        with pytest.raises(ValueError):
            TaskSpec(frozenset({0, 2}), {3: Mode.MARGINAL})  # gap at 1

    def test_helpers(self):
        t = conditional_task([1], 3)
        assert t.conditional_tracks() == [0, 2]
        assert joint_task(2).is_joint

    def test_vector_construction_and_validation(self):
        task = TaskSpec(frozenset({0, 2}), {1: Mode.CONDITIONAL, 3: Mode.MARGINAL})
        tv = timestep_vector(task, 5, 10)
        assert tv.steps.tolist() == [5, 0, 5, 10]
        with pytest.raises(ValueError):
            TimestepVector(np.array([5, 1, 5, 10])).validate(task, 10)
        with pytest.raises(ValueError):
            TimestepVector(np.array([5, 0, 6, 10])).validate(task, 10)
