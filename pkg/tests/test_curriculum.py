import numpy as np
import pytest
from scipy.stats import chi2

from stemforge.curriculum import (CurriculumConfig, CurriculumState, category_of,
                                  mask_to_targets, sample_nontarget_modes,
                                  sample_task, subset_masks, task_probabilities)
from stemforge.diffusion import Mode


@pytest.fixture(scope="module")
def cfg():
    return CurriculumConfig(tracks=4, total_epochs=100)


class TestTaskProbabilities:
    def test_phase1_singletons_quarter(self, cfg):
        state = task_probabilities(cfg, 0)
        masks = subset_masks(4)
        for m, p in zip(masks, state.subset_probs):
            if bin(m).count("1") == 1:
                assert abs(p - 0.25) < 1e-12
            else:
                assert p == 0.0
        assert state.category_probs["single"] == pytest.approx(1.0)

    def test_phase3_uniform_fifteenth(self, cfg):
        state = task_probabilities(cfg, 99)
        np.testing.assert_allclose(state.subset_probs, np.full(15, 1 / 15), rtol=1e-12)

    def test_phase2_midpoint_is_arithmetic_mean(self, cfg):
        # boundaries 0.3/0.7 of 100 epochs -> midpoint epoch 50
        state = task_probabilities(cfg, 50)
        p1 = task_probabilities(cfg, 0).subset_probs
        p3 = task_probabilities(cfg, 99).subset_probs
        np.testing.assert_allclose(state.subset_probs, (p1 + p3) / 2, atol=1e-12)

    def test_sum_to_one_every_epoch(self, cfg):
        for epoch in range(cfg.total_epochs):
            state = task_probabilities(cfg, epoch)
            assert abs(state.subset_probs.sum() - 1.0) <= 1e-9
            assert np.all(state.subset_probs >= 0)
            assert abs(sum(state.category_probs.values()) - 1.0) <= 1e-9

    def test_epoch_out_of_range(self, cfg):
        with pytest.raises(ValueError):
            task_probabilities(cfg, -1)
        with pytest.raises(ValueError):
            task_probabilities(cfg, 100)

    def test_boundaries_validated(self):
        with pytest.raises(ValueError):
            CurriculumConfig(phase_boundaries=(0.7, 0.3))
        with pytest.raises(ValueError):
            CurriculumConfig(phase_boundaries=(0.0, 0.5))
        with pytest.raises(ValueError):
            CurriculumConfig(p1=1.5)


class TestSampleTask:
    def test_phase1_only_singletons(self, cfg):
        state = task_probabilities(cfg, 0)
        rng = np.random.default_rng(0)
        for _ in range(200):
            assert len(sample_task(state, rng)) == 1

    def test_phase3_chi_square_uniform(self, cfg):
        state = task_probabilities(cfg, 99)
        rng = np.random.default_rng(1)
        masks = subset_masks(4)
        index = {frozenset(mask_to_targets(m)): i for i, m in enumerate(masks)}
        counts = np.zeros(15)
        n = 100_000
        for _ in range(n):
            counts[index[sample_task(state, rng)]] += 1
        expected = n / 15
        stat = float(np.sum((counts - expected) ** 2 / expected))
        assert stat <= chi2.ppf(0.99, 14)

    def test_degenerate_distribution(self):
        probs = np.zeros(15)
        probs[6] = 1.0  # mask 7 -> {0,1,2}
        state = CurriculumState(0, probs, {"single": 0, "partial": 1, "joint": 0})
        rng = np.random.default_rng(2)
        for _ in range(50):
            assert sample_task(state, rng) == frozenset({0, 1, 2})


class TestNontargetModes:
    def test_p1_one_always_conditional(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            modes = sample_nontarget_modes(frozenset({0}), 4, 1.0, rng)
            assert set(modes) == {1, 2, 3}
            assert all(m is Mode.CONDITIONAL for m in modes.values())

    def test_p1_zero_always_marginal(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            modes = sample_nontarget_modes(frozenset({1, 2}), 4, 0.0, rng)
            assert all(m is Mode.MARGINAL for m in modes.values())

    def test_p1_binomial_band(self):
        rng = np.random.default_rng(5)
        n = 100_000
        cond = sum(
            all(m is Mode.CONDITIONAL for m in
                sample_nontarget_modes(frozenset({0}), 4, 0.8, rng).values())
            for _ in range(n))
        frac = cond / n
        assert 0.796 <= frac <= 0.804  # 3-sigma band around 0.8

    def test_modes_assigned_jointly(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            modes = sample_nontarget_modes(frozenset({3}), 4, 0.5, rng)
            vals = set(modes.values())
            assert len(vals) == 1  # never mixed

    def test_rejects_full_target_set(self):
        with pytest.raises(ValueError):
            sample_nontarget_modes(frozenset({0, 1, 2, 3}), 4, 0.5,
                                   np.random.default_rng(0))


def test_category_of():
    assert category_of(frozenset({1}), 4) == "single"
    assert category_of(frozenset({1, 2}), 4) == "partial"
    assert category_of(frozenset({0, 1, 2, 3}), 4) == "joint"
