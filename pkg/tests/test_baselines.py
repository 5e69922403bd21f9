"""Tests for the random, uncertainty and diversity samplers."""

import numpy as np
import pytest

from scrl_st.baselines import (
    diversity_groups,
    diversity_sampler,
    mc_dropout_scores,
    min_cluster_count,
    output_variance,
    random_sampler,
    uncertainty_pool,
    uncertainty_sampler,
)
from scrl_st.config import BaselineConfig
from scrl_st.errors import BudgetError, StateError
from scrl_st.layers import Mlp
from scrl_st.predictor import PredictorModel, train


class TestRandomSampler:
    def test_full_budget(self):
        assert random_sampler(range(10, 20), 10) == list(range(10, 20))

    def test_same_seed_same_set(self):
        assert random_sampler(range(50), 7, seed=3) == random_sampler(range(50), 7, seed=3)

    def test_budget_too_large(self):
        with pytest.raises(BudgetError):
            random_sampler(range(5), 6)

    def test_uniform_inclusion(self):
        counts = np.zeros(10)
        seeds = 10_000
        for seed in range(seeds):
            picked = random_sampler(range(10), 3, seed=seed)
            assert len(set(picked)) == 3
            counts[picked] += 1
        assert np.abs(counts / seeds - 0.3).max() < 0.015


class TestUncertainty:
    def test_output_variance_by_mask_enumeration(self):
        net = Mlp(w1=np.eye(2), b1=np.zeros(2), w2=np.ones((1, 2)), b2=np.zeros(1))
        masks = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
        # Outputs 0, 2, 4, 6 around mean 3.
        assert output_variance(net, [1.0, 2.0], masks) == pytest.approx(5.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_identical_passes_have_exactly_zero_variance(self, seed):
        rng = np.random.default_rng(seed)
        net = Mlp.init(6, 16, 5, rng)
        assert output_variance(net, rng.normal(size=6), np.ones((20, 6))) == 0.0

    def test_scores_do_not_depend_on_candidate_order(self):
        rng = np.random.default_rng(0)
        net = Mlp.init(4, 8, 3, rng)
        feats = rng.normal(size=(6, 4))
        ids = np.arange(100, 106)
        forward = mc_dropout_scores(net, feats, ids, 0.3, 10, seed=5)
        perm = np.array([3, 5, 0, 1, 4, 2])
        shuffled = mc_dropout_scores(net, feats[perm], ids[perm], 0.3, 10, seed=5)
        np.testing.assert_array_equal(shuffled, forward[perm])
        assert (forward > 0).all()

    @pytest.mark.parametrize("cfg", [BaselineConfig(dropout_rate=0.0), BaselineConfig(passes=1)])
    def test_no_variance_selects_lowest_ids(self, synth_ds, fast_train, cfg):
        model = train(synth_ds, range(20), fast_train)
        ids = synth_ds.spot_ids[40:][::-1]
        rows = synth_ds.index_of(ids)
        picked = uncertainty_sampler(model, synth_ds.features[rows], ids, 5, cfg)
        assert picked == [40, 41, 42, 43, 44]

    def test_untrained_model(self):
        model = PredictorModel(regressor=Mlp.zeros(2, 2, 2))
        with pytest.raises(StateError):
            uncertainty_sampler(model, np.zeros((3, 2)), [0, 1, 2], 1, BaselineConfig())

    def test_pool_contains_warm_start(self, synth_ds, fast_train):
        cfg = BaselineConfig(warm_start_ratio=0.05)
        pool = uncertainty_pool(synth_ds, 24, cfg, fast_train)
        warm = random_sampler(synth_ds.spot_ids, 8, seed=cfg.seed)

        assert len(pool) == 24 == len(set(pool))
        assert set(warm) <= set(pool)
        assert pool == sorted(pool)


class TestDiversity:
    def test_min_cluster_count(self):
        assert min_cluster_count(2500) == 10
        assert min_cluster_count(1) == 1

    def test_identical_features(self):
        feats = np.ones((30, 4))
        picked = diversity_sampler(feats, np.arange(30), 6, BaselineConfig())
        assert len(picked) == 6 == len(set(picked))

    def test_two_blobs_split_the_budget(self):
        feats = np.vstack([np.zeros((10, 3)), np.full((10, 3), 5.0)])
        ids = np.arange(200, 220)
        for seed in range(5):
            picked = diversity_sampler(feats, ids, 2, BaselineConfig(), seed=seed)
            assert sum(i < 210 for i in picked) == 1

    def test_groups_partition_rows(self, synth_ds):
        groups = diversity_groups(synth_ds.features, BaselineConfig())
        rows = np.sort(np.concatenate(groups))
        np.testing.assert_array_equal(rows, np.arange(len(synth_ds)))
        assert len(groups) >= min_cluster_count(len(synth_ds))

    def test_budget_too_large(self):
        with pytest.raises(BudgetError):
            diversity_sampler(np.zeros((3, 2)), [0, 1, 2], 4, BaselineConfig())
