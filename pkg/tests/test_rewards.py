"""Tests for the single-cell guided reward."""

import math
import shutil

import numpy as np
import pytest

from scrl_st.config import RewardConfig
from scrl_st.dataset import EXPR_EMBEDDINGS_FILE, SingleCellReference, load_dataset
from scrl_st.errors import DimensionError
from scrl_st.numerics import KmeansModel
from scrl_st.rewards import (
    RewardModel,
    RewardWeights,
    assign_cell_types,
    cluster_coverage_reward,
    combined_reward,
    spatial_reward,
    type_diversity_reward,
)


def _reference(embeddings, types) -> SingleCellReference:
    types = np.asarray(types)
    return SingleCellReference(
        embeddings=np.asarray(embeddings, dtype=np.float64),
        cell_types=types,
        label_names=[f"t{i}" for i in range(int(types.max()) + 1)],
    )


class TestClusterCoverage:
    def test_single_cluster_reached(self):
        km = KmeansModel(centers=np.array([[0.0, 0.0], [5, 5], [-5, 5], [5, -5]]))
        assert cluster_coverage_reward(np.zeros((3, 2)), km) == 0.25

    def test_rows_on_every_center(self):
        centers = np.array([[0.0, 0.0], [5, 5], [-5, 5]])
        assert cluster_coverage_reward(centers, KmeansModel(centers=centers)) == 1.0

    def test_hand_evaluated(self):
        km = KmeansModel(centers=np.array([[0.0, 0.0], [10, 10], [-10, -10]]))
        z = np.array([[0.0, 0.0], [0, 0], [9, 9]])
        assert cluster_coverage_reward(z, km) == pytest.approx(2 / 3)

    def test_width_mismatch(self):
        km = KmeansModel(centers=np.zeros((2, 3)))
        with pytest.raises(DimensionError):
            cluster_coverage_reward(np.zeros((1, 2)), km)


class TestAssignCellTypes:
    def test_exact_match(self):
        ref = _reference([[1, 0], [0, 1], [1, 1]], [0, 1, 2])
        assert assign_cell_types([[0, 3]], ref).tolist() == [1]

    def test_opposite_vectors(self):
        q = np.array([0.6, 0.8])
        ref = _reference([q, -q], [0, 1])
        assert assign_cell_types([-q], ref).tolist() == [1]

    def test_agrees_with_brute_force(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(3, 4))
        ref = _reference(q, [2, 0, 1])
        queries = rng.normal(size=(20, 4))
        expected = []
        for z in queries:
            sims = [z @ qj / (np.linalg.norm(z) * np.linalg.norm(qj)) for qj in q]
            expected.append([2, 0, 1][int(np.argmax(sims))])
        assert assign_cell_types(queries, ref).tolist() == expected

    def test_ties_go_to_lowest_index(self):
        ref = _reference([[1, 0], [2, 0]], [1, 0])
        assert assign_cell_types([[3, 0]], ref).tolist() == [1]

    def test_width_mismatch(self):
        ref = _reference([[1, 0]], [0])
        with pytest.raises(DimensionError):
            assign_cell_types([[1, 0, 0]], ref)


class TestTypeDiversity:
    def test_single_type(self):
        assert type_diversity_reward(["A", "A", "A"]) == 0.0

    def test_uniform(self):
        assert type_diversity_reward(["A", "B", "C", "D"]) == pytest.approx(1.0, abs=1e-6)

    def test_skewed(self):
        assert type_diversity_reward(["A", "A", "A", "B"]) == pytest.approx(0.8113, abs=1e-3)


class TestSpatialReward:
    def test_single_point_at_centroid(self):
        all_pts = np.array([[0.0, 0.5], [1.0, 0.5], [0.5, 0.0], [0.5, 1.0], [0.5, 0.5]])
        centre = np.array([[0.5, 0.5]])
        expected = np.linalg.norm(all_pts - centre, axis=1).mean() / 2
        assert spatial_reward(all_pts, centre) == pytest.approx(expected)

    def test_full_sample_verbatim(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0]])
        assert spatial_reward(pts, pts) == pytest.approx(0.25)

    def test_full_sample_corrected(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0]])
        assert spatial_reward(pts, pts, mode="corrected") == pytest.approx(
            (0.5 + math.sqrt(2)) / 2
        )

    def test_corrected_prefers_coverage(self):
        pts = np.array([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]])
        full = spatial_reward(pts, pts, mode="corrected")
        part = spatial_reward(pts, pts[:1], mode="corrected")
        assert full > part

    def test_empty_sample(self):
        with pytest.raises(ValueError):
            spatial_reward([[0.0, 0.0]], np.zeros((0, 2)))

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown spatial reward mode"):
            spatial_reward([[0.0, 0.0]], [[0.0, 0.0]], mode="fancy")


class TestCombinedReward:
    def test_default_weights(self):
        result = combined_reward(0.5, 1.0, 0.2, RewardWeights())
        assert result.combined == pytest.approx(15.01)

    def test_zero_weights(self):
        zero = RewardWeights(w_sc=0, w_type=0, w_spa=0)
        assert combined_reward(0.9, 0.4, 3.0, zero).combined == 0.0

    def test_projection(self):
        only_sc = RewardWeights(w_sc=1, w_type=0, w_spa=0)
        assert combined_reward(0.37, 0.9, 0.8, only_sc).combined == pytest.approx(0.37)

    @pytest.mark.parametrize(
        ("preset", "expected"),
        [
            ("full", (20.0, 5.0, 0.05)),
            ("biological", (20.0, 5.0, 0.0)),
            ("spatial", (0.0, 0.0, 0.05)),
        ],
    )
    def test_presets(self, preset, expected):
        w = RewardWeights.from_config(RewardConfig(preset=preset))
        assert (w.w_sc, w.w_type, w.w_spa) == expected

    def test_explicit_weight_overrides_preset(self):
        w = RewardWeights.from_config(RewardConfig(preset="spatial", w_sc=2.0))
        assert (w.w_sc, w.w_type, w.w_spa) == (2.0, 0.0, 0.05)


class TestRewardModel:
    def test_components_are_bounded(self, synth_ds):
        model = RewardModel.from_dataset(synth_ds, RewardConfig(n_clusters=10))
        result = model.score_ids(synth_ds, synth_ds.spot_ids[:40])

        assert 0.0 < result.r_sc <= 1.0
        assert 0.0 <= result.r_type <= 1.0
        assert result.r_spa > 0.0
        assert result.combined == pytest.approx(
            20 * result.r_sc + 5 * result.r_type + 0.05 * result.r_spa, abs=1e-9
        )
        assert synth_ds.revealed == frozenset()

    def test_cluster_count_clamped_to_reference(self, synth_ds):
        model = RewardModel.from_dataset(synth_ds, RewardConfig(n_clusters=10_000, pca_dim=100))
        assert model.kmeans.n_clusters == synth_ds.reference.n_cells
        assert model.pca.r == synth_ds.reference.embeddings.shape[1]

    def test_full_pool_reaches_every_cluster_with_reference_rows(self, synth_ds):
        model = RewardModel.from_dataset(synth_ds, RewardConfig(n_clusters=8))
        ref = np.asarray(synth_ds.reference.embeddings)
        coords = synth_ds.coords()[:1]
        assert model.score(ref, coords).r_sc == 1.0

    def test_missing_embeddings_fall_back_to_expression(self, synth_dir, tmp_path):
        data = shutil.copytree(synth_dir, tmp_path / "data")
        (data / EXPR_EMBEDDINGS_FILE).unlink()
        ds = load_dataset(data)

        model = RewardModel.from_dataset(ds, RewardConfig(n_clusters=8))
        assert model.use_fallback
        batch = ds.reveal([0, 1])
        np.testing.assert_array_equal(model.embed(batch), ds.expressions[[0, 1], :6])
        assert np.isfinite(model.score_ids(ds, [0, 1, 2]).combined)

    def test_deterministic(self, synth_ds):
        cfg = RewardConfig(n_clusters=12)
        a = RewardModel.from_dataset(synth_ds, cfg).score_ids(synth_ds, range(0, 160, 7))
        b = RewardModel.from_dataset(synth_ds, cfg).score_ids(synth_ds, range(0, 160, 7))
        assert a == b
