"""Tests for the retrieval-augmented predictor and its checkpoints."""

import json

import numpy as np
import pytest

from scrl_st.config import TrainConfig
from scrl_st.errors import DimensionError, FormatError, StateError
from scrl_st.layers import Mlp
from scrl_st.predictor import (
    MANIFEST_FILE,
    PredictorModel,
    PredictorTrainer,
    load_checkpoint,
    predict,
    regress,
    save_checkpoint,
    train,
)

POOL = list(range(0, 160, 4))


class TestRegress:
    def test_zero_network(self):
        np.testing.assert_array_equal(regress(Mlp.zeros(3, 4, 2), [1.0, 2.0, 3.0]), [0.0, 0.0])

    def test_hand_evaluated(self):
        net = Mlp(w1=np.array([[1.0]]), b1=np.zeros(1), w2=np.array([[2.0]]), b2=np.zeros(1))
        np.testing.assert_array_equal(regress(net, [3.0]), [6.0])

    def test_batch_equals_rows(self):
        net = Mlp.init(4, 6, 3, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(5, 4))
        stacked = np.vstack([regress(net, row) for row in x])
        np.testing.assert_allclose(regress(net, x), stacked, atol=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            regress(Mlp.zeros(3, 4, 2), [1.0, 2.0])

    def test_predict_requires_training(self):
        with pytest.raises(StateError):
            predict(PredictorModel(regressor=Mlp.zeros(3, 4, 2)), [[1.0, 2.0, 3.0]])


class TestTraining:
    def test_trains_on_pool(self, synth_ds, fast_train):
        model = train(synth_ds, POOL, fast_train)

        assert model.trained
        assert len(model.history) == fast_train.epochs
        assert len(model.bank) == len(POOL)
        assert model.img_head.out_dim == model.expr_head.out_dim == fast_train.proj_dim
        assert synth_ds.revealed == frozenset(POOL)
        assert predict(model, synth_ds.features[:3]).shape == (3, synth_ds.gene_count)
        assert all(np.isfinite(entry.total) for entry in model.history)

    def test_zero_learning_rate_keeps_parameters(self, synth_ds, fast_train):
        cfg = fast_train.model_copy(update={"lr0": 0.0, "lr_min": 0.0, "weight_decay": 0.0})
        trainer = PredictorTrainer(synth_ds, cfg)
        before = {name: net.copy() for name, net in trainer.model.networks().items()}
        trainer.fit(POOL)
        for name, net in trainer.model.networks().items():
            for param, value in net.params().items():
                if (name, param) != ("regressor", "b2"):
                    np.testing.assert_array_equal(value, before[name].params()[param])

    def test_starts_from_pool_mean(self, synth_ds, fast_train):
        cfg = fast_train.model_copy(update={"lr0": 0.0, "lr_min": 0.0, "weight_decay": 0.0})
        model = train(synth_ds, POOL, cfg)
        pool_mean = synth_ds.expressions[synth_ds.index_of(POOL)].mean(axis=0)
        np.testing.assert_allclose(model.regressor.b2, pool_mean)
        np.testing.assert_allclose(predict(model, synth_ds.features), np.tile(pool_mean, (160, 1)), rtol=1e-6)

    def test_beats_the_training_mean(self, synth_ds):
        train_ids = list(range(0, 160, 2))
        test_ids = list(range(1, 160, 2))
        model = train(synth_ds, train_ids, TrainConfig())
        truth = synth_ds.ground_truth(test_ids)
        baseline = np.mean((truth - synth_ds.expressions[synth_ds.index_of(train_ids)].mean(axis=0)) ** 2)
        mse = np.mean((truth - predict(model, synth_ds.features[synth_ds.index_of(test_ids)])) ** 2)
        assert mse < baseline

    def test_loss_moving_average_does_not_increase(self, synth_ds):
        model = train(synth_ds, list(range(0, 160, 2)), TrainConfig(epochs=50))
        totals = np.array([entry.total for entry in model.history])
        moving = np.convolve(totals, np.ones(10) / 10, mode="valid")
        assert np.all(np.diff(moving) <= 1e-3 * moving[0])

    def test_zero_distillation_matches_no_retrieval(self, synth_dir, fast_train):
        from scrl_st.dataset import load_dataset

        gated = train(load_dataset(synth_dir), POOL, fast_train.model_copy(update={"lambda_kd": 0.0}))
        plain = train(
            load_dataset(synth_dir), POOL, fast_train.model_copy(update={"use_retrieval": False})
        )
        for param, value in gated.regressor.params().items():
            assert value.tobytes() == plain.regressor.params()[param].tobytes()
        assert plain.img_head is None and plain.bank is None
        assert all(entry.contrastive is None for entry in plain.history)

    def test_fit_continues_schedule(self, synth_ds, fast_train):
        trainer = PredictorTrainer(synth_ds, fast_train, total_epochs=4)
        trainer.fit(POOL[:20], epochs=2)
        trainer.fit(POOL, epochs=2)
        history = trainer.model.history
        assert [entry.epoch for entry in history] == [0, 1, 2, 3]
        assert history[0].lr == pytest.approx(fast_train.lr0)
        assert history[-1].lr == pytest.approx(fast_train.lr_min)
        assert len(trainer.model.bank) == len(POOL)

    def test_same_seed_same_model(self, synth_dir, fast_train):
        from scrl_st.dataset import load_dataset

        a = train(load_dataset(synth_dir), POOL, fast_train)
        b = train(load_dataset(synth_dir), POOL, fast_train)
        np.testing.assert_array_equal(a.regressor.w1, b.regressor.w1)

    def test_empty_pool(self, synth_ds, fast_train):
        with pytest.raises(StateError):
            train(synth_ds, [], fast_train)

    def test_tiny_pool_clips_retrieval(self, synth_ds):
        cfg = TrainConfig(epochs=1, hidden=8, proj_dim=4, top_k=50, top_t=10)
        model = train(synth_ds, [0, 1, 2], cfg)
        assert model.trained and len(model.bank) == 3


class TestCheckpoint:
    def test_round_trip(self, synth_ds, fast_train, tmp_path):
        model = train(synth_ds, POOL, fast_train)
        save_checkpoint(model, tmp_path / "ckpt", fast_train, "abc123")

        loaded, manifest = load_checkpoint(tmp_path / "ckpt")
        assert manifest["config_hash"] == "abc123"
        assert manifest["epochs"] == fast_train.epochs
        assert manifest["hyperparameters"]["top_k"] == fast_train.top_k
        assert sorted(loaded.networks()) == ["expr_head", "img_head", "regressor"]
        for name, net in model.networks().items():
            for param, value in net.params().items():
                np.testing.assert_array_equal(
                    loaded.networks()[name].params()[param],
                    value.astype(np.float32).astype(np.float64),
                )
        assert (tmp_path / "ckpt" / "regressor.b1.scrm").exists()

    def test_reloaded_checkpoint_predicts_identically(self, synth_ds, fast_train, tmp_path):
        model = train(synth_ds, POOL, fast_train)
        save_checkpoint(model, tmp_path / "ckpt", fast_train, "abc123")
        loaded, manifest = load_checkpoint(tmp_path / "ckpt")

        assert manifest["dtype"] == "float32"
        in_memory = predict(model, synth_ds.features)
        assert in_memory.tobytes() == predict(loaded, synth_ds.features).tobytes()

    def test_untrained_model(self, fast_train, tmp_path):
        with pytest.raises(StateError):
            save_checkpoint(PredictorModel(regressor=Mlp.zeros(2, 2, 2)), tmp_path, fast_train, "x")

    def test_manifest_disagrees_with_matrices(self, synth_ds, fast_train, tmp_path):
        cfg = fast_train.model_copy(update={"use_retrieval": False})
        save_checkpoint(train(synth_ds, POOL, cfg), tmp_path, cfg, "x")
        manifest = json.loads((tmp_path / MANIFEST_FILE).read_text())
        manifest["shapes"]["regressor"]["w1"] = [3, 3]
        (tmp_path / MANIFEST_FILE).write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path)
