"""Tests for the synthetic dataset generator."""

import numpy as np
import pytest

from scrl_st.config import SynthConfig
from scrl_st.dataset import load_dataset
from scrl_st.errors import ConfigError
from scrl_st.rewards import assign_cell_types
from scrl_st.synthgen import generate


def test_noise_free_types_share_expression(make_synth):
    ds = load_dataset(make_synth(noise=0.0))
    for t in np.unique(ds.planted_types):
        rows = ds.expressions[ds.planted_types == t]
        assert (rows == rows[0]).all()


def test_planted_types_recoverable(make_synth):
    ds = load_dataset(
        make_synth(n_spots=400, n_types=2, n_genes=50, embedding_dim=16, noise=0.1)
    )
    recovered = assign_cell_types(ds.expr_embeddings, ds.reference)
    assert (recovered == ds.planted_types).mean() > 0.99


def test_features_carry_expression_signal(synth_ds):
    x = np.column_stack([synth_ds.features, np.ones(len(synth_ds))]).astype(np.float64)
    y = synth_ds.expressions.astype(np.float64)
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    assert ((x @ coef - y) ** 2).mean() < y.var(axis=0).mean()


def test_same_seed_is_byte_identical(make_synth):
    a = make_synth()
    b = make_synth()
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_different_seed_differs(make_synth):
    a = make_synth(seed=1)
    b = make_synth(seed=2)
    assert (a / "features.scrm").read_bytes() != (b / "features.scrm").read_bytes()


def test_layout(synth_ds):
    coords = synth_ds.coords()
    assert coords.min() >= 0.0 and coords.max() <= 1.0
    assert np.bincount(synth_ds.slide_ids).tolist() == [40, 40, 40, 40]
    assert (synth_ds.expressions >= 0).all()
    assert synth_ds.reference.cell_types[:4].tolist() == [0, 1, 2, 3]


def test_without_expression_embeddings(make_synth):
    ds = load_dataset(make_synth(include_expr_embeddings=False))
    assert ds.expr_embeddings is None


def test_invalid_config_rejected(tmp_path):
    with pytest.raises(ValueError):
        SynthConfig(n_types=10, n_reference_cells=5)
    bad = SynthConfig.model_construct(n_types=10, n_reference_cells=5)
    with pytest.raises(ConfigError):
        generate(bad, tmp_path)
