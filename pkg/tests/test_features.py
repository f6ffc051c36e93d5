import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sep_pipeline.dataset import IMAGE_TYPES, ImageType
from sep_pipeline.errors import ValidationError
from sep_pipeline.extractor.training import FeatureVector
from sep_pipeline.tabular.features import (
    COMPLETE, F_CAP, OUTDOOR, SATELLITE, FeatureStore, PredictorSet, assemble_feature_table, f_statistics,
    fstat_select, mean_imputer_fit, mean_imputer_transform, read_feature_csv, write_feature_csv,
    write_outcome_csv,
)


def store(n=6, D=30, seed=0, missing=()):
    rng = np.random.default_rng(seed)
    ids = tuple(f"h{k}" for k in range(n))
    blocks = {t: rng.normal(size=(n, D)) for t in IMAGE_TYPES}
    for h, t in missing:
        blocks[t][ids.index(h)] = np.nan
    return FeatureStore(ids, blocks)


def test_widths():
    assert COMPLETE.width(30) == 390
    assert SATELLITE.width(30) == 60
    assert OUTDOOR.width(30) == 150
    assert len(PredictorSet.reduced("light_source").types) == 6
    with pytest.raises(ValidationError):
        PredictorSet.reduced("wall")
    with pytest.raises(ValidationError):
        PredictorSet.named("nope")


def test_assemble_complete_and_mask():
    s = store(missing=[("h2", ImageType.LIGHT_SOURCE)])
    y = {h: float(k) for k, h in enumerate(s.ids)}
    table = assemble_feature_table(s, COMPLETE, y)
    assert table.n_features == 390
    assert table.mask[2].sum() == 30 and table.mask.sum() == 30
    assert table.column_names()[0] == "satellite_25m_0"
    assert table.column_names()[-1] == "water_source_29"
    sub = table.rows(["h3", "h1"])
    assert sub.ids == ("h3", "h1") and sub.y.tolist() == [3.0, 1.0]


def test_assemble_errors():
    s = store(missing=[("h0", t) for t in SATELLITE.types])
    with pytest.raises(ValidationError, match="h0"):
        assemble_feature_table(s, SATELLITE, {h: 0.0 for h in s.ids})
    with pytest.raises(ValidationError, match="outcome"):
        assemble_feature_table(store(), SATELLITE, {"h0": 1.0})


def test_store_from_vectors():
    vecs = [FeatureVector("h0", ImageType.ROOF, np.arange(3.0)), FeatureVector("h1", ImageType.ROOF, None, True)]
    s = FeatureStore.from_vectors(vecs, ["h0", "h1"], 3)
    assert s.blocks[ImageType.ROOF][0].tolist() == [0, 1, 2]
    assert np.isnan(s.blocks[ImageType.ROOF][1]).all()


def test_imputer():
    X = np.array([[1.0, 5.0], [3.0, np.nan], [np.nan, 7.0]])
    means = mean_imputer_fit(X)
    assert means.tolist() == [2.0, 6.0]
    assert mean_imputer_transform(X, means).tolist() == [[1, 5], [3, 6], [2, 7]]
    full = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(mean_imputer_transform(full, mean_imputer_fit(full)), full)
    with pytest.raises(ValidationError):
        mean_imputer_fit(np.array([[np.nan, 1.0], [np.nan, 2.0]]))


def test_imputer_loop_oracle():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 5))
    X[rng.random(X.shape) < 0.3] = np.nan
    X[0] = 1.0
    means = mean_imputer_fit(X)
    out = mean_imputer_transform(X, means)
    for j in range(5):
        col = [v for v in X[:, j] if not np.isnan(v)]
        m = sum(col) / len(col)
        assert means[j] == pytest.approx(m, abs=1e-14)
        for i in range(30):
            assert out[i, j] == pytest.approx(m if np.isnan(X[i, j]) else X[i, j], abs=1e-14)


def ols_f(x, y):
    """F of y ~ 1 + x from the two residual sums of squares."""
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    rss1 = np.sum((y - A @ coef) ** 2)
    rss0 = np.sum((y - y.mean()) ** 2)
    return (rss0 - rss1) / (rss1 / (len(y) - 2))


def test_f_statistics_ols_oracle():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(40, 7))
    y = X[:, 3] + rng.normal(size=40)
    F = f_statistics(X, y)
    oracle = np.array([ols_f(X[:, j], y) for j in range(7)])
    assert np.allclose(F, oracle, rtol=1e-10)
    k = 3
    assert np.array_equal(fstat_select(X, y, k), np.sort(np.argsort(-oracle)[:k]))


def test_f_edge_cases():
    rng = np.random.default_rng(3)
    y = rng.normal(size=20)
    X = np.column_stack([rng.normal(size=20), y, np.ones(20)])
    F = f_statistics(X, y)
    assert F[1] == F_CAP and F[2] == 0.0
    assert fstat_select(X, y, 1).tolist() == [1]
    assert fstat_select(X, y, 3).tolist() == [0, 1, 2]
    with pytest.raises(ValidationError):
        fstat_select(X, y, 0)


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_selection_is_sorted_subset(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(15, 6))
    y = rng.normal(size=15)
    sel = fstat_select(X, y, k)
    assert len(sel) == k and np.all(np.diff(sel) > 0)
    F = f_statistics(X, y)
    assert F[sel].min() >= np.delete(F, sel).max(initial=-1)


def test_csv_roundtrip(tmp_path):
    s = store(n=4, D=2, missing=[("h1", ImageType.FRONT_DOOR)])
    y = {h: k * 1.5 for k, h in enumerate(s.ids)}
    table = assemble_feature_table(s, OUTDOOR, y)
    write_feature_csv(tmp_path / "f.csv", table)
    write_outcome_csv(tmp_path / "y.csv", table.ids, table.y)
    header = (tmp_path / "f.csv").read_text().splitlines()[0]
    assert header.startswith("id,satellite_25m_0,satellite_25m_1,satellite_100m_0")
    back = read_feature_csv(tmp_path / "f.csv", tmp_path / "y.csv")
    assert back.ids == table.ids and back.provenance == table.provenance
    assert np.array_equal(back.mask, table.mask)
    assert np.array_equal(np.nan_to_num(back.X), np.nan_to_num(table.X))
    assert np.array_equal(back.y, table.y)
