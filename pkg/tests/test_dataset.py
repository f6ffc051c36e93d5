import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sep_pipeline.dataset import (
    IMAGE_TYPES, INDOOR_TYPES, MEASURES, OUTDOOR_TYPES, SATELLITE_TYPES, CohortSplit, HouseholdRecord,
    ImageType, SepMeasures, binarize_labels, compute_expenditure_sep, compute_income_sep, impute_assets,
    quartile_stratified_sample, read_manifest, read_survey_csv, score_quartiles, train_test_split,
    write_manifest, write_survey_csv,
)
from sep_pipeline.errors import ValidationError
from sep_pipeline.rng import check_seed, substream, subseed

money = st.floats(min_value=0, max_value=1e6, allow_nan=False, allow_infinity=False)


def rec(hid="h1", income=None, spend=None, assets=None):
    return HouseholdRecord(hid, (0.0, 0.0), assets or {}, income or {}, spend or {})


# -- image types ----------------------------------------------------------------

def test_image_type_partition():
    assert len(IMAGE_TYPES) == 13
    groups = [set(SATELLITE_TYPES), set(OUTDOOR_TYPES), set(INDOOR_TYPES)]
    assert [len(g) for g in groups] == [2, 3, 8]
    assert set.union(*groups) == set(IMAGE_TYPES)
    assert sum(len(g) for g in groups) == len(IMAGE_TYPES)
    assert ImageType("light_source") in INDOOR_TYPES


# -- income and expenditure ------------------------------------------------------

def test_income_sum():
    assert compute_income_sep(rec(income={"salary": 5000, "farming": 1000, "remittances": 0})) == 6000
    assert compute_income_sep(rec(income={"salary": 0, "farming": 0})) == 0


def test_expenditure_sum():
    assert compute_expenditure_sep(rec(spend={"food": 2000, "transport": 500})) == 2500
    assert compute_expenditure_sep(rec(spend={"food": 0})) == 0


def test_missing_source_counts_as_zero():
    assert compute_income_sep(rec(income={"salary": 10.0, "farming": None})) == 10.0


def test_negative_source_rejected():
    with pytest.raises(ValidationError):
        rec(income={"salary": -1.0})


def test_sum_matches_accumulation_oracle():
    rng = np.random.default_rng(3)
    values = rng.uniform(0, 1e4, size=20)
    acc = 0.0
    for v in values:
        acc += v
    r = rec(income={f"s{k}": float(v) for k, v in enumerate(values)})
    assert compute_income_sep(r) == pytest.approx(acc, rel=1e-14)


@given(st.lists(money, max_size=10), st.lists(money, max_size=10), st.randoms())
def test_sum_additive_and_permutation_invariant(a, b, rnd):
    ra = {f"a{k}": v for k, v in enumerate(a)}
    rb = {f"b{k}": v for k, v in enumerate(b)}
    joint = compute_expenditure_sep(rec(spend={**ra, **rb}))
    assert joint == pytest.approx(compute_expenditure_sep(rec(spend=ra)) + compute_expenditure_sep(rec(spend=rb)),
                                  rel=1e-12, abs=1e-9)
    items = list(ra.items())
    rnd.shuffle(items)
    assert compute_expenditure_sep(rec(spend=dict(items))) == pytest.approx(
        compute_expenditure_sep(rec(spend=ra)), rel=1e-12, abs=1e-9)


# -- asset imputation --------------------------------------------------------------

def _cohort(column, var="water"):
    return [rec(f"h{k}", assets={var: v}) for k, v in enumerate(column)]


def test_impute_mode():
    out = impute_assets(_cohort(["A", "A", "B", None]))
    assert [r.assets["water"] for r in out] == ["A", "A", "B", "A"]


def test_impute_identity_without_missing():
    cohort = _cohort(["A", "B", "C"])
    assert impute_assets(cohort) == cohort


def test_impute_tie_goes_to_smallest_label():
    out = impute_assets(_cohort(["B", "B", "A", "A", None]))
    assert out[-1].assets["water"] == "A"


def test_impute_all_missing_names_variable():
    with pytest.raises(ValidationError, match="roof"):
        impute_assets(_cohort([None, None], var="roof"))


@given(st.lists(st.sampled_from(["a", "b", "c", None]), min_size=1, max_size=20).filter(
    lambda c: any(v is not None for v in c)))
def test_impute_enumeration_oracle_and_idempotence(column):
    out = impute_assets(_cohort(column))
    observed = [v for v in column if v is not None]
    best = max(observed.count(c) for c in set(observed))
    mode = sorted(c for c in set(observed) if observed.count(c) == best)[0]
    for before, after in zip(column, out):
        assert after.assets["water"] == (mode if before is None else before)
    assert impute_assets(out) == out


# -- labels ---------------------------------------------------------------------------

def _sep(values):
    return {f"h{k}": SepMeasures(v, abs(v), abs(v)) for k, v in enumerate(values)}


def test_binarize_median():
    sep = _sep([1.0, 2.0, 3.0, 4.0])
    lab = binarize_labels(sep, list(sep))
    assert lab.thresholds["assets"] == 2.5
    assert lab.flags["h2"][0] is True
    assert lab.flags["h1"][0] is False


def test_binarize_constant_all_false():
    sep = _sep([5.0] * 6)
    lab = binarize_labels(sep, list(sep))
    assert not any(any(f) for f in lab.flags.values())


def test_binarize_requires_train():
    with pytest.raises(ValidationError):
        binarize_labels(_sep([1.0]), [])


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=40), st.floats(-1e3, 1e3))
def test_binarize_sort_oracle_and_test_independence(values, perturbation):
    sep = _sep(values)
    ids = list(sep)
    train = ids[: len(ids) // 2 + 1]
    lab = binarize_labels(sep, train)
    s = sorted(values[: len(train)])
    m = len(s)
    median = s[m // 2] if m % 2 else (s[m // 2 - 1] + s[m // 2]) / 2
    assert lab.thresholds["assets"] == pytest.approx(median, abs=1e-12)
    for h in ids:
        assert lab.flags[h][0] == (sep[h].assets > lab.thresholds["assets"])
    # changing a test household never moves the thresholds
    test_id = ids[-1]
    if test_id not in train:
        sep2 = dict(sep)
        sep2[test_id] = SepMeasures(perturbation, abs(perturbation), abs(perturbation))
        assert binarize_labels(sep2, train).thresholds == lab.thresholds


def test_label_matrix_shape():
    sep = _sep([1.0, 2.0, 3.0])
    lab = binarize_labels(sep, list(sep))
    assert lab.matrix(["h0", "h2"]).shape == (2, len(MEASURES))


# -- sampling and splitting -------------------------------------------------------------

def test_quartile_sample_scores_1_to_100():
    scores = {f"h{k:03d}": float(k) for k in range(1, 101)}
    chosen = quartile_stratified_sample(scores, 5, seed=1)
    assert len(chosen) == 20 and len(set(chosen)) == 20
    for q in range(4):
        members = [h for h in chosen if 25 * q < scores[h] <= 25 * (q + 1)]
        assert len(members) == 5


def test_quartile_sample_exhaustive():
    scores = {f"h{k:03d}": float(k) for k in range(1, 101)}
    assert sorted(quartile_stratified_sample(scores, 25, seed=2)) == sorted(scores)


def test_quartile_sample_full_size():
    scores = {f"h{k:04d}": float(v) for k, v in enumerate(np.random.default_rng(0).normal(size=1300))}
    assert len(quartile_stratified_sample(scores, 250, seed=3)) == 1000


def test_quartile_ties_go_low():
    scores = {"a": 1.0, "b": 1.0, "c": 1.0, "d": 2.0, "e": 3.0, "f": 4.0, "g": 5.0, "h": 6.0}
    q = score_quartiles(scores)
    assert q["a"] == q["b"] == q["c"] == 0


def test_quartile_sample_errors():
    scores = {f"h{k}": float(k) for k in range(10)}
    with pytest.raises(ValidationError):
        quartile_stratified_sample(scores, 3, seed=0)
    tied = {f"h{k}": 0.0 for k in range(8)}
    with pytest.raises(ValidationError, match="Q2"):
        quartile_stratified_sample(tied, 2, seed=0)


def test_split_paper_sizes():
    ids = [f"h{k:04d}" for k in range(975)]
    split = train_test_split(ids, 800, 175, seed=11)
    assert (len(split.train_ids), len(split.test_ids)) == (800, 175)
    assert not set(split.train_ids) & set(split.test_ids)
    assert split == train_test_split(reversed(ids), 800, 175, seed=11)


def test_split_all_train_and_overflow():
    ids = [f"h{k}" for k in range(10)]
    split = train_test_split(ids, 10, 0, seed=0)
    assert split.test_ids == () and len(split.train_ids) == 10
    with pytest.raises(ValidationError):
        train_test_split(ids, 8, 3, seed=0)


@given(st.integers(0, 2**64 - 1), st.integers(0, 30), st.integers(0, 30))
def test_split_properties(seed, n_train, n_test):
    ids = [f"h{k}" for k in range(60)]
    a = train_test_split(ids, n_train, n_test, seed)
    assert a == train_test_split(ids, n_train, n_test, seed)
    assert len(a.train_ids) == n_train and len(a.test_ids) == n_test
    assert not set(a.train_ids) & set(a.test_ids)
    assert CohortSplit.from_json(a.to_json()) == a


# -- file formats ---------------------------------------------------------------------

def test_survey_and_manifest_roundtrip(tmp_path):
    cohort = [
        HouseholdRecord("h1", (1.5, 2.25), {"water": "piped", "roof": None}, {"salary": 100.0},
                        {"food": 20.5}, {ImageType.KITCHEN: "img/h1.png", ImageType.STOVE: None}),
        HouseholdRecord("h2", (3.0, 4.0), {"water": "well", "roof": "tin"}, {"salary": 0.0},
                        {"food": 7.0}, {ImageType.KITCHEN: None, ImageType.STOVE: "img/h2.png"}),
    ]
    write_survey_csv(tmp_path / "s.csv", cohort)
    entries = [(r.id, t, p) for r in cohort for t, p in r.images.items()]
    write_manifest(tmp_path / "m.jsonl", entries)
    manifest = read_manifest(tmp_path / "m.jsonl")
    back = read_survey_csv(tmp_path / "s.csv", manifest)
    assert [r.id for r in back] == ["h1", "h2"]
    assert back[0].assets == {"water": "piped", "roof": None}
    assert back[0].geocode == (1.5, 2.25)
    assert compute_expenditure_sep(back[0]) == 20.5
    assert back[1].images[ImageType.STOVE] == str(tmp_path / "img/h2.png")
    assert back[1].images[ImageType.KITCHEN] is None


# -- random streams --------------------------------------------------------------------

def test_substreams_are_named_and_reproducible():
    a = substream(5, "split").random(4)
    assert np.array_equal(a, substream(5, "split").random(4))
    assert not np.array_equal(a, substream(5, "other").random(4))
    assert subseed(5, "x") == subseed(5, "x")
    assert 0 <= subseed(2**64 - 1, "x") < 2**32


@pytest.mark.parametrize("bad", [-1, 2**64, 1.5, True])
def test_bad_seeds(bad):
    with pytest.raises((TypeError, ValueError)):
        check_seed(bad)


def test_money_is_finite():
    with pytest.raises(ValidationError):
        rec(spend={"food": math.inf})
