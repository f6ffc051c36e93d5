import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sep_pipeline.tabular.metrics import pearson, regression_metrics, rmse, spearman


def avg_ranks(v):
    """Tie-averaged 1-based ranks by explicit grouping."""
    order = sorted(range(len(v)), key=lambda i: v[i])
    ranks = [0.0] * len(v)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson_loop(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    sab = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    saa = sum((x - ma) ** 2 for x in a)
    sbb = sum((y - mb) ** 2 for y in b)
    return sab / math.sqrt(saa * sbb)


def test_perfect_prediction():
    y = np.array([1.0, 4.0, 2.0, 8.0])
    m = regression_metrics(y, y)
    assert m["rmse"] == 0 and m["pearson"] == 1 and m["spearman"] == 1


def test_monotone_transform():
    y = np.linspace(0.1, 3, 20)
    assert spearman(y, np.exp(3 * y)) == pytest.approx(1.0)
    assert pearson(y, np.exp(3 * y)) < 1


def test_hand_tied_spearman():
    assert spearman([1, 1, 2], [1, 2, 3]) == pytest.approx(math.sqrt(3) / 2, abs=1e-12)
    assert spearman([1, 1, 2], [1, 2, 3]) == pytest.approx(0.866, abs=1e-3)


def test_undefined_correlations():
    assert pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) is None
    assert spearman([2.0, 2.0], [1.0, 3.0]) is None
    assert pearson([1.0], [2.0]) is None
    assert rmse([1.0, 1.0], [2.0, 3.0]) == pytest.approx(math.sqrt(2.5))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        rmse([1, 2], [1, 2, 3])


@given(st.lists(st.tuples(st.integers(-5, 5), st.floats(-100, 100)), min_size=3, max_size=50))
def test_against_direct_formulas(pairs):
    a = [float(x) for x, _ in pairs]
    b = [y for _, y in pairs]
    assert rmse(a, b) == pytest.approx(math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)),
                                       rel=1e-12, abs=1e-12)
    if len(set(a)) > 1 and len(set(b)) > 1:
        assert pearson(a, b) == pytest.approx(pearson_loop(a, b), abs=1e-12)
        assert spearman(a, b) == pytest.approx(pearson_loop(avg_ranks(a), avg_ranks(b)), abs=1e-12)
