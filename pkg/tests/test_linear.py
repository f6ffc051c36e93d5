import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sep_pipeline.errors import ValidationError
from sep_pipeline.tabular.linear import ElasticNet, elasticnet_fit, elasticnet_predict


def problem(seed=0, n=80, p=6):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p)) * rng.uniform(0.5, 3, size=p) + rng.normal(size=p)
    beta = rng.normal(size=p)
    y = X @ beta + 2.0 + 0.3 * rng.normal(size=n)
    return X, y


def ols(X, y):
    A = np.column_stack([np.ones(len(y)), X])
    sol = np.linalg.solve(A.T @ A, A.T @ y)
    return sol[0], sol[1:]


def test_alpha_zero_is_ols():
    X, y = problem()
    b0, b = ols(X, y)
    m = elasticnet_fit(X, y, alpha=0.0, tol=1e-12, max_iter=100000)
    assert np.allclose(m.coef, b, atol=1e-6)
    assert m.intercept == pytest.approx(b0, abs=1e-6)
    assert np.allclose(elasticnet_predict(m, X), b0 + X @ b, atol=1e-6)


def test_full_shrinkage():
    X, y = problem(1)
    m = elasticnet_fit(X, y, alpha=1e3, l1_ratio=0.5)
    assert np.all(m.coef == 0)
    assert m.intercept == pytest.approx(y.mean())


@pytest.mark.parametrize("alpha", [0.0, 0.05, 0.3, 5.0])
def test_single_feature_lasso_soft_threshold(alpha):
    rng = np.random.default_rng(2)
    x = rng.normal(size=50)
    y = 1.5 * x + rng.normal(size=50)
    m = elasticnet_fit(x[:, None], y, alpha=alpha, l1_ratio=1.0, tol=1e-14)
    xs = (x - x.mean()) / x.std()
    rho = xs @ (y - y.mean()) / len(y)
    expect = np.sign(rho) * max(abs(rho) - alpha, 0.0)
    assert m.standardized_coef[0] == pytest.approx(expect, abs=1e-12)


def test_ridge_closed_form():
    X, y = problem(3)
    m = elasticnet_fit(X, y, alpha=0.7, l1_ratio=0.0, tol=1e-13, max_iter=100000)
    Xs = (X - X.mean(0)) / X.std(0)
    n = len(y)
    b = np.linalg.solve(Xs.T @ Xs / n + 0.7 * np.eye(X.shape[1]), Xs.T @ (y - y.mean()) / n)
    assert np.allclose(m.standardized_coef, b, atol=1e-9)


@given(st.floats(1e-3, 2.0), st.floats(0.0, 1.0), st.integers(0, 1000))
def test_kkt_at_convergence(alpha, l1_ratio, seed):
    X, y = problem(seed, n=60, p=8)
    tol = 1e-8
    m = elasticnet_fit(X, y, alpha=alpha, l1_ratio=l1_ratio, tol=tol)
    assert m.converged
    assert m.kkt_residual(X, y) <= 10 * tol


def test_zero_variance_column_keeps_zero():
    X, y = problem(4)
    X[:, 2] = 5.0
    m = elasticnet_fit(X, y, alpha=0.01)
    assert m.coef[2] == 0.0
    assert np.isfinite(m.predict(X)).all()


def test_non_convergence_warns():
    X, y = problem(5)
    with pytest.warns(RuntimeWarning, match="KKT residual"):
        m = elasticnet_fit(X, y, alpha=1e-4, tol=1e-16, max_iter=2)
    assert not m.converged


def test_input_validation():
    X, y = problem()
    with pytest.raises(ValidationError):
        elasticnet_fit(X, y[:-1])
    with pytest.raises(ValidationError):
        elasticnet_fit(X, y, alpha=-1)
    with pytest.raises(ValidationError):
        elasticnet_fit(X, y, l1_ratio=1.5)
    X[0, 0] = np.nan
    with pytest.raises(ValidationError):
        elasticnet_fit(X, y)


def test_dict_roundtrip_and_determinism():
    X, y = problem(6)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        m = elasticnet_fit(X, y, alpha=0.1)
    back = ElasticNet.from_dict(m.to_dict())
    assert np.array_equal(back.predict(X), m.predict(X))
    assert np.array_equal(elasticnet_fit(X, y, alpha=0.1).coef, m.coef)
