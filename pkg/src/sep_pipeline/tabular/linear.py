"""Elastic net by cyclic coordinate descent.

Minimises ``(1/2n)||y - b0 - Xb||^2 + alpha*l1_ratio*||b||_1 +
(alpha/2)*(1-l1_ratio)*||b||^2`` where the penalty acts on the coefficients of
the standardised columns. Coefficients are reported on the original scale.
Columns with zero variance keep a zero coefficient.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numba
import numpy as np

from ..errors import ValidationError


@numba.njit(cache=True, nogil=True)
def _cd_gram(G, c, l1, l2, tol, max_iter, beta):
    """Coordinate descent on the Gram form; returns (beta, iterations, last max change)."""
    p = G.shape[0]
    q = G @ beta
    max_delta = 0.0
    it = 0
    while it < max_iter:
        it += 1
        max_delta = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = beta[j]
            rho = c[j] - q[j] + gjj * old
            if rho > l1:
                new = (rho - l1) / (gjj + l2)
            elif rho < -l1:
                new = (rho + l1) / (gjj + l2)
            else:
                new = 0.0
            d = new - old
            if d != 0.0:
                beta[j] = new
                for k in range(p):
                    q[k] += G[k, j] * d
                ad = abs(d)
                if ad > max_delta:
                    max_delta = ad
        if max_delta < tol:
            break
    return beta, it, max_delta


@dataclass(frozen=True)
class ElasticNet:
    alpha: float
    l1_ratio: float
    coef: np.ndarray
    intercept: float
    x_mean: np.ndarray
    x_scale: np.ndarray
    n_iter: int
    converged: bool

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept

    @property
    def standardized_coef(self) -> np.ndarray:
        return self.coef * self.x_scale

    def kkt_residual(self, X, y) -> float:
        """Largest violation of the optimality conditions on the standardised problem."""
        Xs = _standardize(np.asarray(X, dtype=np.float64), self.x_mean, self.x_scale)
        y = np.asarray(y, dtype=np.float64)
        b = self.standardized_coef
        r = (y - y.mean()) - Xs @ b
        grad = Xs.T @ r / len(y) - self.alpha * (1.0 - self.l1_ratio) * b
        l1 = self.alpha * self.l1_ratio
        active = b != 0
        viol = np.where(active, np.abs(grad - l1 * np.sign(b)), np.maximum(np.abs(grad) - l1, 0.0))
        viol[self.x_scale == 0] = 0.0
        return float(viol.max()) if len(viol) else 0.0

    def get_params(self) -> dict:
        return {"alpha": self.alpha, "l1_ratio": self.l1_ratio}

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "l1_ratio": self.l1_ratio, "coef": self.coef.tolist(),
                "intercept": self.intercept, "x_mean": self.x_mean.tolist(), "x_scale": self.x_scale.tolist(),
                "n_iter": self.n_iter, "converged": self.converged}

    @classmethod
    def from_dict(cls, d: dict) -> "ElasticNet":
        return cls(d["alpha"], d["l1_ratio"], np.array(d["coef"], float), d["intercept"],
                   np.array(d["x_mean"], float), np.array(d["x_scale"], float), d["n_iter"], d["converged"])


def _standardize(X, mean, scale):
    safe = np.where(scale > 0, scale, 1.0)
    return np.where(scale > 0, (X - mean) / safe, 0.0)


def elasticnet_fit(X, y, alpha: float = 1.0, l1_ratio: float = 0.5, tol: float = 1e-7,
                   max_iter: int = 10000) -> ElasticNet:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != len(y) or len(y) == 0:
        raise ValidationError(f"X {X.shape} and y {y.shape} do not align")
    if not np.all(np.isfinite(X)):
        raise ValidationError("elastic net needs an imputed matrix without NaN")
    if alpha < 0 or not 0.0 <= l1_ratio <= 1.0:
        raise ValidationError(f"need alpha >= 0 and l1_ratio in [0, 1], got {alpha}, {l1_ratio}")
    n = len(y)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12 * (1.0 + np.abs(mean))] = 0.0
    Xs = _standardize(X, mean, scale)
    yc = y - y.mean()
    G = Xs.T @ Xs / n
    c = Xs.T @ yc / n
    beta, it, delta = _cd_gram(G, c, alpha * l1_ratio, alpha * (1.0 - l1_ratio), tol, max_iter,
                               np.zeros(X.shape[1]))
    coef = np.where(scale > 0, beta / np.where(scale > 0, scale, 1.0), 0.0)
    model = ElasticNet(float(alpha), float(l1_ratio), coef, float(y.mean() - mean @ coef), mean, scale,
                       int(it), bool(delta < tol))
    if not model.converged:
        warnings.warn(f"elastic net did not converge in {max_iter} sweeps; "
                      f"last change {delta:.3g}, KKT residual {model.kkt_residual(X, y):.3g}", RuntimeWarning)
    return model


def elasticnet_predict(model: ElasticNet, X) -> np.ndarray:
    return model.predict(X)
