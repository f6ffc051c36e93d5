"""Impute → select → model pipelines, randomized k-fold search and evaluation."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ..errors import NumericalError, ValidationError
from ..parallel import pmap
from ..rng import substream
from .features import FeatureTable, fstat_select, mean_imputer_fit, mean_imputer_transform
from .linear import ElasticNet, elasticnet_fit
from .metrics import pearson, rmse, spearman
from .trees import GradientBoosting, RandomForest, load_ensemble, save_ensemble

ALGORITHMS = ("elasticnet", "rf", "gbt")
DEFAULT_K_FOLDS = 10
DEFAULT_N_ITER = 50


# -- parameter distributions ------------------------------------------------------

@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def sample(self, rng: np.random.Generator, p: int) -> float:
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def sample(self, rng: np.random.Generator, p: int) -> float:
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class IntUniform:
    """Integers in ``[low, high]`` inclusive."""

    low: int
    high: int

    def sample(self, rng: np.random.Generator, p: int) -> int:
        return int(rng.integers(self.low, self.high + 1))


@dataclass(frozen=True)
class LogUniformInt:
    """Rounded log-uniform integer; ``high="p"`` means the current column count."""

    low: int
    high: int | str

    def sample(self, rng: np.random.Generator, p: int) -> int:
        hi = p if self.high == "p" else int(self.high)
        lo = min(self.low, hi)
        v = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        return int(min(hi, max(lo, round(v))))


@dataclass(frozen=True)
class Choice:
    values: tuple

    def sample(self, rng: np.random.Generator, p: int):
        v = self.values[int(rng.integers(len(self.values)))] if len(self.values) > 1 else self.values[0]
        return v.item() if isinstance(v, np.generic) else v


_KINDS = {"loguniform": LogUniform, "uniform": Uniform, "int": IntUniform, "logint": LogUniformInt}


def parse_distribution(obj) -> Any:
    """``{"dist": "loguniform", "low": a, "high": b}``, ``{"choice": [...]}`` or a bare constant."""
    if isinstance(obj, (LogUniform, Uniform, IntUniform, LogUniformInt, Choice)):
        return obj
    if isinstance(obj, Mapping):
        if "choice" in obj:
            if not obj["choice"]:
                raise ValidationError("choice distribution needs at least one value")
            return Choice(tuple(obj["choice"]))
        kind = obj.get("dist")
        if kind not in _KINDS:
            raise ValidationError(f"unknown distribution {kind!r}; choose from {sorted(_KINDS)} or 'choice'")
        lo, hi = obj.get("low"), obj.get("high")
        if lo is None or hi is None:
            raise ValidationError(f"{kind} distribution needs 'low' and 'high'")
        if hi != "p" and hi < lo:
            raise ValidationError(f"{kind} distribution has high < low")
        if kind in ("loguniform", "logint") and lo <= 0:
            raise ValidationError(f"{kind} distribution needs low > 0")
        return _KINDS[kind](lo, hi)
    return Choice((obj,))


def distribution_to_dict(d) -> dict:
    if isinstance(d, Choice):
        return {"choice": list(d.values)}
    kind = {v: k for k, v in _KINDS.items()}[type(d)]
    return {"dist": kind, "low": d.low, "high": d.high}


DEFAULT_DISTRIBUTIONS: dict[str, dict] = {
    "elasticnet": {"alpha": LogUniform(1e-4, 1e2), "l1_ratio": Uniform(0.0, 1.0)},
    "rf": {"n_trees": IntUniform(100, 500), "mtry": Uniform(0.1, 1.0), "min_leaf": IntUniform(1, 10)},
    "gbt": {"n_rounds": IntUniform(50, 500), "eta": LogUniform(0.01, 0.3),
            "reg_lambda": LogUniform(1e-3, 10.0), "max_depth": IntUniform(2, 6)},
}
K_DISTRIBUTION = LogUniformInt(10, "p")

_PARAM_NAMES = {
    "elasticnet": {"alpha", "l1_ratio", "tol", "max_iter"},
    "rf": {"n_trees", "mtry", "min_leaf", "max_depth"},
    "gbt": {"n_rounds", "eta", "reg_lambda", "gamma", "max_depth", "min_child_weight"},
}


def check_algorithm(algorithm: str) -> str:
    if algorithm not in ALGORITHMS:
        raise ValidationError(f"unknown algorithm {algorithm!r}; choose from {list(ALGORITHMS)}")
    return algorithm


def _fit_model(algorithm: str, params: Mapping, X: np.ndarray, y: np.ndarray, seed: int):
    unknown = set(params) - _PARAM_NAMES[algorithm]
    if unknown:
        raise ValidationError(f"{algorithm} has no hyperparameters {sorted(unknown)}")
    if algorithm == "elasticnet":
        return elasticnet_fit(X, y, params.get("alpha", 1.0), params.get("l1_ratio", 0.5),
                              params.get("tol", 1e-7), params.get("max_iter", 10000))
    if algorithm == "rf":
        mtry = params.get("mtry", 1.0 / 3.0)
        return RandomForest(int(params.get("n_trees", 100)), float(mtry) if isinstance(mtry, float) else int(mtry),
                            int(params.get("min_leaf", 1)), params.get("max_depth"), True, seed).fit(X, y)
    return GradientBoosting(int(params.get("n_rounds", 100)), float(params.get("eta", 0.1)),
                            float(params.get("reg_lambda", 1.0)), float(params.get("gamma", 0.0)),
                            int(params.get("max_depth", 3)), float(params.get("min_child_weight", 1.0)),
                            seed).fit(X, y)


@dataclass(frozen=True)
class FittedPipeline:
    algorithm: str
    params: dict
    means: np.ndarray
    selected: np.ndarray | None
    model: Any
    seed: int
    cv_score: float | None = None
    cv_results: tuple = field(default=(), repr=False)

    def transform(self, X) -> np.ndarray:
        Xi = mean_imputer_transform(X, self.means)
        return Xi if self.selected is None else Xi[:, self.selected]

    def predict(self, X) -> np.ndarray:
        return self.model.predict(self.transform(X))


def fit_pipeline(X, y, algorithm: str, params: Mapping, seed: int = 0) -> FittedPipeline:
    """Fit imputer, optional selector (``params["k"]``) and model on one training set."""
    check_algorithm(algorithm)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    params = dict(params)
    k = params.pop("k", None)
    means = mean_imputer_fit(X)
    Xi = mean_imputer_transform(X, means)
    selected = None
    if k is not None:
        selected = fstat_select(Xi, y, int(k))
        Xi = Xi[:, selected]
    model = _fit_model(algorithm, params, Xi, y, seed)
    if k is not None:
        params["k"] = int(k)
    return FittedPipeline(algorithm, params, means, selected, model, seed)


def cv_folds(n: int, k_folds: int, seed: int) -> list[np.ndarray]:
    """Contiguous blocks of one seeded permutation."""
    if k_folds < 2:
        raise ValidationError(f"k_folds must be at least 2, got {k_folds}")
    if n < k_folds:
        raise ValidationError(f"{n} rows cannot fill {k_folds} folds")
    perm = substream(seed, "cv_folds").permutation(n)
    return np.array_split(perm, k_folds)


def sample_configurations(distributions: Mapping, n_iter: int, seed: int, p: int,
                          select: bool = False) -> list[dict]:
    dists = {name: parse_distribution(d) for name, d in distributions.items()}
    if select and "k" not in dists:
        dists["k"] = K_DISTRIBUTION
    if not select:
        dists.pop("k", None)
    rng = substream(seed, "search_configs")
    return [{name: dists[name].sample(rng, p) for name in sorted(dists)} for _ in range(n_iter)]


def randomized_search_cv(table: FeatureTable, algorithm: str, distributions: Mapping | None = None,
                         n_iter: int = DEFAULT_N_ITER, k_folds: int = DEFAULT_K_FOLDS, seed: int = 0,
                         select: bool = False, threads: int | None = None) -> FittedPipeline:
    """Pick the configuration with the lowest mean held-out RMSE and refit it on the whole table.

    Folds are shared by all configurations; ties go to the earlier sample.
    """
    check_algorithm(algorithm)
    if n_iter < 1:
        raise ValidationError(f"n_iter must be at least 1, got {n_iter}")
    X, y = table.X, table.y
    folds = cv_folds(len(y), k_folds, seed)
    configs = sample_configurations(DEFAULT_DISTRIBUTIONS[algorithm] if distributions is None else distributions,
                                    n_iter, seed, X.shape[1], select)

    def run(job):
        i, f = job
        test = folds[f]
        train = np.concatenate([folds[g] for g in range(k_folds) if g != f])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            pipe = fit_pipeline(X[train], y[train], algorithm, configs[i], seed)
        return rmse(y[test], pipe.predict(X[test]))

    scores = np.array(pmap(run, [(i, f) for i in range(n_iter) for f in range(k_folds)], threads))
    scores = scores.reshape(n_iter, k_folds)
    means = scores.mean(axis=1)
    if not np.all(np.isfinite(means)):
        raise NumericalError(f"non-finite cross-validation error for {algorithm}")
    best = int(np.argmin(means))
    results = tuple({"params": configs[i], "mean_rmse": float(means[i]), "fold_rmse": scores[i].tolist()}
                    for i in range(n_iter))
    final = fit_pipeline(X, y, algorithm, configs[best], seed)
    return FittedPipeline(final.algorithm, final.params, final.means, final.selected, final.model, seed,
                          float(means[best]), results)


# -- evaluation -----------------------------------------------------------------

@dataclass(frozen=True)
class Evaluation:
    rmse: float
    pearson: float | None
    spearman: float | None
    ids: tuple[str, ...]
    y_true: np.ndarray
    y_pred: np.ndarray

    def summary(self, **labels) -> dict:
        return {**labels, "rmse": self.rmse, "pearson": self.pearson, "spearman": self.spearman}

    def write_predictions(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "observed", "predicted"])
            for h, a, b in zip(self.ids, self.y_true, self.y_pred):
                w.writerow([h, repr(float(a)), repr(float(b))])


def evaluate(model: FittedPipeline, table: FeatureTable) -> Evaluation:
    pred = model.predict(table.X)
    return Evaluation(rmse(table.y, pred), pearson(table.y, pred), spearman(table.y, pred),
                      tuple(table.ids), np.asarray(table.y, float), pred)


# -- artifacts ------------------------------------------------------------------

def save_pipeline(path, fp: FittedPipeline) -> None:
    """JSON metadata; tree ensembles go to a sibling ``.trees`` block file."""
    path = Path(path)
    doc = {"algorithm": fp.algorithm, "params": fp.params, "seed": fp.seed, "cv_score": fp.cv_score,
           "cv_results": list(fp.cv_results), "means": fp.means.tolist(),
           "selected": None if fp.selected is None else fp.selected.tolist()}
    if isinstance(fp.model, ElasticNet):
        doc["model"] = fp.model.to_dict()
    else:
        blocks = path.with_suffix(".trees")
        save_ensemble(blocks, fp.model)
        doc["model"] = {"trees_file": blocks.name}
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_pipeline(path) -> FittedPipeline:
    path = Path(path)
    doc = json.loads(path.read_text())
    if "trees_file" in doc["model"]:
        model = load_ensemble(path.parent / doc["model"]["trees_file"])
    else:
        model = ElasticNet.from_dict(doc["model"])
    sel = doc["selected"]
    return FittedPipeline(doc["algorithm"], doc["params"], np.array(doc["means"], float),
                          None if sel is None else np.array(sel, dtype=int), model, doc["seed"],
                          doc["cv_score"], tuple(doc["cv_results"]))
