"""Predictor sets, feature tables, mean imputation and F-statistic selection."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..dataset import IMAGE_TYPES, INDOOR_TYPES, OUTDOOR_TYPES, SATELLITE_TYPES, ImageType
from ..errors import ValidationError

F_CAP = 1e12


@dataclass(frozen=True)
class PredictorSet:
    """A named subset of image types, always kept in enumeration order."""

    name: str
    types: tuple[ImageType, ...]

    def __post_init__(self):
        order = tuple(t for t in IMAGE_TYPES if t in self.types)
        if len(order) != len(self.types) or not order:
            raise ValidationError(f"predictor set {self.name!r} has duplicate or unknown image types")
        object.__setattr__(self, "types", order)

    @classmethod
    def reduced(cls, indoor: ImageType | str) -> "PredictorSet":
        t = ImageType(indoor)
        if t not in INDOOR_TYPES:
            raise ValidationError(f"a reduced set adds an indoor image type, got {t.value}")
        return cls("reduced", SATELLITE_TYPES + OUTDOOR_TYPES + (t,))

    @classmethod
    def named(cls, name: str) -> "PredictorSet":
        try:
            return STANDARD_SETS[name]
        except KeyError:
            raise ValidationError(f"unknown predictor set {name!r}; choose from {sorted(STANDARD_SETS)}") from None

    def width(self, feature_dim: int) -> int:
        return feature_dim * len(self.types)


SATELLITE = PredictorSet("satellite", SATELLITE_TYPES)
OUTDOOR = PredictorSet("outdoor", SATELLITE_TYPES + OUTDOOR_TYPES)
COMPLETE = PredictorSet("complete", IMAGE_TYPES)
STANDARD_SETS = {s.name: s for s in (SATELLITE, OUTDOOR, COMPLETE)}


@dataclass(frozen=True)
class FeatureStore:
    """Per-image-type feature blocks aligned to one household order.

    ``blocks[t]`` has shape ``(len(ids), D)``; a row of NaN means the image of
    type ``t`` is missing for that household.
    """

    ids: tuple[str, ...]
    blocks: Mapping[ImageType, np.ndarray]

    def __post_init__(self):
        dims = {b.shape[1] for b in self.blocks.values()}
        if len(dims) > 1:
            raise ValidationError(f"feature blocks disagree on width: {sorted(dims)}")
        for t, b in self.blocks.items():
            if b.shape[0] != len(self.ids):
                raise ValidationError(f"{ImageType(t).value}: {b.shape[0]} rows for {len(self.ids)} households")

    @property
    def feature_dim(self) -> int:
        return next(iter(self.blocks.values())).shape[1]

    @classmethod
    def from_vectors(cls, vectors, ids: Sequence[str], feature_dim: int) -> "FeatureStore":
        """Collect :class:`FeatureVector` objects into aligned blocks."""
        pos = {h: k for k, h in enumerate(ids)}
        blocks: dict[ImageType, np.ndarray] = {}
        for v in vectors:
            b = blocks.setdefault(ImageType(v.image_type), np.full((len(ids), feature_dim), np.nan))
            if not v.missing:
                b[pos[v.household_id]] = v.values
        return cls(tuple(ids), blocks)


@dataclass(frozen=True)
class FeatureTable:
    X: np.ndarray
    y: np.ndarray
    ids: tuple[str, ...]
    provenance: tuple[tuple[ImageType, int], ...]

    @property
    def mask(self) -> np.ndarray:
        """True where a cell is missing."""
        return np.isnan(self.X)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def rows(self, ids: Sequence[str]) -> "FeatureTable":
        pos = {h: k for k, h in enumerate(self.ids)}
        try:
            idx = np.array([pos[h] for h in ids], dtype=int)
        except KeyError as e:
            raise ValidationError(f"household {e.args[0]} not in feature table") from None
        return FeatureTable(self.X[idx], self.y[idx], tuple(ids), self.provenance)

    def column_names(self) -> list[str]:
        return [f"{t.value}_{k}" for t, k in self.provenance]


def assemble_feature_table(store: FeatureStore, pset: PredictorSet, outcome: Mapping[str, float],
                           ids: Sequence[str] | None = None) -> FeatureTable:
    ids = tuple(store.ids if ids is None else ids)
    pos = {h: k for k, h in enumerate(store.ids)}
    missing_types = [t.value for t in pset.types if t not in store.blocks]
    if missing_types:
        raise ValidationError(f"no features extracted for {missing_types}")
    try:
        rows = np.array([pos[h] for h in ids], dtype=int)
    except KeyError as e:
        raise ValidationError(f"household {e.args[0]} has no extracted features") from None
    X = np.hstack([store.blocks[t][rows] for t in pset.types]) if ids else \
        np.zeros((0, pset.width(store.feature_dim)))
    empty = np.all(np.isnan(X), axis=1)
    if np.any(empty):
        bad = [ids[k] for k in np.flatnonzero(empty)[:5]]
        raise ValidationError(f"households {bad} have no image of any type in the {pset.name} set")
    try:
        y = np.array([float(outcome[h]) for h in ids])
    except KeyError as e:
        raise ValidationError(f"household {e.args[0]} has no outcome value") from None
    D = store.feature_dim
    prov = tuple((t, k) for t in pset.types for k in range(D))
    return FeatureTable(X, y, ids, prov)


# -- imputation ------------------------------------------------------------------

def mean_imputer_fit(X_train: np.ndarray) -> np.ndarray:
    X_train = np.asarray(X_train, dtype=np.float64)
    observed = ~np.isnan(X_train)
    counts = observed.sum(axis=0)
    if np.any(counts == 0):
        raise ValidationError(f"columns {np.flatnonzero(counts == 0)[:10].tolist()} have no observed training value")
    return np.where(observed, X_train, 0.0).sum(axis=0) / counts


def mean_imputer_transform(X: np.ndarray, means: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.where(np.isnan(X), means[None, :], X)


# -- univariate F selection ----------------------------------------------------------

def f_statistics(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """F of the simple regression ``y ~ x_j`` for every column, via r_j."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    sxx = np.einsum("ij,ij->j", Xc, Xc)
    syy = yc @ yc
    sxy = Xc.T @ yc
    F = np.zeros(X.shape[1])
    ok = (sxx > 0) & (syy > 0)
    r2 = np.zeros_like(F)
    r2[ok] = np.minimum(sxy[ok] ** 2 / (sxx[ok] * syy), 1.0)
    with np.errstate(divide="ignore"):
        F[ok] = np.where(r2[ok] < 1.0, r2[ok] * (n - 2) / (1.0 - r2[ok]), F_CAP)
    return np.minimum(F, F_CAP)


def fstat_select(X_train: np.ndarray, y_train: np.ndarray, k: int) -> np.ndarray:
    """Indices (ascending) of the ``k`` columns with the largest F; ties go to the lower index."""
    p = np.asarray(X_train).shape[1]
    if not 1 <= k <= p:
        raise ValidationError(f"k must lie in [1, {p}], got {k}")
    F = f_statistics(X_train, y_train)
    top = np.argsort(-F, kind="stable")[:k]
    return np.sort(top)


# -- CSV -------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_feature_csv(path, table: FeatureTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + table.column_names())
        for h, row in zip(table.ids, table.X):
            w.writerow([h] + [_fmt(v) for v in row])


def write_outcome_csv(path, ids: Sequence[str], y: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "value"])
        for h, v in zip(ids, y):
            w.writerow([h, repr(float(v))])


def _parse_column(name: str) -> tuple[ImageType, int]:
    base, _, k = name.rpartition("_")
    try:
        return ImageType(base), int(k)
    except ValueError:
        raise ValidationError(f"bad feature column name {name!r}") from None


def read_feature_csv(path, outcome_path=None) -> FeatureTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "id":
        raise ValidationError(f"{path}: expected an 'id' header column")
    prov = tuple(_parse_column(c) for c in rows[0][1:])
    ids = tuple(r[0] for r in rows[1:])
    X = np.array([[float(v) if v != "" else np.nan for v in r[1:]] for r in rows[1:]]).reshape(len(ids), len(prov))
    y = np.full(len(ids), np.nan)
    if outcome_path is not None:
        with open(outcome_path, newline="") as fh:
            vals = {r["id"]: float(r["value"]) for r in csv.DictReader(fh)}
        y = np.array([vals[h] for h in ids])
    return FeatureTable(X, y, ids, prov)
