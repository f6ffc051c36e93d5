"""Exact SHAP values for tree ensembles and their image-level aggregation.

The value of a feature coalition ``S`` is the tree-path-conditional
expectation: descend following ``x`` on features in ``S`` and average the
children by training cover on every other split. :func:`treeshap_tree` uses
the polynomial path-tracking recursion; :func:`brute_force_shap` enumerates
coalitions and serves as its oracle.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numba
import numpy as np
from scipy.stats import rankdata

from .dataset import INDOOR_TYPES, ImageType, image_type_order
from .errors import ValidationError
from .tabular.features import PredictorSet
from .tabular.linear import ElasticNet
from .tabular.trees import LEAF, DecisionTree, GradientBoosting, RandomForest

BRUTE_FORCE_LIMIT = 15
TOP_BOTTOM_N = 5


@dataclass(frozen=True)
class ShapVector:
    household_id: str
    base_value: float
    phi: np.ndarray
    model_id: str = ""

    def total(self) -> float:
        return self.base_value + float(np.sum(self.phi))


# -- path-tracking TreeSHAP ---------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _extend(feat, zero, one, pw, off, depth, z, o, f):
    feat[off + depth] = f
    zero[off + depth] = z
    one[off + depth] = o
    pw[off + depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[off + i + 1] += o * pw[off + i] * (i + 1) / (depth + 1)
        pw[off + i] = z * pw[off + i] * (depth - i) / (depth + 1)


@numba.njit(cache=True, nogil=True)
def _unwind(feat, zero, one, pw, off, depth, idx):
    o = one[off + idx]
    z = zero[off + idx]
    nxt = pw[off + depth]
    for i in range(depth - 1, -1, -1):
        if o != 0.0:
            tmp = pw[off + i]
            pw[off + i] = nxt * (depth + 1) / ((i + 1) * o)
            nxt = tmp - pw[off + i] * z * (depth - i) / (depth + 1)
        else:
            pw[off + i] = pw[off + i] * (depth + 1) / (z * (depth - i))
    for i in range(idx, depth):
        feat[off + i] = feat[off + i + 1]
        zero[off + i] = zero[off + i + 1]
        one[off + i] = one[off + i + 1]


@numba.njit(cache=True, nogil=True)
def _unwound_sum(zero, one, pw, off, depth, idx):
    o = one[off + idx]
    z = zero[off + idx]
    nxt = pw[off + depth]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if o != 0.0:
            tmp = nxt * (depth + 1) / ((i + 1) * o)
            total += tmp
            nxt = pw[off + i] - tmp * z * (depth - i) / (depth + 1)
        else:
            total += pw[off + i] / z / ((depth - i) / (depth + 1))
    return total


# not cached: reloading a cached self-recursive kernel crashes numba
@numba.njit(nogil=True)
def _recurse(x, feature, threshold, left, right, value, cover, phi, scale,
             feat, zero, one, pw, node, off, depth, pz, po, pf):
    # copy the parent path into this level's slot
    new_off = off + depth
    for i in range(depth):
        feat[new_off + i] = feat[off + i]
        zero[new_off + i] = zero[off + i]
        one[new_off + i] = one[off + i]
        pw[new_off + i] = pw[off + i]
    off = new_off
    _extend(feat, zero, one, pw, off, depth, pz, po, pf)
    f = feature[node]
    if f == -1:
        for i in range(1, depth + 1):
            w = _unwound_sum(zero, one, pw, off, depth, i)
            phi[feat[off + i]] += scale * w * (one[off + i] - zero[off + i]) * value[node]
        return
    if x[f] <= threshold[node]:
        hot = left[node]
        cold = right[node]
    else:
        hot = right[node]
        cold = left[node]
    c = cover[node]
    iz = 1.0
    io = 1.0
    k = 0
    while k <= depth:
        if feat[off + k] == f:
            break
        k += 1
    if k != depth + 1:
        iz = zero[off + k]
        io = one[off + k]
        _unwind(feat, zero, one, pw, off, depth, k)
        depth -= 1
    _recurse(x, feature, threshold, left, right, value, cover, phi, scale,
             feat, zero, one, pw, hot, off, depth + 1, cover[hot] / c * iz, io, f)
    _recurse(x, feature, threshold, left, right, value, cover, phi, scale,
             feat, zero, one, pw, cold, off, depth + 1, cover[cold] / c * iz, 0.0, f)


@numba.njit(nogil=True)
def _shap_rows(X, feature, threshold, left, right, value, cover, max_depth, phi, scale):
    size = (max_depth + 2) * (max_depth + 3) // 2 + max_depth + 2
    feat = np.zeros(size, np.int64)
    zero = np.zeros(size)
    one = np.zeros(size)
    pw = np.zeros(size)
    for r in range(X.shape[0]):
        _recurse(X[r], feature, threshold, left, right, value, cover, phi[r], scale,
                 feat, zero, one, pw, 0, 0, 0, 1.0, 1.0, -1)


def _check_tree(tree: DecisionTree, p: int) -> None:
    try:
        tree.validate()
    except ValidationError as e:
        raise ValidationError(f"malformed tree: {e}") from None
    internal = tree.feature != LEAF
    if np.any(tree.cover <= 0):
        raise ValidationError("malformed tree: every node needs a positive cover")
    if np.any(tree.feature[internal] >= p):
        raise ValidationError(f"malformed tree: split feature beyond the {p} input columns")


def _accumulate(tree: DecisionTree, X: np.ndarray, phi: np.ndarray, scale: float) -> None:
    _check_tree(tree, X.shape[1])
    _shap_rows(X, tree.feature.astype(np.int64), tree.threshold.astype(np.float64), tree.left.astype(np.int64),
               tree.right.astype(np.int64), tree.value.astype(np.float64), tree.cover.astype(np.float64),
               tree.max_depth, phi, float(scale))


def _as_rows(x) -> tuple[np.ndarray, bool]:
    X = np.ascontiguousarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = X[None, :] if single else X
    if not np.all(np.isfinite(X)):
        raise ValidationError("SHAP needs fully imputed rows")
    return X, single


def treeshap_tree(tree: DecisionTree, x) -> np.ndarray:
    """Per-feature SHAP values of one tree for a row (or a matrix of rows)."""
    X, single = _as_rows(x)
    phi = np.zeros(X.shape)
    _accumulate(tree, X, phi, 1.0)
    return phi[0] if single else phi


def _ensemble_terms(model) -> tuple[float, list[tuple[DecisionTree, float]]]:
    if isinstance(model, RandomForest):
        if not model.trees:
            raise ValidationError("random forest has no trees")
        w = 1.0 / len(model.trees)
        return 0.0, [(t, w) for t in model.trees]
    if isinstance(model, GradientBoosting):
        return model.base_score, [(t, model.learning_rate) for t in model.trees]
    if isinstance(model, DecisionTree):
        return 0.0, [(model, 1.0)]
    if isinstance(model, ElasticNet):
        raise ValidationError("SHAP is available for tree ensembles only, not the elastic net")
    raise ValidationError(f"unsupported model type {type(model).__name__}")


def treeshap_ensemble(model, x) -> tuple[float, np.ndarray]:
    """``(phi0, phi)`` for a random forest, boosted ensemble or single tree.

    Forests average per-tree values; boosting adds the base score to ``phi0`` and
    scales each tree by the learning rate.
    """
    X, single = _as_rows(x)
    offset, terms = _ensemble_terms(model)
    phi = np.zeros(X.shape)
    phi0 = offset
    for tree, w in terms:
        _accumulate(tree, X, phi, w)
        phi0 += w * tree.expected_value()
    return phi0, (phi[0] if single else phi)


def shap_vectors(model, X, ids: Sequence[str], model_id: str = "") -> list[ShapVector]:
    phi0, phi = treeshap_ensemble(model, X)
    return [ShapVector(h, phi0, phi[k], model_id) for k, h in enumerate(ids)]


# -- brute-force oracle -------------------------------------------------------------

def _coalition_values(tree: DecisionTree, x: np.ndarray, universe: np.ndarray) -> np.ndarray:
    """v(S) for every subset S of ``universe`` (bit k of S ↔ universe[k])."""
    M = len(universe)
    subsets = np.arange(2**M)
    pos = {int(f): k for k, f in enumerate(universe)}

    def node_value(i):
        f = int(tree.feature[i])
        if f == LEAF:
            return np.full(2**M, float(tree.value[i]))
        l, r = int(tree.left[i]), int(tree.right[i])
        vl, vr = node_value(l), node_value(r)
        avg = (tree.cover[l] * vl + tree.cover[r] * vr) / tree.cover[i]
        if f not in pos:
            return avg
        follow = vl if x[f] <= tree.threshold[i] else vr
        return np.where((subsets >> pos[f]) & 1 == 1, follow, avg)

    return node_value(0)


def brute_force_shap(model, x, universe: Sequence[int] | None = None) -> tuple[float, np.ndarray]:
    """Shapley values by explicit enumeration of coalitions.

    Returns ``(v(empty), phi)`` with ``phi`` indexed like ``x``; features outside
    ``universe`` get zero. Refuses universes above 15 features.
    """
    x = np.asarray(x, dtype=np.float64)
    universe = np.arange(len(x)) if universe is None else np.asarray(list(universe), dtype=int)
    M = len(universe)
    if M > BRUTE_FORCE_LIMIT:
        raise ValidationError(f"brute-force Shapley over {M} features is too costly (limit {BRUTE_FORCE_LIMIT})")
    offset, terms = _ensemble_terms(model)
    v = np.full(2**M, offset)
    for tree, w in terms:
        v = v + w * _coalition_values(tree, x, universe)
    subsets = np.arange(2**M)
    sizes = np.array([bin(s).count("1") for s in subsets])
    weight = np.array([math.factorial(s) * math.factorial(M - s - 1) / math.factorial(M) if s < M else 0.0
                       for s in range(M + 1)])
    phi = np.zeros(len(x))
    for k, f in enumerate(universe):
        without = subsets[(subsets >> k) & 1 == 0]
        phi[f] = np.sum(weight[sizes[without]] * (v[without | (1 << k)] - v[without]))
    return float(v[0]), phi


# -- image-level aggregation ------------------------------------------------------------

def group_by_image(phi: np.ndarray, provenance: Sequence[tuple[ImageType, int]]) -> tuple[tuple[ImageType, ...], np.ndarray]:
    """Sum attributions per image type; returns the types (enumeration order) and an (n, T) array."""
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if len(provenance) != phi.shape[1]:
        raise ValidationError(f"{phi.shape[1]} attribution columns but provenance for {len(provenance)}")
    col_types = [ImageType(t) for t, _ in provenance]
    types = tuple(sorted(set(col_types), key=image_type_order))
    index = {t: k for k, t in enumerate(types)}
    cols = np.array([index[t] for t in col_types])
    out = np.zeros((phi.shape[0], len(types)))
    for k in range(len(types)):
        out[:, k] = phi[:, cols == k].sum(axis=1)
    return types, out


def rank_image_types(grouped: np.ndarray, types: Sequence[ImageType]) -> list[tuple[ImageType, float]]:
    """Image types by descending median |grouped phi|; ties keep enumeration order."""
    grouped = np.atleast_2d(np.asarray(grouped, dtype=np.float64))
    if grouped.shape[0] < 1:
        raise ValidationError("ranking needs at least one household")
    med = np.median(np.abs(grouped), axis=0)
    order = sorted(range(len(types)), key=lambda k: (-med[k], image_type_order(types[k])))
    return [(ImageType(types[k]), float(med[k])) for k in order]


def top_bottom_images(grouped_by_measure: Mapping[str, np.ndarray], ids: Sequence[str],
                      types: Sequence[ImageType], n: int = TOP_BOTTOM_N) -> dict[ImageType, tuple[list[str], list[str]]]:
    """Households with the highest and lowest average rank of grouped phi across measures.

    Each array in ``grouped_by_measure`` is (len(ids), len(types)). Ranks are
    ascending (largest phi gets the largest rank) with ties averaged; equal
    average ranks keep the household order.
    """
    arrays = [np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in grouped_by_measure.values()]
    if not arrays:
        raise ValidationError("no measures supplied")
    out = {}
    for k, t in enumerate(types):
        avg = np.mean([rankdata(a[:, k], method="average") for a in arrays], axis=0)
        order = np.argsort(-avg, kind="stable")
        top = [ids[i] for i in order[:n]]
        bottom = [ids[i] for i in np.argsort(avg, kind="stable")[:n]]
        out[ImageType(t)] = (top, bottom)
    return out


def reduced_predictor_set(ranking: Sequence[tuple[ImageType, float]]) -> PredictorSet:
    """Outdoor set plus the best-ranked indoor type (not necessarily the global leader)."""
    for t, _ in ranking:
        if ImageType(t) in INDOOR_TYPES:
            return PredictorSet.reduced(t)
    raise ValidationError("ranking contains no indoor image type")


# -- dumps -----------------------------------------------------------------------

def write_shap_csv(path, rows: Sequence[tuple[str, str, ImageType, float, str]]) -> None:
    """Rows of ``(id, split, image_type, grouped_phi, measure)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "split", "image_type", "grouped_phi", "measure"])
        for h, split, t, v, m in rows:
            w.writerow([h, split, ImageType(t).value, repr(float(v)), m])


def ranking_to_json(ranking: Sequence[tuple[ImageType, float]]) -> list[dict]:
    return [{"image_type": ImageType(t).value, "median_abs_phi": float(v)} for t, v in ranking]


def write_top_bottom_jsonl(path, selection: Mapping[ImageType, tuple[list[str], list[str]]],
                           image_paths: Mapping[str, Mapping[ImageType, str | None]],
                           grouped_by_measure: Mapping[str, np.ndarray], ids: Sequence[str],
                           types: Sequence[ImageType]) -> None:
    pos = {h: k for k, h in enumerate(ids)}
    col = {ImageType(t): k for k, t in enumerate(types)}
    with open(path, "w") as fh:
        for t, (top, bottom) in selection.items():
            for direction, chosen in (("top", top), ("bottom", bottom)):
                for h in chosen:
                    rec = {"image_type": t.value, "rank_direction": direction, "id": h,
                           "image_path": image_paths.get(h, {}).get(t),
                           "grouped_phi": {m: float(a[pos[h], col[t]]) for m, a in grouped_by_measure.items()}}
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
