"""Regression trees, random forests and second-order gradient boosting.

Both ensembles share one exact greedy tree builder. A node holding gradient
sum ``G`` and hessian sum ``H`` scores ``G**2 / (H + lam)``; a split is worth
half the score gained by the two children minus ``gamma``, and a leaf stores
``-G / (H + lam)``. With ``g = -w*y``, ``h = w`` and ``lam = gamma = 0`` this is
the usual weighted-variance criterion and leaves hold weighted means, which is
how the random forest uses it.

Candidate thresholds are midpoints between consecutive distinct values of the
node's rows; ``x <= threshold`` goes left.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numba
import numpy as np

from ..errors import ValidationError
from ..rng import substream, subseed

LEAF = -1


@dataclass(frozen=True)
class DecisionTree:
    """Array-of-nodes binary tree. ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def validate(self) -> None:
        n = self.n_nodes
        if n == 0:
            raise ValidationError("tree has no nodes")
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        while stack:
            i = stack.pop()
            if seen[i]:
                raise ValidationError(f"node {i} reached twice; tree is not acyclic")
            seen[i] = True
            if self.feature[i] != LEAF:
                l, r = self.left[i], self.right[i]
                if not (0 < l < n and 0 < r < n):
                    raise ValidationError(f"node {i} has a missing child")
                if not math.isclose(self.cover[i], self.cover[l] + self.cover[r], rel_tol=1e-9, abs_tol=1e-12):
                    raise ValidationError(f"node {i}: cover {self.cover[i]} != children sum")
                stack.extend((l, r))

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _predict_tree(X, self.feature, self.threshold, self.left, self.right, self.value)

    def expected_value(self) -> float:
        leaves = self.feature == LEAF
        return float(np.sum(self.cover[leaves] * self.value[leaves]) / self.cover[0])

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("feature", "threshold", "left", "right", "value", "cover")}

    @classmethod
    def leaf(cls, value: float, cover: float = 1.0) -> "DecisionTree":
        return cls(np.array([LEAF], np.int32), np.zeros(1), np.array([LEAF], np.int32),
                   np.array([LEAF], np.int32), np.array([float(value)]), np.array([float(cover)]))

    @classmethod
    def from_nodes(cls, nodes) -> "DecisionTree":
        """Build from ``(feature, threshold, left, right, value, cover)`` tuples (tests, hand trees)."""
        cols = list(zip(*nodes))
        return cls(np.array(cols[0], np.int32), np.array(cols[1], float), np.array(cols[2], np.int32),
                   np.array(cols[3], np.int32), np.array(cols[4], float), np.array(cols[5], float))


@numba.njit(cache=True, nogil=True)
def _predict_tree(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] != -1:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@numba.njit(cache=True, nogil=True)
def _grow(XT, order, g, h, max_depth, min_child, lam, gamma, mtry, seed):
    """Depth-first exact greedy growth over presorted index segments.

    ``order[f]`` lists the participating rows sorted by feature ``f``; each node
    owns the same contiguous segment in every row of ``order``, kept sorted by
    stable partitioning after every split.
    """
    np.random.seed(seed)
    p, m = order.shape
    cap = 2 * m + 1
    feat = np.full(cap, -1, np.int32)
    thr = np.zeros(cap)
    lch = np.full(cap, -1, np.int32)
    rch = np.full(cap, -1, np.int32)
    val = np.zeros(cap)
    cov = np.zeros(cap)
    seg_start = np.zeros(cap, np.int64)
    seg_end = np.zeros(cap, np.int64)
    depth = np.zeros(cap, np.int64)
    goes_left = np.zeros(XT.shape[1], np.bool_)
    buf = np.empty(m, order.dtype)
    feats = np.arange(p)
    stack = np.empty(cap, np.int64)
    seg_end[0] = m
    n_nodes = 1
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        s = seg_start[node]
        e = seg_end[node]
        G = 0.0
        H = 0.0
        for k in range(s, e):
            r = order[0, k]
            G += g[r]
            H += h[r]
        cov[node] = H
        val[node] = -G / (H + lam) if H + lam > 0 else 0.0
        if (max_depth >= 0 and depth[node] >= max_depth) or H < 2.0 * min_child or e - s < 2:
            continue
        parent_score = G * G / (H + lam) if H + lam > 0 else 0.0
        tol = 1e-11 * abs(parent_score) + 1e-300
        # partial Fisher-Yates draw of mtry candidate features
        n_cand = min(mtry, p)
        if n_cand < p:
            for k in range(n_cand):
                j = k + np.random.randint(p - k)
                tmp = feats[k]
                feats[k] = feats[j]
                feats[j] = tmp
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        for c in range(n_cand):
            f = feats[c]
            GL = 0.0
            HL = 0.0
            for k in range(s, e - 1):
                r = order[f, k]
                GL += g[r]
                HL += h[r]
                x0 = XT[f, r]
                x1 = XT[f, order[f, k + 1]]
                if x1 <= x0:
                    continue
                HR = H - HL
                if HL < min_child or HR < min_child:
                    continue
                GR = G - GL
                gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent_score) - gamma
                if gain > best_gain + tol and gain > tol:
                    best_gain = gain
                    best_f = f
                    t = 0.5 * (x0 + x1)
                    if t >= x1:
                        t = x0
                    best_thr = t
        if best_f < 0:
            continue
        for k in range(s, e):
            r = order[0, k]
            goes_left[r] = XT[best_f, r] <= best_thr
        n_left = 0
        for k in range(s, e):
            if goes_left[order[0, k]]:
                n_left += 1
        for f in range(p):
            li = s
            ri = 0
            for k in range(s, e):
                r = order[f, k]
                # branch-free stable partition
                gl = goes_left[r]
                order[f, li] = r
                buf[ri] = r
                li += gl
                ri += 1 - gl
            for k in range(ri):
                order[f, li + k] = buf[k]
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feat[node] = best_f
        thr[node] = best_thr
        lch[node] = lc
        rch[node] = rc
        seg_start[lc] = s
        seg_end[lc] = s + n_left
        seg_start[rc] = s + n_left
        seg_end[rc] = e
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        stack[top] = rc
        top += 1
        stack[top] = lc
        top += 1
    return (feat[:n_nodes].copy(), thr[:n_nodes].copy(), lch[:n_nodes].copy(),
            rch[:n_nodes].copy(), val[:n_nodes].copy(), cov[:n_nodes].copy())


def presort(X: np.ndarray) -> np.ndarray:
    """Per-feature ascending row order, shape (p, n)."""
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int32))


def grow_tree(X, g, h, *, max_depth=None, min_child=1.0, lam=0.0, gamma=0.0, mtry=None,
              seed=0, sorted_idx=None, rows=None, XT=None) -> DecisionTree:
    """Grow one tree on rows ``rows`` (default: every row with ``h > 0``)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    n, p = X.shape
    if sorted_idx is None:
        sorted_idx = presort(X)
    if rows is None:
        rows = h > 0
    order = np.ascontiguousarray(sorted_idx[rows[sorted_idx]].reshape(p, -1))
    if order.shape[1] == 0:
        raise ValidationError("no rows to grow a tree on")
    XT = np.ascontiguousarray(X.T) if XT is None else XT
    arrays = _grow(XT, order, np.asarray(g, np.float64), np.asarray(h, np.float64),
                   -1 if max_depth is None else int(max_depth), float(min_child), float(lam),
                   float(gamma), p if mtry is None else int(mtry), int(seed) & 0x7FFFFFFF)
    return DecisionTree(*arrays)


# -- random forest ----------------------------------------------------------------

@dataclass
class RandomForest:
    n_trees: int = 100
    mtry: float | int = 1.0 / 3.0
    min_leaf: int = 1
    max_depth: int | None = None
    bootstrap: bool = True
    seed: int = 0
    trees: list[DecisionTree] = field(default_factory=list, repr=False)

    def _mtry(self, p: int) -> int:
        if isinstance(self.mtry, float):
            return max(1, min(p, int(round(self.mtry * p))))
        return max(1, min(p, int(self.mtry)))

    def fit(self, X, y) -> "RandomForest":
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n, p = X.shape
        if n < 2:
            raise ValidationError("random forest needs at least two rows")
        sorted_idx = presort(X)
        XT = np.ascontiguousarray(X.T)
        mtry = self._mtry(p)
        self.trees = []
        for t in range(self.n_trees):
            if self.bootstrap:
                draws = substream(self.seed, "rf_bootstrap", t).integers(0, n, n)
                w = np.bincount(draws, minlength=n).astype(np.float64)
            else:
                w = np.ones(n)
            self.trees.append(grow_tree(
                X, -w * y, w, max_depth=self.max_depth, min_child=float(self.min_leaf), mtry=mtry,
                seed=subseed(self.seed, "rf_features", t), sorted_idx=sorted_idx, rows=w > 0, XT=XT))
        return self

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def expected_value(self) -> float:
        return float(np.mean([t.expected_value() for t in self.trees]))

    def get_params(self) -> dict:
        return {"n_trees": self.n_trees, "mtry": self.mtry, "min_leaf": self.min_leaf,
                "max_depth": self.max_depth, "bootstrap": self.bootstrap, "seed": self.seed}


# -- gradient boosting --------------------------------------------------------------

@dataclass
class GradientBoosting:
    n_rounds: int = 100
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    gamma: float = 0.0
    max_depth: int = 3
    min_child_weight: float = 1.0
    seed: int = 0
    base_score: float = 0.0
    trees: list[DecisionTree] = field(default_factory=list, repr=False)
    train_loss: list[float] = field(default_factory=list, repr=False)

    def fit(self, X, y) -> "GradientBoosting":
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n = X.shape[0]
        if n < 1:
            raise ValidationError("gradient boosting needs at least one row")
        sorted_idx = presort(X)
        XT = np.ascontiguousarray(X.T)
        self.base_score = float(y.mean())
        pred = np.full(n, self.base_score)
        h = np.ones(n)
        rows = np.ones(n, dtype=bool)
        self.trees = []
        self.train_loss = [float(np.mean((pred - y) ** 2))]
        for _ in range(self.n_rounds):
            tree = grow_tree(X, pred - y, h, max_depth=self.max_depth, min_child=self.min_child_weight,
                             lam=self.reg_lambda, gamma=self.gamma, sorted_idx=sorted_idx, rows=rows, XT=XT)
            self.trees.append(tree)
            pred = pred + self.learning_rate * tree.predict(X)
            self.train_loss.append(float(np.mean((pred - y) ** 2)))
        return self

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        out = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def expected_value(self) -> float:
        return self.base_score + self.learning_rate * sum(t.expected_value() for t in self.trees)

    def get_params(self) -> dict:
        return {"n_rounds": self.n_rounds, "learning_rate": self.learning_rate, "reg_lambda": self.reg_lambda,
                "gamma": self.gamma, "max_depth": self.max_depth, "min_child_weight": self.min_child_weight,
                "seed": self.seed}


def rf_fit(X, y, n_trees=100, mtry=1.0 / 3.0, min_leaf=1, max_depth=None, seed=0, bootstrap=True) -> RandomForest:
    return RandomForest(n_trees, mtry, min_leaf, max_depth, bootstrap, seed).fit(X, y)


def rf_predict(ensemble: RandomForest, X) -> np.ndarray:
    return ensemble.predict(X)


def gbt_fit(X, y, n_rounds=100, eta=0.1, reg_lambda=1.0, gamma=0.0, max_depth=3, seed=0) -> GradientBoosting:
    return GradientBoosting(n_rounds, eta, reg_lambda, gamma, max_depth, seed=seed).fit(X, y)


def gbt_predict(ensemble: GradientBoosting, X) -> np.ndarray:
    return ensemble.predict(X)


# -- binary tree blocks ----------------------------------------------------------------

TREE_MAGIC = b"SEPTREE1"
_DTYPES = {"feature": "<i4", "threshold": "<f8", "left": "<i4", "right": "<i4", "value": "<f8", "cover": "<f8"}


def save_ensemble(path, model) -> None:
    """Header JSON (family, params, node counts) then little-endian node arrays per tree."""
    family = "rf" if isinstance(model, RandomForest) else "gbt"
    header = {"family": family, "params": model.get_params(), "node_counts": [t.n_nodes for t in model.trees],
              "arrays": list(_DTYPES.items())}
    if family == "gbt":
        header["base_score"] = model.base_score
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(TREE_MAGIC + struct.pack("<I", len(blob)) + blob)
        for t in model.trees:
            for name, dt in _DTYPES.items():
                fh.write(np.ascontiguousarray(getattr(t, name), dtype=dt).tobytes())


def load_ensemble(path):
    data = open(path, "rb").read()
    if not data.startswith(TREE_MAGIC):
        raise ValidationError(f"{path}: not a tree ensemble file")
    (n,) = struct.unpack_from("<I", data, len(TREE_MAGIC))
    off = len(TREE_MAGIC) + 4
    header = json.loads(data[off:off + n])
    off += n
    trees = []
    for count in header["node_counts"]:
        arrs = {}
        for name, dt in _DTYPES.items():
            a = np.frombuffer(data, dtype=dt, count=count, offset=off)
            off += a.nbytes
            arrs[name] = a.astype(np.int32 if dt == "<i4" else np.float64)
        trees.append(DecisionTree(**arrs))
    params = header["params"]
    if header["family"] == "rf":
        model = RandomForest(**params)
    else:
        model = GradientBoosting(**params)
        model.base_score = header["base_score"]
    model.trees = trees
    return model
