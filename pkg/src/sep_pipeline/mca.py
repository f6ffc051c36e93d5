"""Multiple correspondence analysis of the asset indicator matrix.

The first-dimension row principal coordinates are the asset-based SEP score.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

ZERO_SV_RTOL = 1e-12


@dataclass(frozen=True)
class IndicatorMatrix:
    Z: np.ndarray
    columns: tuple[tuple[str, str], ...]
    row_ids: tuple[str, ...]

    @property
    def Q(self) -> int:
        return len({var for var, _ in self.columns})

    @property
    def J(self) -> int:
        return len(self.columns)


@dataclass(frozen=True)
class McaModel:
    singular_values: np.ndarray
    row_standard: np.ndarray
    row_principal: np.ndarray
    col_principal: np.ndarray
    inertia_shares: np.ndarray
    row_masses: np.ndarray
    col_masses: np.ndarray
    columns: tuple[tuple[str, str], ...]
    row_ids: tuple[str, ...]
    n_variables: int
    sign: int = 1
    anchor: tuple[str, str] | None = None

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.singular_values**2

    def adjusted_inertia_shares(self, method: str = "benzecri") -> np.ndarray:
        """Benzécri or Greenacre adjusted inertia shares for the dimensions above 1/Q."""
        Q = self.n_variables
        lam = self.eigenvalues
        if Q < 2:
            raise ValidationError("adjusted inertia needs at least two variables")
        adj = np.where(lam > 1.0 / Q, (Q / (Q - 1.0)) ** 2 * (lam - 1.0 / Q) ** 2, 0.0)
        if method == "benzecri":
            total = adj.sum()
        elif method == "greenacre":
            J = len(self.columns)
            total = Q / (Q - 1.0) * (np.sum(lam**2) - (J - Q) / Q**2)
        else:
            raise ValueError(f"unknown adjustment {method!r}")
        return adj / total


def indicator_matrix(
    assets: Sequence[Mapping[str, str]],
    row_ids: Sequence[str] | None = None,
    schema: Mapping[str, Sequence[str]] | None = None,
) -> IndicatorMatrix:
    """Disjunctive (one-hot) coding of a fully imputed categorical table.

    Variables follow ``schema`` order (else first-seen order); categories follow
    schema order, with categories missing from the schema sorted after.
    Variables with a single observed category carry no variance and are
    dropped with a warning.
    """
    if row_ids is None:
        row_ids = [str(i) for i in range(len(assets))]
    variables = list(schema) if schema is not None else []
    for row in assets:
        for var in row:
            if var not in variables:
                variables.append(var)
    blocks, columns = [], []
    for var in variables:
        values = [row.get(var) for row in assets]
        if any(v is None for v in values):
            raise ValidationError(f"asset variable {var!r} has missing cells; impute first")
        observed = set(values)
        order = [c for c in (schema or {}).get(var, ()) if c in observed]
        order += sorted(observed - set(order))
        if len(order) < 2:
            warnings.warn(f"asset variable {var!r} has a single observed category and is dropped")
            continue
        index = {c: k for k, c in enumerate(order)}
        block = np.zeros((len(values), len(order)))
        block[np.arange(len(values)), [index[v] for v in values]] = 1.0
        blocks.append(block)
        columns.extend((var, c) for c in order)
    if not blocks:
        raise ValidationError("no variance: every asset variable has a single category")
    return IndicatorMatrix(np.hstack(blocks), tuple(columns), tuple(row_ids))


def fit_mca(Z: IndicatorMatrix) -> McaModel:
    X = np.asarray(Z.Z, dtype=np.float64)
    n, J = X.shape
    if n < 2 or J < 2:
        raise ValidationError("MCA needs at least two rows and two columns")
    P = X / X.sum()
    r = P.sum(axis=1)
    c = P.sum(axis=0)
    if np.any(c <= 0):
        raise ValidationError("zero-frequency categories must be removed before MCA")
    S = (P - np.outer(r, c)) / np.sqrt(np.outer(r, c))
    U, sv, Vt = np.linalg.svd(S, full_matrices=False)
    if sv.size == 0 or sv[0] <= 0 or np.allclose(S, 0.0, atol=1e-15):
        raise ValidationError("no variance: all rows of the indicator matrix are identical")
    keep = sv > ZERO_SV_RTOL * sv[0]
    U, sv, V = U[:, keep], sv[keep], Vt[keep].T
    row_std = U / np.sqrt(r)[:, None]
    F = row_std * sv
    G = V / np.sqrt(c)[:, None] * sv
    lam = sv**2
    return McaModel(
        singular_values=sv,
        row_standard=row_std,
        row_principal=F,
        col_principal=G,
        inertia_shares=lam / lam.sum(),
        row_masses=r,
        col_masses=c,
        columns=tuple(Z.columns),
        row_ids=tuple(Z.row_ids),
        n_variables=Z.Q,
    )


def orient(model: McaModel, anchor: tuple[str, str]) -> McaModel:
    """Fix the arbitrary SVD sign so that ``anchor`` has a positive dim-1 coordinate."""
    anchor = tuple(anchor)
    if anchor not in model.columns:
        raise ValidationError(f"anchor category {anchor} is not among the coded columns")
    coord = model.col_principal[model.columns.index(anchor), 0]
    sign = -1 if coord < 0 else 1
    return McaModel(**{**model.__dict__, "sign": sign, "anchor": anchor})


def first_dimension_scores(model: McaModel, anchor: tuple[str, str]) -> dict[str, float]:
    oriented = orient(model, anchor)
    scores = oriented.sign * model.row_principal[:, 0]
    return {hid: float(v) for hid, v in zip(model.row_ids, scores)}


def column_principal_coordinates(model: McaModel, n_dims: int | None = None) -> dict:
    """Labelled column coordinates (sign-oriented) plus inertia shares."""
    k = model.col_principal.shape[1] if n_dims is None else min(n_dims, model.col_principal.shape[1])
    G = model.col_principal[:, :k].copy()
    G[:, 0] *= model.sign
    return {
        "columns": [f"{v}={c}" for v, c in model.columns],
        "coordinates": G,
        "inertia_shares": model.inertia_shares[:k],
    }


def write_interpretation_report(model: McaModel, csv_path, json_path, n_dims: int = 5) -> None:
    table = column_principal_coordinates(model, n_dims)
    k = table["coordinates"].shape[1]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "category"] + [f"dim{d + 1}" for d in range(k)])
        for (var, cat), row in zip(model.columns, table["coordinates"]):
            w.writerow([var, cat] + [f"{v:.12g}" for v in row])
    shares = {
        "raw": [float(v) for v in model.inertia_shares],
        "anchor": list(model.anchor) if model.anchor else None,
        "sign": model.sign,
    }
    if model.n_variables >= 2:
        shares["benzecri"] = [float(v) for v in model.adjusted_inertia_shares("benzecri")]
        shares["greenacre"] = [float(v) for v in model.adjusted_inertia_shares("greenacre")]
    with open(json_path, "w") as fh:
        json.dump(shares, fh, indent=1, sort_keys=True)
