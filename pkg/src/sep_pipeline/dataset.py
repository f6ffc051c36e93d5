"""Household records, ground-truth SEP measures, sampling and splitting."""
from __future__ import annotations

import csv
import enum
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .rng import substream

MEASURES = ("assets", "expenditure", "income")


class ImageType(str, enum.Enum):
    SATELLITE_25M = "satellite_25m"
    SATELLITE_100M = "satellite_100m"
    FRONT_DOOR = "front_door"
    WALL = "wall"
    STREET_VIEW = "street_view"
    ROOF = "roof"
    FLOOR = "floor"
    LIGHT_SOURCE = "light_source"
    KITCHEN = "kitchen"
    STOVE = "stove"
    BATHROOM = "bathroom"
    LATRINE = "latrine"
    WATER_SOURCE = "water_source"

    @property
    def group(self) -> str:
        if self in SATELLITE_TYPES:
            return "satellite"
        if self in OUTDOOR_TYPES:
            return "outdoor"
        return "indoor"

    @property
    def is_photo(self) -> bool:
        return self not in SATELLITE_TYPES


IMAGE_TYPES = tuple(ImageType)
SATELLITE_TYPES = (ImageType.SATELLITE_25M, ImageType.SATELLITE_100M)
OUTDOOR_TYPES = (ImageType.FRONT_DOOR, ImageType.WALL, ImageType.STREET_VIEW)
INDOOR_TYPES = tuple(t for t in ImageType if t not in SATELLITE_TYPES + OUTDOOR_TYPES)
PHOTO_TYPES = OUTDOOR_TYPES + INDOOR_TYPES


def image_type_order(t: ImageType) -> int:
    return IMAGE_TYPES.index(ImageType(t))


@dataclass(frozen=True)
class HouseholdRecord:
    """One surveyed household.

    ``assets`` maps variable name to category label, ``None`` meaning the answer
    is missing. ``images`` maps an :class:`ImageType` to an image reference
    (usually a path) or ``None`` when the image is missing.
    """

    id: str
    geocode: tuple[float, float]
    assets: Mapping[str, str | None] = field(default_factory=dict)
    income_sources: Mapping[str, float] = field(default_factory=dict)
    expenditure_sources: Mapping[str, float] = field(default_factory=dict)
    images: Mapping[ImageType, str | None] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValidationError("household id must be a non-empty string")
        for kind in ("income_sources", "expenditure_sources"):
            for name, value in getattr(self, kind).items():
                if value is None:
                    continue
                if not math.isfinite(value) or value < 0:
                    raise ValidationError(
                        f"household {self.id}: {kind[:-8]} source {name!r} must be a "
                        f"non-negative finite amount, got {value}"
                    )


@dataclass(frozen=True)
class SepMeasures:
    assets: float
    expenditure: float
    income: float

    def __post_init__(self):
        if self.expenditure < 0 or self.income < 0:
            raise ValidationError("expenditure and income must be non-negative")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.assets, self.expenditure, self.income)


@dataclass(frozen=True)
class BinaryLabels:
    """Above-median flags per household, thresholds taken from training ids only."""

    thresholds: dict[str, float]
    flags: dict[str, tuple[bool, bool, bool]]

    def matrix(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.flags[i] for i in ids], dtype=bool).reshape(len(ids), len(MEASURES))


@dataclass(frozen=True)
class CohortSplit:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ValidationError(f"train and test ids overlap: {sorted(overlap)[:5]}")

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "train_ids": list(self.train_ids), "test_ids": list(self.test_ids)},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "CohortSplit":
        obj = json.loads(text)
        return cls(tuple(obj["train_ids"]), tuple(obj["test_ids"]), int(obj["seed"]))


def check_cohort(cohort: Sequence[HouseholdRecord], schema: Mapping[str, Sequence[str]] | None = None):
    seen = set()
    for rec in cohort:
        if rec.id in seen:
            raise ValidationError(f"duplicate household id {rec.id!r}")
        seen.add(rec.id)
        if schema is not None:
            unknown = set(rec.assets) - set(schema)
            if unknown:
                raise ValidationError(f"household {rec.id}: unknown asset variables {sorted(unknown)}")


# -- SEP measures ------------------------------------------------------------

def _sum_sources(sources: Mapping[str, float], who: str, kind: str) -> float:
    total = 0.0
    for name, value in sources.items():
        if value is None:
            continue  # a missing source counts as zero
        if not math.isfinite(value) or value < 0:
            raise ValidationError(f"household {who}: {kind} source {name!r} is {value}")
        total += float(value)
    return total


def compute_income_sep(record: HouseholdRecord) -> float:
    return _sum_sources(record.income_sources, record.id, "income")


def compute_expenditure_sep(record: HouseholdRecord) -> float:
    return _sum_sources(record.expenditure_sources, record.id, "expenditure")


def modal_category(values: Iterable[str | None]) -> str:
    counts = Counter(v for v in values if v is not None)
    if not counts:
        raise ValueError("no observed values")
    top = max(counts.values())
    return min(c for c, n in counts.items() if n == top)


def impute_assets(cohort: Sequence[HouseholdRecord]) -> list[HouseholdRecord]:
    """Fill missing asset answers with the modal category of their variable.

    Ties between equally frequent categories go to the lexicographically
    smallest label.
    """
    variables = []
    for rec in cohort:
        for var in rec.assets:
            if var not in variables:
                variables.append(var)
    modes = {}
    for var in variables:
        column = [rec.assets.get(var) for rec in cohort]
        if any(v is None for v in column):
            try:
                modes[var] = modal_category(column)
            except ValueError:
                raise ValidationError(f"asset variable {var!r} is missing for every household") from None
    if not modes:
        return list(cohort)
    out = []
    for rec in cohort:
        if any(rec.assets.get(v) is None for v in modes):
            filled = {v: (modes[v] if c is None and v in modes else c) for v, c in rec.assets.items()}
            for v in modes:
                filled.setdefault(v, modes[v])
            rec = replace(rec, assets=filled)
        out.append(rec)
    return out


def binarize_labels(sep: Mapping[str, SepMeasures], train_ids: Iterable[str]) -> BinaryLabels:
    train_ids = list(train_ids)
    if not train_ids:
        raise ValidationError("binarize_labels needs at least one training household")
    train = np.array([sep[i].as_tuple() for i in train_ids], dtype=float)
    medians = np.median(train, axis=0)
    thresholds = {m: float(v) for m, v in zip(MEASURES, medians)}
    flags = {
        hid: tuple(bool(v > t) for v, t in zip(s.as_tuple(), medians))
        for hid, s in sep.items()
    }
    return BinaryLabels(thresholds, flags)


# -- sampling ----------------------------------------------------------------

def score_quartiles(scores: Mapping[str, float]) -> dict[str, int]:
    """Quartile index 0..3 per id; a value equal to an upper edge stays in the lower quartile."""
    values = np.array(list(scores.values()), dtype=float)
    edges = np.quantile(values, [0.25, 0.5, 0.75])
    return {hid: int(np.searchsorted(edges, v, side="left")) for hid, v in scores.items()}


def quartile_stratified_sample(scores: Mapping[str, float], n_per_quartile: int, seed: int) -> list[str]:
    if n_per_quartile < 0:
        raise ValidationError("n_per_quartile must be non-negative")
    if len(scores) < 4 * n_per_quartile:
        raise ValidationError(
            f"need at least {4 * n_per_quartile} households for {n_per_quartile} per quartile, "
            f"got {len(scores)}"
        )
    quartile = score_quartiles(scores)
    rng = substream(seed, "quartile_sample")
    chosen = []
    for q in range(4):
        members = sorted(h for h, k in quartile.items() if k == q)
        if len(members) < n_per_quartile:
            raise ValidationError(
                f"quartile Q{q + 1} has {len(members)} households, fewer than {n_per_quartile}"
            )
        picks = rng.choice(len(members), size=n_per_quartile, replace=False)
        chosen.extend(members[i] for i in sorted(picks))
    return chosen


def train_test_split(ids: Iterable[str], n_train: int, n_test: int, seed: int) -> CohortSplit:
    ids = sorted(set(ids))
    if n_train < 0 or n_test < 0:
        raise ValidationError("split sizes must be non-negative")
    if n_train + n_test > len(ids):
        raise ValidationError(f"split sizes {n_train}+{n_test} exceed the {len(ids)} available ids")
    order = substream(seed, "split").permutation(len(ids))
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:n_train + n_test])
    return CohortSplit(tuple(train), tuple(test), seed)


# -- file formats --------------------------------------------------------------

def _fmt_money(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def write_survey_csv(path, cohort: Sequence[HouseholdRecord]) -> None:
    asset_vars: list[str] = []
    inc: list[str] = []
    exp: list[str] = []
    for rec in cohort:
        for names, src in ((asset_vars, rec.assets), (inc, rec.income_sources), (exp, rec.expenditure_sources)):
            for k in src:
                if k not in names:
                    names.append(k)
    header = (["id", "x", "y"] + [f"asset.{v}" for v in asset_vars]
              + [f"income.{s}" for s in inc] + [f"expenditure.{s}" for s in exp])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for rec in cohort:
            w.writerow(
                [rec.id, repr(float(rec.geocode[0])), repr(float(rec.geocode[1]))]
                + [rec.assets.get(v) or "" for v in asset_vars]
                + [_fmt_money(rec.income_sources.get(s)) for s in inc]
                + [_fmt_money(rec.expenditure_sources.get(s)) for s in exp]
            )


def read_survey_csv(path, manifest: Mapping[str, Mapping[ImageType, str | None]] | None = None) -> list[HouseholdRecord]:
    """Parse the survey table; columns are ``id, x, y`` then ``asset.*``,
    ``income.*`` and ``expenditure.*``. Empty cells are missing values."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for need in ("id", "x", "y"):
            if need not in cols:
                raise ValidationError(f"{path}: missing column {need!r}")
        unknown = [c for c in cols if c not in ("id", "x", "y") and "." not in c]
        if unknown:
            raise ValidationError(f"{path}: unrecognised columns {unknown}")
        for row in reader:
            assets, income, expend = {}, {}, {}
            for col, cell in row.items():
                kind, _, name = col.partition(".")
                if kind == "asset":
                    assets[name] = cell or None
                elif kind == "income":
                    income[name] = float(cell) if cell else None
                elif kind == "expenditure":
                    expend[name] = float(cell) if cell else None
            hid = row["id"]
            images = dict(manifest.get(hid, {})) if manifest else {}
            records.append(HouseholdRecord(hid, (float(row["x"]), float(row["y"])), assets, income, expend, images))
    check_cohort(records)
    return records


def write_manifest(path, entries: Iterable[tuple[str, ImageType, str | None]]) -> None:
    with open(path, "w") as fh:
        for hid, itype, ref in entries:
            fh.write(json.dumps({"id": hid, "image_type": ImageType(itype).value,
                                 "path": ref, "missing": ref is None}) + "\n")


def read_manifest(path) -> dict[str, dict[ImageType, str | None]]:
    out: dict[str, dict[ImageType, str | None]] = {}
    base = Path(path).parent
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                itype = ImageType(obj["image_type"])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: unknown image type {obj['image_type']!r}") from None
            ref = None if obj.get("missing") else obj["path"]
            if ref is not None and not Path(ref).is_absolute():
                ref = str(base / ref)
            out.setdefault(obj["id"], {})[itype] = ref
    return out
