"""JSON pipeline configuration: schema, defaults and validation.

Validation collects every problem before failing, and unknown keys are
errors so that a typo never silently falls back to a default.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ValidationError
from .rng import MAX_SEED
from .synthetic import DEFAULT_ANCHOR, SyntheticConfig
from .tabular.features import STANDARD_SETS
from .tabular.search import ALGORITHMS, parse_distribution


class ConfigError(ValidationError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__(f"{len(errors)} configuration error(s):\n  " + "\n  ".join(errors))


@dataclass(frozen=True)
class Field:
    kind: Any
    default: Any = None
    required: bool = False
    check: Callable[[Any], str | None] | None = None
    nullable: bool = False


def _int_min(lo):
    return lambda v: None if v >= lo else f"must be >= {lo}"


def _range(lo, hi):
    return lambda v: None if lo <= v <= hi else f"must lie in [{lo}, {hi}]"


def _positive(v):
    return None if v > 0 else "must be positive"


def _one_of(*choices):
    return lambda v: None if v in choices else f"must be one of {list(choices)}"


def _subset_of(choices):
    def check(v):
        if not v:
            return "must not be empty"
        bad = [x for x in v if x not in choices]
        if bad:
            return f"unknown entries {bad}; choose from {list(choices)}"
        if len(set(v)) != len(v):
            return "has duplicate entries"
        return None
    return check


def _int_list(v):
    if not v or any(not isinstance(x, int) or isinstance(x, bool) or x < 1 for x in v):
        return "must be a non-empty list of positive integers"
    return None


def _synthetic(v):
    try:
        SyntheticConfig(**v)
    except TypeError as e:
        return f"bad synthetic generator option: {e}"
    except ValueError as e:
        return str(e)
    return None


def _anchor(v):
    return None if len(v) == 2 and all(isinstance(s, str) for s in v) else "must be [variable, category]"


def _buffers(v):
    if set(v) != {"satellite_25m", "satellite_100m"}:
        return "needs exactly the keys satellite_25m and satellite_100m"
    if any(not isinstance(b, (int, float)) or b <= 0 for b in v.values()):
        return "buffer sizes must be positive numbers"
    return None


def _distributions(v):
    for alg, dists in v.items():
        if alg not in ALGORITHMS:
            return f"unknown algorithm {alg!r}"
        if not isinstance(dists, dict):
            return f"{alg}: expected an object of parameter distributions"
        for name, d in dists.items():
            try:
                parse_distribution(d)
            except ValidationError as e:
                return f"{alg}.{name}: {e}"
    return None


def _dist(v):
    try:
        parse_distribution(v)
    except ValidationError as e:
        return str(e)
    return None


NUMBER = (int, float)

SCHEMA: dict[str, Any] = {
    "output_dir": Field(str, required=True),
    "seed": Field(int, required=True, check=_range(0, MAX_SEED)),
    "cohort": {
        "source": Field(str, "synthetic", check=_one_of("synthetic", "files")),
        "survey_csv": Field(str, None, nullable=True),
        "image_manifest": Field(str, None, nullable=True),
        "raster": Field(str, None, nullable=True),
        "population": Field(int, 1300, check=_int_min(4)),
        "per_quartile": Field(int, 250, check=_int_min(1)),
        "non_response": Field(int, 25, check=_int_min(0)),
        "synthetic": Field(dict, {}, check=_synthetic),
        "anchor": Field(list, list(DEFAULT_ANCHOR), check=_anchor),
    },
    "split": {
        "n_train": Field(int, 800, check=_int_min(1)),
        "n_test": Field(int, 175, check=_int_min(1)),
    },
    "preprocess": {
        "p_low": Field(NUMBER, 1.0, check=_range(0, 100)),
        "p_high": Field(NUMBER, 99.0, check=_range(0, 100)),
        "buffers_m": Field(dict, {"satellite_25m": 25.0, "satellite_100m": 100.0}, check=_buffers),
    },
    "extractor": {
        "input_size": Field(int, 64, check=_int_min(8)),
        "conv_filters": Field(list, [8, 16, 32], check=_int_list),
        "feature_dim": Field(int, 30, check=_int_min(1)),
        "epochs": Field(int, 50, check=_int_min(1)),
        "batch_size": Field(int, 32, check=_int_min(1)),
        "lr": Field(NUMBER, 0.01, check=_positive),
        "momentum": Field(NUMBER, 0.9, check=_range(0, 0.999999)),
        "schedule": Field(str, "cosine", check=_one_of("cosine", "constant")),
        "flip_prob": Field(NUMBER, 0.5, check=_range(0, 1)),
        "max_rotation": Field(NUMBER, 10.0, check=_range(0, 180)),
        "max_translation": Field(NUMBER, 0.05, check=_range(0, 0.5)),
        "rot90": Field(bool, False),
    },
    "regression": {
        "predictor_sets": Field(list, ["satellite", "outdoor", "complete"], check=_subset_of(tuple(STANDARD_SETS))),
        "algorithms": Field(list, list(ALGORITHMS), check=_subset_of(ALGORITHMS)),
        "n_iter": Field(int, 50, check=_int_min(1)),
        "k_folds": Field(int, 10, check=_int_min(2)),
        "distributions": Field(dict, {}, check=_distributions),
    },
    "offtheshelf": {
        "enabled": Field(bool, True),
        "width": Field(int, 512, check=_int_min(1)),
        "predictor_sets": Field(list, ["complete"], check=_subset_of(tuple(STANDARD_SETS))),
        "algorithms": Field(list, ["rf"], check=_subset_of(ALGORITHMS)),
        "k": Field(dict, {"dist": "logint", "low": 10, "high": "p"}, check=_dist),
    },
    "shap": {
        "model": Field(str, "best_tree", check=_one_of("best_tree", "rf", "gbt")),
        "ranking_split": Field(str, "train", check=_one_of("train", "test")),
        "top_bottom_n": Field(int, 5, check=_int_min(1)),
    },
    "reduce": {
        "algorithm": Field(str, "rf", check=_one_of(*ALGORITHMS)),
    },
}


def _type_ok(kind, v) -> bool:
    if kind is int or kind == int:
        return isinstance(v, int) and not isinstance(v, bool)
    if kind == NUMBER:
        return isinstance(v, (int, float)) and not isinstance(v, bool)
    return isinstance(v, kind)


_TYPE_NAMES = {int: "an integer", str: "a string", bool: "a boolean", list: "a list", dict: "an object",
               NUMBER: "a number"}


def _walk(schema: dict, data: Any, path: str, errors: list[str]) -> dict:
    if not isinstance(data, dict):
        errors.append(f"{path or '<root>'}: expected an object")
        data = {}
    out = {}
    for key in data:
        if key not in schema:
            errors.append(f"{path}{key}: unknown key")
    for key, spec in schema.items():
        where = f"{path}{key}"
        if isinstance(spec, dict):
            out[key] = _walk(spec, data.get(key, {}), where + ".", errors)
            continue
        if key not in data:
            if spec.required:
                errors.append(f"{where}: required")
            out[key] = copy.deepcopy(spec.default)
            continue
        v = data[key]
        if v is None and spec.nullable:
            out[key] = None
            continue
        if not _type_ok(spec.kind, v):
            errors.append(f"{where}: expected {_TYPE_NAMES.get(spec.kind, spec.kind)}, got {json.dumps(v)}")
            out[key] = copy.deepcopy(spec.default)
            continue
        if spec.check is not None:
            msg = spec.check(v)
            if msg:
                errors.append(f"{where}: {msg}")
        out[key] = v
    return out


def _cross_checks(cfg: dict, base: Path, errors: list[str]) -> None:
    c = cfg["cohort"]
    if c["source"] == "files":
        for key in ("survey_csv", "image_manifest", "raster"):
            if c[key] is None:
                errors.append(f"cohort.{key}: required when cohort.source is 'files'")
            elif not (base / c[key]).exists():
                errors.append(f"cohort.{key}: file {c[key]!r} does not exist")
    else:
        size = 4 * c["per_quartile"] - c["non_response"]
        if 4 * c["per_quartile"] > c["population"]:
            errors.append(f"cohort.per_quartile: 4 x {c['per_quartile']} exceeds the population of {c['population']}")
        if size < 1:
            errors.append("cohort.non_response: leaves no households")
        elif cfg["split"]["n_train"] + cfg["split"]["n_test"] > size:
            errors.append(f"split: {cfg['split']['n_train']} + {cfg['split']['n_test']} exceeds the cohort "
                          f"size of {size}")
    p = cfg["preprocess"]
    if isinstance(p["p_low"], (int, float)) and isinstance(p["p_high"], (int, float)) and p["p_low"] >= p["p_high"]:
        errors.append("preprocess: p_low must be below p_high")


def validate_config(source, base_dir=None) -> dict:
    """Parse a JSON file (path) or mapping into a full config with defaults, or raise ConfigError."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            data = json.loads(path.read_text())
        except OSError as e:
            raise ConfigError([f"cannot read {path}: {e.strerror}"]) from None
        except json.JSONDecodeError as e:
            raise ConfigError([f"{path}: invalid JSON ({e.msg} at line {e.lineno})"]) from None
        base = Path(base_dir) if base_dir else path.parent
    else:
        data = source
        base = Path(base_dir) if base_dir else Path.cwd()
    errors: list[str] = []
    cfg = _walk(SCHEMA, data, "", errors)
    if not errors:
        _cross_checks(cfg, base, errors)
    if errors:
        raise ConfigError(errors)
    cfg["output_dir"] = str((base / cfg["output_dir"]).resolve())
    for key in ("survey_csv", "image_manifest", "raster"):
        if cfg["cohort"][key] is not None:
            cfg["cohort"][key] = str((base / cfg["cohort"][key]).resolve())
    return cfg


def config_hash(cfg: dict) -> str:
    """Digest of everything that influences results (the output location does not)."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def section_hash(cfg: dict, *keys: str) -> str:
    body = {k: cfg[k] for k in keys}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
