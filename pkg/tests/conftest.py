import json
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY_CONFIG = {
    "output_dir": "run",
    "seed": 7,
    "cohort": {"population": 200, "per_quartile": 40, "non_response": 10,
               "synthetic": {"image_size": 16}},
    "split": {"n_train": 110, "n_test": 40},
    "extractor": {"input_size": 16, "conv_filters": [4, 8], "feature_dim": 6, "epochs": 2, "batch_size": 16},
    "regression": {
        "n_iter": 2, "k_folds": 3,
        "distributions": {
            "rf": {"n_trees": {"choice": [10]}, "mtry": {"dist": "uniform", "low": 0.2, "high": 0.5},
                   "min_leaf": {"dist": "int", "low": 1, "high": 5}},
            "gbt": {"n_rounds": {"choice": [10]}, "eta": {"dist": "loguniform", "low": 0.05, "high": 0.3},
                    "reg_lambda": {"dist": "loguniform", "low": 0.01, "high": 1},
                    "max_depth": {"choice": [2, 3]}},
        },
    },
    "offtheshelf": {"width": 16, "k": {"dist": "logint", "low": 5, "high": 50}},
}


def write_config(directory: Path, **overrides) -> Path:
    cfg = json.loads(json.dumps(TINY_CONFIG))
    cfg.update(overrides)
    path = Path(directory) / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def tiny_config(tmp_path):
    return write_config(tmp_path)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """One complete pipeline run on the tiny cohort, shared by read-only tests."""
    from sep_pipeline.config import validate_config
    from sep_pipeline.pipeline import run_pipeline

    d = tmp_path_factory.mktemp("tiny")
    cfg = validate_config(write_config(d))
    run_pipeline(cfg, "all")
    return Path(cfg["output_dir"]), cfg


# -- acceptance summary: one line per criterion ------------------------------------

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"title": mark.args[1], "ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = "; ".join(dict.fromkeys(e["details"]))
        terminalreporter.write_line(f"criterion {n}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
                                    + (f"  [{detail}]" if detail else ""))
