"""Acceptance suite: one test group per criterion, summarised at the end of the pytest run."""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import write_config
from sep_pipeline.config import validate_config
from sep_pipeline.dataset import IMAGE_TYPES, INDOOR_TYPES, MEASURES
from sep_pipeline.explain import brute_force_shap, treeshap_ensemble, treeshap_tree
from sep_pipeline.extractor.network import NetworkSpec, build_network
from sep_pipeline.mca import fit_mca, indicator_matrix
from sep_pipeline.pipeline import run_pipeline
from sep_pipeline.tabular.features import COMPLETE
from sep_pipeline.tabular.linear import elasticnet_fit
from sep_pipeline.tabular.metrics import pearson, rmse, spearman
from sep_pipeline.tabular.search import DEFAULT_K_FOLDS
from test_linear import ols, problem
from test_mca import mca_oracle, random_table
from test_metrics import avg_ranks, pearson_loop
from test_network import finite_difference_check
from treegen import random_gbt, random_tree

ACCEPTANCE_CONFIG = Path(__file__).parents[1] / "configs" / "acceptance.json"
RUNTIME_BUDGET_S = 15 * 60


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# -- 1 -------------------------------------------------------------------------------

@criterion(1, "MCA singular values match eig(S^T S)")
def test_c1_mca_oracle(record_property):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(4, 11))
        n_vars = int(rng.integers(2, 5))
        rows = random_table(rng, n, n_vars, max_cats=8 // n_vars)
        Z = indicator_matrix(rows)
        assert Z.J <= 8
        model = fit_mca(Z)
        _, lam = mca_oracle(Z.Z.astype(float))
        k = len(model.singular_values)
        worst = max(worst, np.max(np.abs(model.singular_values**2 - lam[:k])), np.max(np.abs(lam[k:]), initial=0))
        assert abs(model.inertia_shares.sum() - 1.0) <= 1e-10
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max |dlambda| {worst:.1e}, {elapsed:.2f}s")
    assert worst <= 1e-10
    assert elapsed < 5


# -- 2 -------------------------------------------------------------------------------

@criterion(2, "CNN analytic gradients match central differences")
def test_c2_gradient_check(record_property):
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for seed, spec in enumerate([NetworkSpec((6, 6, 2), (3, 2), (4, 3), seed=11),
                                 NetworkSpec((8, 8, 3), (2, 3), (5,), seed=12)]):
        params = build_network(spec, np.float64)
        rng = np.random.default_rng(seed)
        for k in params.weights:
            if k.endswith(".b"):
                params.weights[k] += 0.1 * rng.normal(size=params.weights[k].shape)
        x = rng.random((3,) + spec.input_shape)
        y = rng.random((3, 3)) < 0.5
        w, c = finite_difference_check(params, x, y, h=1e-5)
        worst, checked = max(worst, w), checked + c
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {worst:.1e} over {checked} params, {elapsed:.1f}s")
    assert checked >= 200
    assert worst < 1e-4
    assert elapsed < 30


# -- 3 -------------------------------------------------------------------------------

@criterion(3, "TreeSHAP matches coalition enumeration")
def test_c3_treeshap_oracle(record_property):
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    worst_phi = worst_acc = 0.0
    for _ in range(100):
        p = int(rng.integers(1, 13))
        tree = random_tree(rng, p, int(rng.integers(1, 5)))
        assert tree.max_depth <= 4
        for x in rng.normal(size=(3, p)):
            _, brute = brute_force_shap(tree, x)
            phi = treeshap_tree(tree, x)
            worst_phi = max(worst_phi, np.max(np.abs(phi - brute)))
            worst_acc = max(worst_acc, abs(tree.expected_value() + phi.sum() - tree.predict(x[None])[0]))
    for _ in range(20):
        model, X = random_gbt(rng, int(rng.integers(1, 6)), n_rounds=3)
        phi0, phi = treeshap_ensemble(model, X[:5])
        pred = model.predict(X[:5])
        for k in range(5):
            _, brute = brute_force_shap(model, X[k])
            worst_phi = max(worst_phi, np.max(np.abs(phi[k] - brute)))
            worst_acc = max(worst_acc, abs(phi0 + phi[k].sum() - pred[k]))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max |dphi| {worst_phi:.1e}, local accuracy {worst_acc:.1e}, {elapsed:.1f}s")
    assert worst_phi < 1e-10
    assert worst_acc <= 1e-8
    assert elapsed < 60


# -- 4 -------------------------------------------------------------------------------

@criterion(4, "elastic net reduces to OLS and meets KKT")
def test_c4_elastic_net(record_property):
    X, y = problem(7, n=120, p=8)
    b0, b = ols(X, y)
    m = elasticnet_fit(X, y, alpha=0.0, tol=1e-12, max_iter=100000)
    ols_gap = max(np.max(np.abs(m.coef - b)), abs(m.intercept - b0))
    rng = np.random.default_rng(404)
    tol, worst = 1e-8, 0.0
    for k in range(20):
        Xk, yk = problem(500 + k, n=80, p=10)
        fit = elasticnet_fit(Xk, yk, alpha=float(10 ** rng.uniform(-3, 0.5)), l1_ratio=float(rng.uniform()), tol=tol)
        assert fit.converged
        worst = max(worst, fit.kkt_residual(Xk, yk))
    record_property("detail", f"OLS gap {ols_gap:.1e}, max KKT {worst:.1e} (tol {tol:g})")
    assert ols_gap <= 1e-6
    assert worst <= 10 * tol


# -- end-to-end run on the full synthetic cohort ----------------------------------------

@pytest.fixture(scope="module")
def acceptance_run(tmp_path_factory):
    raw = json.loads(ACCEPTANCE_CONFIG.read_text())
    raw["output_dir"] = str(tmp_path_factory.mktemp("acceptance") / "run")
    cfg = validate_config(raw, base_dir=ACCEPTANCE_CONFIG.parent)
    t0 = time.perf_counter()
    run_pipeline(cfg, "all")
    elapsed = time.perf_counter() - t0
    report = json.loads((Path(cfg["output_dir"]) / "report" / "report.json").read_text())
    return report, cfg, elapsed


def _row(report, measure, pset, alg="rf", key="models"):
    (row,) = [r for r in report[key] if r["measure"] == measure and r["predictor_set"] == pset
              and r["algorithm"] == alg]
    return row


# -- 5 -------------------------------------------------------------------------------

@pytest.mark.slow
@criterion(5, "structural constants")
def test_c5_structural_constants(acceptance_run, record_property):
    report, cfg, _ = acceptance_run
    c = report["constants"]
    record_property("detail", f"{c['n_image_types']} types, width {c['complete_width']}, "
                              f"{report['cohort']['n_train']}/{report['cohort']['n_test']}, "
                              f"{c['n_fitted_models']} models, {c['k_folds']} folds, "
                              f"{c['grouped_shap_per_household']} grouped SHAP")
    assert len(IMAGE_TYPES) == 13 and len(COMPLETE.types) == 13
    assert c["n_image_types"] == 13
    assert c["complete_width"] == 390
    assert (report["cohort"]["n_train"], report["cohort"]["n_test"]) == (800, 175)
    assert c["n_fitted_models"] == 27
    assert DEFAULT_K_FOLDS == 10 and c["k_folds"] == 10
    assert c["grouped_shap_per_household"] == 13


# -- 6 -------------------------------------------------------------------------------

@pytest.mark.slow
@criterion(6, "planted-signal end-to-end run")
def test_c6a_complete_rf_assets(acceptance_run, record_property):
    report, _, _ = acceptance_run
    r = _row(report, "assets", "complete")["pearson"]
    record_property("detail", f"assets complete RF r {r:.3f}")
    assert r >= 0.75


@pytest.mark.slow
@criterion(6, "planted-signal end-to-end run")
def test_c6b_rmse_ordering(acceptance_run, record_property):
    report, _, _ = acceptance_run
    notes = []
    for measure in MEASURES:
        sat, out, comp = (_row(report, measure, s)["rmse"] for s in ("satellite", "outdoor", "complete"))
        (red,) = [r["rmse"] for r in report["reduced"] if r["measure"] == measure]
        notes.append(f"{measure} reduced/complete {red / comp:.3f}")
        assert sat > out > comp, (measure, sat, out, comp)
        assert red <= 1.05 * comp, (measure, red, comp)
    record_property("detail", ", ".join(notes))


@pytest.mark.slow
@criterion(6, "planted-signal end-to-end run")
def test_c6c_planted_indoor_type_leads(acceptance_run, record_property):
    report, _, _ = acceptance_run
    for measure in MEASURES:
        ranking = report["shap"]["measures"][measure]["train"]
        indoor = [r["image_type"] for r in ranking if r["image_type"] in {t.value for t in INDOOR_TYPES}]
        assert indoor[0] == "light_source", (measure, indoor[:3])
    record_property("detail", "light_source leads indoor types for every measure")


@pytest.mark.slow
@criterion(6, "planted-signal end-to-end run")
def test_c6_runtime(acceptance_run, record_property):
    _, _, elapsed = acceptance_run
    record_property("detail", f"run all {elapsed / 60:.1f} min")
    assert elapsed < RUNTIME_BUDGET_S


# -- 7 -------------------------------------------------------------------------------

@pytest.mark.slow
@criterion(7, "off-the-shelf path close to fine-tuned")
def test_c7_offtheshelf(acceptance_run, record_property):
    report, _, _ = acceptance_run
    gaps = {}
    for measure in MEASURES:
        tuned = _row(report, measure, "complete")["pearson"]
        frozen = _row(report, measure, "complete", key="offtheshelf")["pearson"]
        gaps[measure] = tuned - frozen
        assert abs(tuned - frozen) <= 0.1, (measure, tuned, frozen)
    record_property("detail", ", ".join(f"{m} dr {g:+.3f}" for m, g in gaps.items()))


# -- 8 -------------------------------------------------------------------------------

@criterion(8, "two full runs give byte-identical report JSON")
def test_c8_determinism(tmp_path, record_property):
    reports = []
    for name in ("first", "second"):
        d = tmp_path / name
        d.mkdir()
        cfg = validate_config(write_config(d))
        run_pipeline(cfg, "all")
        reports.append((Path(cfg["output_dir"]) / "report" / "report.json").read_bytes())
    record_property("detail", f"{len(reports[0])} bytes")
    assert reports[0] == reports[1]


# -- 9 -------------------------------------------------------------------------------

@criterion(9, "metric oracles")
def test_c9_metric_oracles(record_property):
    rng = np.random.default_rng(909)
    worst = 0.0
    for k in range(1000):
        n = int(rng.integers(3, 40))
        a, b = rng.normal(size=n), rng.normal(size=n)
        if k % 2:
            # coarse rounding forces tied ranks
            a, b = np.round(a), np.round(b * 2) / 2
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            a[0], b[0] = a[0] + 1, b[0] - 1
        direct = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)) / n)
        worst = max(worst, abs(rmse(a, b) - direct), abs(pearson(a, b) - pearson_loop(list(a), list(b))),
                    abs(spearman(a, b) - pearson_loop(avg_ranks(list(a)), avg_ranks(list(b)))))
    record_property("detail", f"max deviation {worst:.1e}")
    assert worst <= 1e-12
