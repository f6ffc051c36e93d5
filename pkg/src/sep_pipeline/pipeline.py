"""Stage orchestration with a run manifest of input and output hashes.

Every stage writes into its own directory under ``output_dir``. A stage is
skipped when its recorded input hash matches the current one and its files on
disk still match the recorded output hash; otherwise it is rebuilt from
scratch.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import config_hash
from .dataset import (
    IMAGE_TYPES,
    MEASURES,
    PHOTO_TYPES,
    SATELLITE_TYPES,
    ImageType,
    SepMeasures,
    binarize_labels,
    compute_expenditure_sep,
    compute_income_sep,
    impute_assets,
    quartile_stratified_sample,
    read_manifest,
    read_survey_csv,
    train_test_split,
    write_manifest,
    write_survey_csv,
    CohortSplit,
)
from .errors import MissingDependencyError, NumericalError, ValidationError
from .imagery import AugmentPolicy, crop_buffer, percentile_clip, read_png, read_raster, write_png, write_raster
from .mca import first_dimension_scores, fit_mca, indicator_matrix, orient, write_interpretation_report
from .rng import check_seed, substream, subseed
from .synthetic import ASSET_SCHEMA, SyntheticConfig, attach_images, generate_population

log = logging.getLogger(__name__)

STAGES = ("synth", "sep", "split", "preprocess", "train-extractor", "extract", "fit", "explain", "reduce", "report")
DEPENDS = {
    "synth": (),
    "sep": ("synth",),
    "split": ("sep",),
    "preprocess": ("synth",),
    "train-extractor": ("sep", "split", "preprocess"),
    "extract": ("train-extractor",),
    "fit": ("extract",),
    "explain": ("fit",),
    "reduce": ("explain",),
    "report": ("sep", "train-extractor", "fit", "explain", "reduce"),
}
# config sections each stage reads, besides the seed
STAGE_CONFIG = {
    "synth": ("cohort",),
    "sep": ("cohort",),
    "split": ("split",),
    "preprocess": ("preprocess",),
    "train-extractor": ("extractor",),
    "extract": ("extractor", "offtheshelf"),
    "fit": ("regression", "offtheshelf"),
    "explain": ("shap",),
    "reduce": ("regression", "shap", "reduce"),
    "report": (),
}
MANIFEST = "run_manifest.json"
LOCK = ".sep-pipeline.lock"


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: Path) -> str | None:
    """Digest over relative paths and contents of every file below ``root``."""
    if not root.is_dir():
        return None
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(_sha256_file(p).encode())
    return h.hexdigest()


@dataclass
class StageRecord:
    stage: str
    inputs_hash: str
    outputs_hash: str
    wall_time_s: float


class RunManifest:
    def __init__(self, path: Path, cfg_hash: str):
        self.path = path
        self.config_hash = cfg_hash
        self.records: dict[str, StageRecord] = {}
        if path.exists():
            doc = json.loads(path.read_text())
            self.records = {k: StageRecord(**v) for k, v in doc.get("stages", {}).items()}

    def save(self) -> None:
        doc = {"tool_version": __version__, "config_hash": self.config_hash,
               "stages": {k: vars(v) for k, v in sorted(self.records.items())}}
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=1, sort_keys=True))
        tmp.replace(self.path)


class RunLock:
    """Exclusive lock on an output directory; a lock left by a dead process is taken over."""

    def __init__(self, out: Path):
        self.path = out / LOCK

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                try:
                    pid = int(self.path.read_text().strip() or 0)
                except (OSError, ValueError):
                    pid = 0
                if pid and _alive(pid):
                    raise ValidationError(f"{self.path.parent} is in use by process {pid} (lock file {self.path})")
                self.path.unlink(missing_ok=True)
                continue
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
            return self
        raise ValidationError(f"could not acquire {self.path}")

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# -- run context ----------------------------------------------------------------

class Run:
    def __init__(self, cfg: dict, threads: int | None = None):
        self.cfg = cfg
        self.seed = check_seed(cfg["seed"])
        self.out = Path(cfg["output_dir"])
        self.threads = threads

    def dir(self, stage: str) -> Path:
        return self.out / stage

    # cohort inputs
    def cohort_paths(self) -> tuple[Path, Path, Path]:
        c = self.cfg["cohort"]
        if c["source"] == "files":
            return Path(c["survey_csv"]), Path(c["image_manifest"]), Path(c["raster"])
        d = self.dir("synth")
        return d / "survey.csv", d / "image_manifest.jsonl", d / "raster.png"

    def records(self):
        survey, manifest, _ = self.cohort_paths()
        return read_survey_csv(survey, read_manifest(manifest))

    def measures(self) -> dict[str, SepMeasures]:
        with open(self.dir("sep") / "measures.csv", newline="") as fh:
            return {r["id"]: SepMeasures(float(r["assets"]), float(r["expenditure"]), float(r["income"]))
                    for r in csv.DictReader(fh)}

    def split(self) -> CohortSplit:
        return CohortSplit.from_json((self.dir("split") / "split.json").read_text())

    def images(self, itype: ImageType, ids) -> dict[str, np.ndarray]:
        itype = ImageType(itype)
        out = {}
        if itype in SATELLITE_TYPES:
            d = self.dir("preprocess") / itype.value
            for h in ids:
                p = d / f"{h}.png"
                if p.exists():
                    out[h] = read_png(p)
            return out
        _, manifest, _ = self.cohort_paths()
        refs = read_manifest(manifest)
        for h in ids:
            ref = refs.get(h, {}).get(itype)
            if ref is not None:
                out[h] = read_png(ref)
        return out

    def inputs_hash(self, stage: str, manifest: RunManifest) -> str:
        h = hashlib.sha256()
        h.update(stage.encode())
        h.update(str(self.seed).encode())
        h.update(json.dumps({k: self.cfg[k] for k in STAGE_CONFIG[stage]}, sort_keys=True).encode())
        for dep in DEPENDS[stage]:
            rec = manifest.records.get(dep)
            h.update((rec.outputs_hash if rec else "-").encode())
        if stage == "synth" and self.cfg["cohort"]["source"] == "files":
            for p in self.cohort_paths():
                h.update(_sha256_file(p).encode())
                if p.suffix == ".png" and p.with_suffix(".json").exists():
                    h.update(_sha256_file(p.with_suffix(".json")).encode())
        return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text())


# -- stages -----------------------------------------------------------------------

def stage_synth(run: Run, d: Path) -> None:
    c = run.cfg["cohort"]
    if c["source"] == "files":
        survey, manifest, raster = run.cohort_paths()
        _write_json(d / "source.json", {"survey_csv": _sha256_file(survey), "image_manifest": _sha256_file(manifest),
                                        "raster": _sha256_file(raster)})
        return
    scfg = SyntheticConfig(**c["synthetic"])
    records, latent = generate_population(scfg, run.seed, n=c["population"])
    filled = impute_assets(records)
    Z = indicator_matrix([r.assets for r in filled], [r.id for r in filled], ASSET_SCHEMA)
    scores = first_dimension_scores(fit_mca(Z), tuple(c["anchor"]))
    chosen = quartile_stratified_sample(scores, c["per_quartile"], run.seed)
    dropped = set(substream(run.seed, "non_response").choice(chosen, size=c["non_response"], replace=False).tolist())
    kept = [r for r in records if r.id in set(chosen) - dropped]
    cohort = attach_images(kept, latent, scfg, run.seed)
    entries = []
    for itype in PHOTO_TYPES:
        (d / "images" / itype.value).mkdir(parents=True)
        for rec in cohort.records:
            ref = rec.images[itype]
            if ref is not None:
                write_png(d / ref, cohort.photos[itype][rec.id])
            entries.append((rec.id, itype, ref))
    write_manifest(d / "image_manifest.jsonl", entries)
    write_survey_csv(d / "survey.csv", cohort.records)
    write_raster(d / "raster.png", cohort.raster)
    with open(d / "latent.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "latent"])
        for rec in cohort.records:
            w.writerow([rec.id, repr(cohort.latent[rec.id])])
    _write_json(d / "sampling.json", {"population": c["population"], "per_quartile": c["per_quartile"],
                                      "non_response": sorted(dropped), "n_households": len(kept)})


def stage_sep(run: Run, d: Path) -> None:
    from .reporting import exploratory_report

    records = impute_assets(run.records())
    Z = indicator_matrix([r.assets for r in records], [r.id for r in records], ASSET_SCHEMA)
    anchor = tuple(run.cfg["cohort"]["anchor"])
    model = orient(fit_mca(Z), anchor)
    assets = first_dimension_scores(model, anchor)
    write_interpretation_report(model, d / "mca_columns.csv", d / "mca_inertia.json")
    sep = {r.id: SepMeasures(assets[r.id], compute_expenditure_sep(r), compute_income_sep(r)) for r in records}
    with open(d / "measures.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + list(MEASURES))
        for h in sorted(sep):
            w.writerow([h] + [repr(float(v)) for v in sep[h].as_tuple()])
    exploratory_report(sep, d)


def stage_split(run: Run, d: Path) -> None:
    s = run.cfg["split"]
    split = train_test_split(run.measures().keys(), s["n_train"], s["n_test"], run.seed)
    (d / "split.json").write_text(split.to_json())


def stage_preprocess(run: Run, d: Path) -> None:
    p = run.cfg["preprocess"]
    _, _, raster_path = run.cohort_paths()
    raster = percentile_clip(read_raster(raster_path), p["p_low"], p["p_high"])
    records = run.records()
    for itype in SATELLITE_TYPES:
        (d / itype.value).mkdir()
        buffer_m = p["buffers_m"][itype.value]
        for rec in records:
            write_png(d / itype.value / f"{rec.id}.png", crop_buffer(raster, rec.geocode, buffer_m))


def _network_spec(run: Run):
    from .extractor.network import NetworkSpec

    e = run.cfg["extractor"]
    s = e["input_size"]
    return NetworkSpec((s, s, 3), tuple(e["conv_filters"]), (e["feature_dim"],), 3, subseed(run.seed, "network"))


def stage_train_extractor(run: Run, d: Path) -> None:
    from .extractor.checkpoint import save_checkpoint
    from .extractor.training import TrainConfig, train_extractor, write_training_log

    e = run.cfg["extractor"]
    sep, split = run.measures(), run.split()
    labels = binarize_labels(sep, split.train_ids)
    tcfg = TrainConfig(e["epochs"], e["batch_size"], float(e["lr"]), float(e["momentum"]),
                       AugmentPolicy(float(e["flip_prob"]), float(e["max_rotation"]), float(e["max_translation"]),
                                     e["rot90"]), e["schedule"])
    spec = _network_spec(run)
    summary = {"label_thresholds": labels.thresholds, "accuracy": {}}
    for itype in IMAGE_TYPES:
        t0 = time.perf_counter()
        images = run.images(itype, split.train_ids + split.test_ids)
        params, history = train_extractor(images, labels, split.train_ids, split.test_ids, spec, tcfg,
                                          seed=subseed(run.seed, "train", itype.value))
        save_checkpoint(d / f"{itype.value}.ckpt", params, e["epochs"])
        write_training_log(d / f"{itype.value}_log.csv", history)
        final = {row["split"]: {m: row[f"acc_{m}"] for m in MEASURES} for row in history[-2:]}
        summary["accuracy"][itype.value] = final
        log.info("trained %s in %.1fs: test acc %s", itype.value, time.perf_counter() - t0, final.get("test"))
    _write_json(d / "accuracy.json", summary)


def _save_store(path: Path, ids, blocks: dict) -> None:
    np.savez(path, ids=np.array(ids), **{t.value: b for t, b in blocks.items()})


def load_store(path: Path):
    from .tabular.features import FeatureStore

    with np.load(path) as z:
        ids = tuple(str(h) for h in z["ids"])
        blocks = {t: z[t.value].astype(np.float64) for t in IMAGE_TYPES if t.value in z.files}
    return FeatureStore(ids, blocks)


def stage_extract(run: Run, d: Path) -> None:
    from .extractor.checkpoint import load_checkpoint
    from .extractor.training import extract_feature_matrix, offtheshelf_network
    from .tabular.features import COMPLETE, assemble_feature_table, write_feature_csv

    split = run.split()
    ids = sorted(split.train_ids + split.test_ids)
    tuned, frozen_blocks = {}, {}
    o = run.cfg["offtheshelf"]
    frozen = None
    if o["enabled"]:
        spec = _network_spec(run)
        frozen = offtheshelf_network(spec.input_shape, spec.conv_filters, o["width"], subseed(run.seed, "offtheshelf"))
    for itype in IMAGE_TYPES:
        params, _ = load_checkpoint(run.dir("train-extractor") / f"{itype.value}.ckpt")
        images = run.images(itype, ids)
        tuned[itype] = extract_feature_matrix(params, images, ids)
        if frozen is not None:
            frozen_blocks[itype] = extract_feature_matrix(frozen, images, ids).astype(np.float32)
    _save_store(d / "finetuned.npz", ids, tuned)
    store = load_store(d / "finetuned.npz")
    write_feature_csv(d / "finetuned.csv", assemble_feature_table(store, COMPLETE, {h: 0.0 for h in ids}))
    if frozen is not None:
        _save_store(d / "offtheshelf.npz", ids, frozen_blocks)


def _outcome(sep, measure):
    return {h: getattr(s, measure) for h, s in sep.items()}


def _distributions(run: Run, algorithm: str) -> dict:
    from .tabular.search import DEFAULT_DISTRIBUTIONS

    return run.cfg["regression"]["distributions"].get(algorithm, DEFAULT_DISTRIBUTIONS[algorithm])


def _fit_one(run: Run, d: Path, store, sep, split, measure, pset, algorithm, path_kind, select=False):
    from .tabular.features import assemble_feature_table
    from .tabular.search import evaluate, randomized_search_cv, save_pipeline

    r = run.cfg["regression"]
    outcome = _outcome(sep, measure)
    train = assemble_feature_table(store, pset, outcome, split.train_ids)
    test = assemble_feature_table(store, pset, outcome, split.test_ids)
    dists = dict(_distributions(run, algorithm))
    if select:
        dists["k"] = run.cfg["offtheshelf"]["k"]
    t0 = time.perf_counter()
    fp = randomized_search_cv(train, algorithm, dists, r["n_iter"], r["k_folds"],
                              subseed(run.seed, path_kind, measure, pset.name, algorithm), select, run.threads)
    ev = evaluate(fp, test)
    name = f"{path_kind}__{measure}__{pset.name}__{algorithm}"
    save_pipeline(d / "models" / f"{name}.json", fp)
    ev.write_predictions(d / "predictions" / f"{name}.csv")
    log.info("%s: rmse %.4g r %s (%.1fs)", name, ev.rmse, ev.pearson, time.perf_counter() - t0)
    return ev.summary(measure=measure, predictor_set=pset.name, algorithm=algorithm, path=path_kind,
                      model=f"models/{name}.json", cv_rmse=fp.cv_score, params=fp.params,
                      n_features=len(train.provenance))


def stage_fit(run: Run, d: Path) -> None:
    from .tabular.features import PredictorSet

    (d / "models").mkdir()
    (d / "predictions").mkdir()
    sep, split = run.measures(), run.split()
    r, o = run.cfg["regression"], run.cfg["offtheshelf"]
    store = load_store(run.dir("extract") / "finetuned.npz")
    results = {"finetuned": [], "offtheshelf": []}
    for measure in MEASURES:
        for name in r["predictor_sets"]:
            for alg in r["algorithms"]:
                results["finetuned"].append(
                    _fit_one(run, d, store, sep, split, measure, PredictorSet.named(name), alg, "finetuned"))
    if o["enabled"]:
        frozen = load_store(run.dir("extract") / "offtheshelf.npz")
        for measure in MEASURES:
            for name in o["predictor_sets"]:
                for alg in o["algorithms"]:
                    results["offtheshelf"].append(_fit_one(run, d, frozen, sep, split, measure,
                                                           PredictorSet.named(name), alg, "offtheshelf", select=True))
    _write_json(d / "results.json", results)
    _write_table(d / "table_models.csv", results["finetuned"] + results["offtheshelf"])


def _write_table(path: Path, rows) -> None:
    cols = ["path", "measure", "predictor_set", "algorithm", "rmse", "pearson", "spearman", "cv_rmse"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([row.get(c) if not isinstance(row.get(c), float) else repr(row[c]) for c in cols])


def _shap_model(run: Run, rows, measure) -> dict:
    choice = run.cfg["shap"]["model"]
    allowed = ("rf", "gbt") if choice == "best_tree" else (choice,)
    cands = [row for row in rows if row["measure"] == measure and row["predictor_set"] == "complete"
             and row["algorithm"] in allowed]
    if not cands:
        raise MissingDependencyError(f"no complete {'/'.join(allowed)} model for {measure}; "
                                     "add it to regression.algorithms and rerun `fit`")
    return min(cands, key=lambda row: (row["rmse"], allowed.index(row["algorithm"])))


def stage_explain(run: Run, d: Path) -> None:
    from .explain import (
        group_by_image,
        rank_image_types,
        ranking_to_json,
        reduced_predictor_set,
        top_bottom_images,
        treeshap_ensemble,
        write_shap_csv,
        write_top_bottom_jsonl,
    )
    from .reporting import plot_shap_boxes
    from .tabular.features import COMPLETE, assemble_feature_table
    from .tabular.search import load_pipeline

    s = run.cfg["shap"]
    sep, split = run.measures(), run.split()
    fit_dir = run.dir("fit")
    rows = _read_json(fit_dir / "results.json")["finetuned"]
    store = load_store(run.dir("extract") / "finetuned.npz")
    all_ids = tuple(split.train_ids) + tuple(split.test_ids)
    shap_rows, rankings, grouped_all, abs_panels = [], {}, {}, {}
    types = None
    for measure in MEASURES:
        chosen = _shap_model(run, rows, measure)
        fp = load_pipeline(fit_dir / chosen["model"])
        outcome = _outcome(sep, measure)
        per_split = {}
        for split_name, ids in (("train", split.train_ids), ("test", split.test_ids)):
            table = assemble_feature_table(store, COMPLETE, outcome, ids)
            X = fp.transform(table.X)
            phi0, phi = treeshap_ensemble(fp.model, X)
            pred = fp.predict(table.X)
            gap = np.abs(phi0 + phi.sum(axis=1) - pred)
            # rounding in deep path recursions grows with the outcome scale
            if gap.max() > 1e-8 * max(1.0, float(np.abs(pred).max())):
                raise NumericalError(f"SHAP local accuracy off by {gap.max():.3g} for {measure}/{split_name}")
            prov = table.provenance if fp.selected is None else tuple(table.provenance[j] for j in fp.selected)
            types, grouped = group_by_image(phi, prov)
            per_split[split_name] = grouped
            for h, g in zip(ids, grouped):
                shap_rows.extend((h, split_name, t, v, measure) for t, v in zip(types, g))
        rankings[measure] = {
            "model": chosen["model"], "algorithm": chosen["algorithm"], "base_value": float(phi0),
            "train": ranking_to_json(rank_image_types(per_split["train"], types)),
            "test": ranking_to_json(rank_image_types(per_split["test"], types)),
        }
        lead = rank_image_types(per_split[s["ranking_split"]], types)
        rankings[measure]["reduced_indoor_type"] = reduced_predictor_set(lead).types[-1].value
        grouped_all[measure] = np.vstack([per_split["train"], per_split["test"]])
        abs_panels[f"{measure} (train)"] = np.abs(per_split["train"])
    write_shap_csv(d / "shap_grouped.csv", shap_rows)
    _write_json(d / "ranking.json", {"ranking_split": s["ranking_split"], "measures": rankings})
    selection = top_bottom_images(grouped_all, all_ids, types, s["top_bottom_n"])
    _, manifest, _ = run.cohort_paths()
    paths = read_manifest(manifest)
    for t in SATELLITE_TYPES:
        for h in all_ids:
            paths.setdefault(h, {})[t] = str(run.dir("preprocess") / t.value / f"{h}.png")
    rel = {h: {t: (os.path.relpath(p, run.out) if p else None) for t, p in m.items()} for h, m in paths.items()}
    write_top_bottom_jsonl(d / "top_bottom.jsonl", selection, rel, grouped_all, all_ids, types)
    plot_shap_boxes(abs_panels, [t.value for t in types], d / "shap_abs_by_type.png")


def stage_reduce(run: Run, d: Path) -> None:
    from .dataset import ImageType as IT
    from .tabular.features import PredictorSet

    (d / "models").mkdir()
    (d / "predictions").mkdir()
    sep, split = run.measures(), run.split()
    alg = run.cfg["reduce"]["algorithm"]
    ranking = _read_json(run.dir("explain") / "ranking.json")["measures"]
    fitted = _read_json(run.dir("fit") / "results.json")["finetuned"]
    store = load_store(run.dir("extract") / "finetuned.npz")
    out = []
    for measure in MEASURES:
        pset = PredictorSet.reduced(IT(ranking[measure]["reduced_indoor_type"]))
        row = _fit_one(run, d, store, sep, split, measure, pset, alg, "reduced")
        row["indoor_type"] = pset.types[-1].value
        row["reference"] = {r["predictor_set"]: {"rmse": r["rmse"], "pearson": r["pearson"], "spearman": r["spearman"]}
                            for r in fitted if r["measure"] == measure and r["algorithm"] == alg}
        out.append(row)
    _write_json(d / "results.json", out)
    _write_table(d / "table_reduced.csv", out)


def stage_report(run: Run, d: Path) -> None:
    from .reporting import plot_predictions, plot_rmse_bars

    fit = _read_json(run.dir("fit") / "results.json")
    ranking = _read_json(run.dir("explain") / "ranking.json")
    reduced = _read_json(run.dir("reduce") / "results.json")
    acc = _read_json(run.dir("train-extractor") / "accuracy.json")
    explore = _read_json(run.dir("sep") / "exploratory.json")
    split = run.split()
    store = load_store(run.dir("extract") / "finetuned.npz")
    report = {
        "tool_version": __version__,
        "config_hash": config_hash(run.cfg),
        "seed": run.seed,
        "cohort": {"n_households": len(split.train_ids) + len(split.test_ids), "n_train": len(split.train_ids),
                   "n_test": len(split.test_ids)},
        "constants": {
            "n_image_types": len(store.blocks),
            "feature_dim": store.feature_dim,
            "complete_width": store.feature_dim * len(store.blocks),
            "k_folds": run.cfg["regression"]["k_folds"],
            "n_fitted_models": len(fit["finetuned"]),
            "n_reduced_models": len(reduced),
            "grouped_shap_per_household": len(ranking["measures"][MEASURES[0]]["train"]),
        },
        "sep": {"stats": explore["stats"], "pearson": explore["pearson"], "spearman": explore["spearman"]},
        "extractor_accuracy": acc["accuracy"],
        "models": fit["finetuned"],
        "offtheshelf": fit["offtheshelf"],
        "shap": ranking,
        "reduced": reduced,
    }
    _write_json(d / "report.json", report)
    _write_table(d / "models.csv", fit["finetuned"] + fit["offtheshelf"] + reduced)
    plot_rmse_bars(fit["finetuned"], d / "rmse.png")
    for row in fit["finetuned"]:
        if row["predictor_set"] == "complete":
            name = Path(row["model"]).stem
            with open(run.dir("fit") / "predictions" / f"{name}.csv", newline="") as fh:
                pts = [(float(r["observed"]), float(r["predicted"])) for r in csv.DictReader(fh)]
            a = np.array(pts)
            plot_predictions(a[:, 0], a[:, 1], name.replace("finetuned__", ""), d / f"scatter_{name}.png")


STAGE_FUNCS: dict[str, Callable[[Run, Path], None]] = {
    "synth": stage_synth, "sep": stage_sep, "split": stage_split, "preprocess": stage_preprocess,
    "train-extractor": stage_train_extractor, "extract": stage_extract, "fit": stage_fit,
    "explain": stage_explain, "reduce": stage_reduce, "report": stage_report,
}


# -- driver -------------------------------------------------------------------------

def _up_to_date(run: Run, manifest: RunManifest, stage: str) -> bool:
    rec = manifest.records.get(stage)
    return (rec is not None and rec.inputs_hash == run.inputs_hash(stage, manifest)
            and rec.outputs_hash == hash_tree(run.dir(stage)))


def run_stage(run: Run, stage: str, manifest: RunManifest, force: bool = False) -> bool:
    """Run one stage if needed; returns True when it actually ran."""
    for dep in DEPENDS[stage]:
        rec = manifest.records.get(dep)
        if rec is None or rec.outputs_hash != hash_tree(run.dir(dep)):
            raise MissingDependencyError(f"stage '{stage}' needs the outputs of '{dep}'; "
                                         f"run `sep-pipeline {dep}` first")
    if not force and _up_to_date(run, manifest, stage):
        log.info("%s: up to date", stage)
        return False
    inputs = run.inputs_hash(stage, manifest)
    d = run.dir(stage)
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    t0 = time.perf_counter()
    log.info("%s: running", stage)
    try:
        STAGE_FUNCS[stage](run, d)
    except BaseException as e:
        manifest.records.pop(stage, None)
        manifest.save()
        if isinstance(e, FloatingPointError):
            raise NumericalError(f"stage '{stage}': {e}") from e
        raise
    manifest.records[stage] = StageRecord(stage, inputs, hash_tree(d), round(time.perf_counter() - t0, 3))
    manifest.save()
    return True


def run_pipeline(cfg: dict, stage: str, force: bool = False, threads: int | None = None) -> list[str]:
    """Run ``stage`` (or every stage for ``"all"``); returns the stages that ran."""
    if stage != "all" and stage not in STAGES:
        raise ValidationError(f"unknown stage {stage!r}; choose from {list(STAGES) + ['all']}")
    run = Run(cfg, threads)
    run.out.mkdir(parents=True, exist_ok=True)
    ran = []
    with RunLock(run.out):
        manifest = RunManifest(run.out / MANIFEST, config_hash(cfg))
        for s in (STAGES if stage == "all" else (stage,)):
            if run_stage(run, s, manifest, force):
                ran.append(s)
    return ran
