"""End-to-end experiments: simulate, extract, seed, co-train, evaluate.

Every entry point is a pure function of the scenario configuration: all
randomness derives from the scenario seed, artifacts land in a run
directory named by the config hash, and rerunning a scenario reproduces
report files byte for byte.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import jsonschema

from . import cnn as cnn_mod
from . import forest as forest_mod
from . import metrics as metrics_mod
from . import pipeline as pipe
from .config import Scenario, write_scenario
from .errors import ConfigError, DataError
from .features import (
    FEATURE_NAMES,
    bus_rush_hour_trips,
    extract_features,
    write_features_csv,
)
from .images import build_stack, write_timg
from .pipeline import TargetBundle
from .simulate import (
    NoiseSpec,
    domain_shift,
    perturb,
    simulate_fleet,
    write_truth_csv,
)
from .traj import write_trace_csv
from .util import derive_seed

SCHEMA_VERSION = 1

# The five shared-feature groups used by the leave-one-feature-out ablation.
FEATURE_GROUPS = {
    "dist_mean": (0,),
    "dist_var": (1,),
    "cov_mean": (2, 3, 4, 5),
    "cov_var": (6, 7, 8, 9),
    "cov_similarity": (10, 11, 12, 13, 14),
}

_METRICS_SCHEMA = {
    "type": "object",
    "required": ["auc", "accuracy", "top_k_precision", "confusion"],
    "properties": {
        "auc": {"type": "number", "minimum": 0, "maximum": 1},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "top_k_precision": {
            "type": "object",
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "confusion": {
            "type": "object",
            "required": ["tp", "fp", "tn", "fn"],
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
    },
}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "required": [
        "schema_version",
        "kind",
        "config_hash",
        "seed",
        "holdout",
        "stage1",
        "final",
        "cotrain",
    ],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "kind": {"const": "experiment"},
        "config_hash": {"type": "string"},
        "seed": {"type": "integer"},
        "holdout": {
            "type": "object",
            "required": ["size", "positives"],
        },
        "stage1": _METRICS_SCHEMA,
        "final": _METRICS_SCHEMA,
        "cotrain": {
            "type": "object",
            "required": ["iterations", "stalled", "added_per_iteration", "pool"],
        },
    },
}

ABLATION_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "kind", "config_hash", "seed", "baseline", "groups"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "kind": {"const": "ablation"},
        "baseline": {"type": "object", "required": ["top_k_precision"]},
        "groups": {"type": "object"},
    },
}

NOISE_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "kind", "config_hash", "seed", "settings"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "kind": {"const": "noise_sweep"},
        "settings": {"type": "array"},
    },
}

_SCHEMAS = {
    "experiment": EXPERIMENT_SCHEMA,
    "ablation": ABLATION_SCHEMA,
    "noise_sweep": NOISE_SCHEMA,
}


def validate_report(report: dict) -> None:
    schema = _SCHEMAS.get(report.get("kind"))
    if schema is None:
        raise ConfigError(f"unknown report kind {report.get('kind')!r}")
    try:
        jsonschema.validate(report, schema)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"report failed schema validation: {exc.message}") from None


def write_report(path, report: dict) -> None:
    """Schema-validate, then write canonical (sorted, repr-float) JSON."""
    validate_report(report)
    with open(path, "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")


@dataclass
class PreparedData:
    """Everything the pipeline stages consume, simulated and extracted once."""

    scenario: Scenario
    source_trajs: dict  # vid -> Trajectory (unperturbed)
    source_truth: dict  # vid -> taxi|bus
    target_truth: dict  # vid -> archetype
    bundle: TargetBundle  # all target candidates
    labels: dict  # vid -> 0/1 ground truth
    eval_ids: list  # held out of co-training
    pool_ids: list  # co-training candidates


def extract_source_features(source_trajs, source_truth, scn: Scenario, noise: NoiseSpec = None):
    """Source feature matrix with bus rush-hour preprocessing.

    Spatio-temporal noise, when given, perturbs the taxi traces before
    extraction (buses are simulated from route knowledge and stay clean).
    Returns (ids, X, y) with taxi -> 1, bus -> 0.
    """
    grid = scn.grid()
    fcfg = scn.feature_config()
    ids, rows, y = [], [], []
    for vid in sorted(source_trajs):
        t = source_trajs[vid]
        kind = source_truth[vid]
        if kind == "taxi" and noise is not None:
            t = perturb(t, noise)
        if kind == "bus":
            t = bus_rush_hour_trips(
                t, fcfg.tz_offset_hours, fcfg.rush_morning, fcfg.rush_evening
            )
        vec = extract_features(t, grid, fcfg)
        ids.append(vid)
        rows.append(vec.to_array())
        y.append(1 if kind == "taxi" else 0)
    return ids, np.array(rows), np.array(y, dtype=np.int64)


def prepare_data(scn: Scenario, run_dir: Path = None) -> PreparedData:
    """Simulate both domains and extract target features and image stacks."""
    seed = scn.seed
    target_city = scn.city(seed=derive_seed(seed, "city"))
    source_city = domain_shift(
        target_city, scn["source.shift_strength"], seed=derive_seed(seed, "shift")
    )
    source_trajs, source_truth = simulate_fleet(
        source_city,
        scn.source_counts(),
        days=scn["days"],
        sampling_period_s=scn["sampling_period_s"],
        seed=derive_seed(seed, "source-fleet"),
    )
    source_trajs = {t.vehicle_id: t for t in source_trajs}
    target_list, target_truth = simulate_fleet(
        target_city,
        scn.target_counts(),
        days=scn["days"],
        sampling_period_s=scn["sampling_period_s"],
        seed=derive_seed(seed, "target-fleet"),
    )
    target_trajs = {t.vehicle_id: t for t in target_list}

    grid = scn.grid()
    fcfg = scn.feature_config()
    k = scn["image.days"]
    ids = sorted(target_trajs)
    rows, stacks = [], []
    for vid in ids:
        t = target_trajs[vid]
        rows.append(extract_features(t, grid, fcfg).to_array())
        stacks.append(
            build_stack(
                t,
                grid,
                k=k,
                base_day=0,
                threshold_s=scn["image.threshold_s"],
                tz_offset_hours=fcfg.tz_offset_hours,
                gap_cap_s=fcfg.gap_cap_s,
            )
        )
    bundle = TargetBundle(ids=ids, X=np.array(rows), stacks=stacks)
    labels = {vid: 1 if target_truth[vid] == "ridesourcing" else 0 for vid in ids}

    n_eval = max(2, int(round(scn["eval.holdout_fraction"] * len(ids))))
    rng = np.random.default_rng(derive_seed(seed, "holdout"))
    perm = rng.permutation(len(ids))
    eval_ids = sorted(ids[i] for i in perm[:n_eval])
    pool_ids = sorted(ids[i] for i in perm[n_eval:])

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        write_truth_csv(run_dir / "source_truth.csv", source_truth)
        write_truth_csv(run_dir / "target_truth.csv", target_truth)
        if scn["io.write_traces"]:
            write_trace_csv(
                run_dir / "source_traces.csv",
                [source_trajs[v] for v in sorted(source_trajs)],
            )
            write_trace_csv(
                run_dir / "target_traces.csv", [target_trajs[v] for v in ids]
            )
        feature_rows = []
        for i, vid in enumerate(ids):
            from .features import SharedFeatureVector

            feature_rows.append(
                (vid, SharedFeatureVector.from_array(bundle.X[i]), "unknown")
            )
        write_features_csv(run_dir / "target_features.csv", feature_rows)
        image_dir = run_dir / "images"
        image_dir.mkdir(exist_ok=True)
        for vid, stack in zip(ids, stacks):
            write_timg(image_dir / f"{vid}.timg", stack)

    return PreparedData(
        scenario=scn,
        source_trajs=source_trajs,
        source_truth=source_truth,
        target_truth=target_truth,
        bundle=bundle,
        labels=labels,
        eval_ids=eval_ids,
        pool_ids=pool_ids,
    )


def _metric_block(scn: Scenario, ids, scores, labels) -> dict:
    y = np.array([labels[v] for v in ids], dtype=np.int64)
    top_k = {
        f"{k:g}": float(metrics_mod.top_k_precision(scores, y, k, ids=np.array(ids)))
        for k in scn["eval.top_k"]
    }
    return {
        "auc": float(metrics_mod.auc(scores, y)),
        "accuracy": float(metrics_mod.accuracy(scores, y)),
        "top_k_precision": top_k,
        "confusion": metrics_mod.confusion_counts(scores, y),
    }


def _write_scores_csv(path, ids, truth, labels, columns: dict) -> None:
    names = list(columns)
    with open(path, "w", newline="") as fh:
        import csv

        writer = csv.writer(fh)
        writer.writerow(["vehicle_id", "archetype", "truth"] + names)
        for i, vid in enumerate(ids):
            writer.writerow(
                [vid, truth[vid], labels[vid]]
                + [f"{columns[name][i]:.9g}" for name in names]
            )


def run_experiment(scn: Scenario, out_dir) -> tuple:
    """Full pipeline on one scenario; returns (report dict, run directory)."""
    out_dir = Path(out_dir)
    run_dir = out_dir / f"run-{scn.hash[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_scenario(run_dir / "config.txt", scn)

    data = prepare_data(scn, run_dir=run_dir)
    src_ids, src_X, src_y = extract_source_features(
        data.source_trajs, data.source_truth, scn, noise=scn.source_noise()
    )
    src_rows = []
    from .features import SharedFeatureVector

    for i, vid in enumerate(src_ids):
        src_rows.append(
            (vid, SharedFeatureVector.from_array(src_X[i]), data.source_truth[vid])
        )
    write_features_csv(run_dir / "source_features.csv", src_rows)

    delta = scn["pipeline.delta"]
    stage1_model, pool = pipe.stage1_seed(
        src_X,
        src_y,
        data.pool_ids,
        data.bundle.rows(data.pool_ids),
        delta=delta,
        params=scn.forest_params(),
        seed=derive_seed(scn.seed, "stage1"),
        feature_names=FEATURE_NAMES,
    )
    forest_mod.save_forest(run_dir / "stage1_forest.bin", stage1_model)
    pipe.write_pool_manifest(run_dir / "stage1_pool.csv", pool)

    eval_X = data.bundle.rows(data.eval_ids)
    stage1_scores = forest_mod.predict_proba_batch(stage1_model, eval_X)
    stage1_block = _metric_block(scn, data.eval_ids, stage1_scores, data.labels)

    checkpoint_dir = run_dir / "checkpoints"

    def checkpoint(iteration, pool_state, models):
        pipe.save_checkpoint(checkpoint_dir, iteration, pool_state, models)

    day_spec, car_spec = scn.cnn_specs()
    ensemble, pool, history = pipe.cotrain(
        pool,
        data.bundle.subset(data.pool_ids),
        delta=delta,
        forest_params=scn.forest_params(),
        day_spec=day_spec,
        car_spec=car_spec,
        train_cfg=scn.train_config(),
        seed=derive_seed(scn.seed, "cotrain"),
        max_iterations=scn["pipeline.max_iterations"],
        checkpoint=checkpoint,
        feature_names=FEATURE_NAMES,
    )
    models_dir = run_dir / "models"
    models_dir.mkdir(exist_ok=True)
    forest_mod.save_forest(models_dir / "forest.bin", ensemble.forest)
    cnn_mod.save_cnn(models_dir / "day_cnn.bin", ensemble.day_cnn)
    cnn_mod.save_cnn(models_dir / "car_cnn.bin", ensemble.car_cnn)
    pipe.write_pool_manifest(run_dir / "final_pool.csv", pool)

    final_scores = pipe.ensemble_scores(ensemble, data.bundle, data.eval_ids)
    final_block = _metric_block(scn, data.eval_ids, final_scores, data.labels)
    _write_scores_csv(
        run_dir / "scores.csv",
        data.eval_ids,
        data.target_truth,
        data.labels,
        {"stage1_score": stage1_scores, "final_score": final_scores},
    )

    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "experiment",
        "config_hash": scn.hash,
        "seed": scn.seed,
        "holdout": {
            "size": len(data.eval_ids),
            "positives": int(sum(data.labels[v] for v in data.eval_ids)),
        },
        "stage1": stage1_block,
        "final": final_block,
        "cotrain": {
            "iterations": history.iterations,
            "stalled": history.stalled,
            "added_per_iteration": history.added_per_iteration,
            "pool": {
                "ridesourcing": len(pool.ridesourcing),
                "other": len(pool.other),
                "unlabeled": len(pool.unlabeled),
            },
        },
    }
    write_report(run_dir / "report.json", report)
    return report, run_dir


def _stage1_topk(scn, src_X, src_y, data: PreparedData, keep_cols=None, seed_tag="ablation-rf"):
    """Stage-1 forest on (optionally column-restricted) source features,
    scored on the holdout; returns the top-k precision block and AUC."""
    cols = np.arange(src_X.shape[1]) if keep_cols is None else np.asarray(keep_cols)
    names = tuple(FEATURE_NAMES[c] for c in cols)
    model = forest_mod.train_forest(
        src_X[:, cols],
        src_y,
        scn.forest_params(),
        seed=derive_seed(scn.seed, seed_tag),
        feature_names=names,
    )
    eval_X = data.bundle.rows(data.eval_ids)[:, cols]
    scores = forest_mod.predict_proba_batch(model, eval_X)
    y = np.array([data.labels[v] for v in data.eval_ids], dtype=np.int64)
    top_k = {
        f"{k:g}": float(
            metrics_mod.top_k_precision(scores, y, k, ids=np.array(data.eval_ids))
        )
        for k in scn["eval.top_k"]
    }
    return top_k, float(metrics_mod.auc(scores, y))


def leave_one_feature_out(scn: Scenario, out_dir) -> tuple:
    """Retrain Stage 1 without each feature group; report top-k deltas."""
    out_dir = Path(out_dir)
    run_dir = out_dir / f"ablation-{scn.hash[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_data(scn, run_dir=None)
    src_ids, src_X, src_y = extract_source_features(
        data.source_trajs, data.source_truth, scn, noise=scn.source_noise()
    )
    baseline_topk, baseline_auc = _stage1_topk(scn, src_X, src_y, data)
    groups = {}
    for name, cols in FEATURE_GROUPS.items():
        keep = [c for c in range(src_X.shape[1]) if c not in cols]
        topk, auc_val = _stage1_topk(scn, src_X, src_y, data, keep_cols=keep)
        groups[name] = {
            "top_k_precision": topk,
            "auc": auc_val,
            "delta_top_k": {
                k: float(baseline_topk[k] - topk[k]) for k in baseline_topk
            },
        }
    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "ablation",
        "config_hash": scn.hash,
        "seed": scn.seed,
        "holdout": {
            "size": len(data.eval_ids),
            "positives": int(sum(data.labels[v] for v in data.eval_ids)),
        },
        "baseline": {"top_k_precision": baseline_topk, "auc": baseline_auc},
        "groups": groups,
    }
    write_report(run_dir / "report.json", report)
    return report, run_dir


def noise_sweep(scn: Scenario, settings, out_dir) -> tuple:
    """Stage-1 top-k precision under each (X min, Y m) source-noise setting."""
    out_dir = Path(out_dir)
    run_dir = out_dir / f"noise-{scn.hash[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_data(scn, run_dir=None)
    rows = []
    for interval_min, radius_m in settings:
        noise = None
        if interval_min > 0:
            noise = NoiseSpec(
                sample_interval_min=float(interval_min),
                jitter_radius_m=float(radius_m),
                seed=scn.seed,
            )
        src_ids, src_X, src_y = extract_source_features(
            data.source_trajs, data.source_truth, scn, noise=noise
        )
        topk, auc_val = _stage1_topk(scn, src_X, src_y, data, seed_tag="noise-rf")
        rows.append(
            {
                "interval_min": float(interval_min),
                "radius_m": float(radius_m),
                "top_k_precision": topk,
                "auc": auc_val,
            }
        )
    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "noise_sweep",
        "config_hash": scn.hash,
        "seed": scn.seed,
        "settings": rows,
    }
    write_report(run_dir / "report.json", report)
    return report, run_dir
