"""Command-line interface.

Subcommands mirror the pipeline stages (simulate, extract, stage1,
cotrain, classify, evaluate, ablate, noise-sweep) plus an end-to-end
``experiment`` runner. Exit codes: 0 success, 2 configuration error,
3 data error.
"""

import functools
import sys
from pathlib import Path

import click
import numpy as np

from . import cnn as cnn_mod
from . import forest as forest_mod
from . import metrics as metrics_mod
from . import pipeline as pipe
from .config import load_scenario
from .errors import EXIT_CONFIG, EXIT_DATA, ConfigError, DataError
from .experiment import (
    leave_one_feature_out,
    noise_sweep,
    run_experiment,
    write_report,
    SCHEMA_VERSION,
)
from .features import (
    FEATURE_NAMES,
    SharedFeatureVector,
    bus_rush_hour_trips,
    extract_features,
    read_features_csv,
    write_features_csv,
)
from .images import build_stack, read_timg, write_timg
from .pipeline import TargetBundle
from .simulate import domain_shift, read_truth_csv, simulate_fleet, write_truth_csv
from .traj import read_trace_csv, segment_days, write_trace_csv
from .util import derive_seed


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except DataError as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(EXIT_DATA)

    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Scenario key=value file (defaults are the standard fixture).")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", type=click.Path(), default="runs", help="Output directory.")
@click.pass_context
def main(ctx, config_path, seed, out):
    """Ridesourcing-car detection toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["seed"] = seed
    ctx.obj["out"] = Path(out)


def _scenario(ctx):
    overrides = {}
    if ctx.obj["seed"] is not None:
        overrides["seed"] = ctx.obj["seed"]
    return load_scenario(ctx.obj["config_path"], overrides=overrides)


@main.command()
@click.pass_context
@_handle_errors
def simulate(ctx):
    """Generate source and target fleets as trace + ground-truth CSVs."""
    scn = _scenario(ctx)
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    target_city = scn.city(seed=derive_seed(scn.seed, "city"))
    source_city = domain_shift(
        target_city, scn["source.shift_strength"], seed=derive_seed(scn.seed, "shift")
    )
    for domain, city, counts in (
        ("source", source_city, scn.source_counts()),
        ("target", target_city, scn.target_counts()),
    ):
        trajs, truth = simulate_fleet(
            city,
            counts,
            days=scn["days"],
            sampling_period_s=scn["sampling_period_s"],
            seed=derive_seed(scn.seed, f"{domain}-fleet"),
        )
        write_trace_csv(out / f"{domain}_traces.csv", trajs)
        write_truth_csv(out / f"{domain}_truth.csv", truth)
        click.echo(f"{domain}: {len(trajs)} vehicles -> {out / (domain + '_traces.csv')}")


@main.command()
@click.option("--traces", required=True, type=click.Path(exists=True))
@click.option("--truth", type=click.Path(exists=True), default=None,
              help="Ground-truth CSV; bus traces get rush-hour preprocessing.")
@click.option("--images/--no-images", "with_images", default=True,
              help="Also write per-vehicle TIMG stacks.")
@click.pass_context
@_handle_errors
def extract(ctx, traces, truth, with_images):
    """Extract shared-feature CSV (and image stacks) from a trace CSV."""
    scn = _scenario(ctx)
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    trajs, skipped = read_trace_csv(traces)
    click.echo(f"read {len(trajs)} vehicles, skipped {skipped} malformed rows")
    labels = read_truth_csv(truth) if truth else {}
    grid = scn.grid()
    fcfg = scn.feature_config()
    base_day = None
    for t in trajs.values():
        for seg in segment_days(t, fcfg.tz_offset_hours):
            base_day = seg.calendar_day if base_day is None else min(base_day, seg.calendar_day)
    rows = []
    image_dir = out / "images"
    if with_images:
        image_dir.mkdir(exist_ok=True)
    n_skipped_vehicles = 0
    for vid in sorted(trajs):
        t = trajs[vid]
        label = labels.get(vid, "unknown")
        if label == "bus":
            t = bus_rush_hour_trips(t, fcfg.tz_offset_hours, fcfg.rush_morning, fcfg.rush_evening)
        try:
            vec = extract_features(t, grid, fcfg)
        except DataError:
            n_skipped_vehicles += 1
            continue
        rows.append((vid, vec, label))
        if with_images:
            stack = build_stack(
                t,
                grid,
                k=scn["image.days"],
                base_day=base_day or 0,
                threshold_s=scn["image.threshold_s"],
                tz_offset_hours=fcfg.tz_offset_hours,
                gap_cap_s=fcfg.gap_cap_s,
            )
            write_timg(image_dir / f"{vid}.timg", stack)
    write_features_csv(out / "features.csv", rows)
    if n_skipped_vehicles:
        click.echo(f"skipped {n_skipped_vehicles} vehicles with no in-window data")
    click.echo(f"wrote {out / 'features.csv'} ({len(rows)} vehicles)")


def _load_bundle(features_path, images_dir):
    ids, X, _labels = read_features_csv(features_path)
    stacks = [read_timg(Path(images_dir) / f"{vid}.timg", vehicle_id=vid) for vid in ids]
    return TargetBundle(ids=ids, X=X, stacks=stacks)


@main.command()
@click.option("--source-features", required=True, type=click.Path(exists=True))
@click.option("--target-features", required=True, type=click.Path(exists=True))
@click.pass_context
@_handle_errors
def stage1(ctx, source_features, target_features):
    """Train the source forest and seed the candidate pool."""
    scn = _scenario(ctx)
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    src_ids, src_X, src_labels = read_features_csv(source_features)
    y = np.array([1 if lab == "taxi" else 0 for lab in src_labels], dtype=np.int64)
    tgt_ids, tgt_X, _ = read_features_csv(target_features)
    model, pool = pipe.stage1_seed(
        src_X,
        y,
        tgt_ids,
        tgt_X,
        delta=scn["pipeline.delta"],
        params=scn.forest_params(),
        seed=derive_seed(scn.seed, "stage1"),
        feature_names=FEATURE_NAMES,
    )
    forest_mod.save_forest(out / "stage1_forest.bin", model)
    pipe.write_pool_manifest(out / "stage1_pool.csv", pool)
    scores = forest_mod.predict_proba_batch(model, tgt_X)
    with open(out / "stage1_scores.csv", "w", newline="") as fh:
        import csv

        writer = csv.writer(fh)
        writer.writerow(["vehicle_id", "score"])
        for vid, s in zip(tgt_ids, scores):
            writer.writerow([vid, f"{s:.9g}"])
    click.echo(
        f"seeded {len(pool.ridesourcing)} ridesourcing / {len(pool.other)} other / "
        f"{len(pool.unlabeled)} unlabeled -> {out / 'stage1_pool.csv'}"
    )


@main.command()
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True),
              help="Pool manifest to start from (stage-1 output or a checkpoint).")
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--images-dir", required=True, type=click.Path(exists=True))
@click.pass_context
@_handle_errors
def cotrain(ctx, pool_path, features, images_dir):
    """Co-train the forest and CNNs from a pool manifest (resumable)."""
    scn = _scenario(ctx)
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    pool = pipe.read_pool_manifest(pool_path)
    bundle = _load_bundle(features, images_dir)

    def checkpoint(iteration, pool_state, models):
        pipe.save_checkpoint(out / "checkpoints", iteration, pool_state, models)

    day_spec, car_spec = scn.cnn_specs()
    ensemble, pool, history = pipe.cotrain(
        pool,
        bundle,
        delta=scn["pipeline.delta"],
        forest_params=scn.forest_params(),
        day_spec=day_spec,
        car_spec=car_spec,
        train_cfg=scn.train_config(),
        seed=derive_seed(scn.seed, "cotrain"),
        max_iterations=scn["pipeline.max_iterations"],
        checkpoint=checkpoint,
        feature_names=FEATURE_NAMES,
    )
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    forest_mod.save_forest(models_dir / "forest.bin", ensemble.forest)
    cnn_mod.save_cnn(models_dir / "day_cnn.bin", ensemble.day_cnn)
    cnn_mod.save_cnn(models_dir / "car_cnn.bin", ensemble.car_cnn)
    pipe.write_pool_manifest(out / "final_pool.csv", pool)
    click.echo(
        f"co-training finished after {history.iterations} iterations; "
        f"pool {len(pool.ridesourcing)}/{len(pool.other)}/{len(pool.unlabeled)}"
    )


@main.command()
@click.option("--models-dir", required=True, type=click.Path(exists=True))
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--images-dir", required=True, type=click.Path(exists=True))
@click.pass_context
@_handle_errors
def classify(ctx, models_dir, features, images_dir):
    """Score candidates with a trained ensemble; write labels + confidences."""
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    models_dir = Path(models_dir)
    ensemble = pipe.EnsembleClassifier(
        forest=forest_mod.load_forest(models_dir / "forest.bin"),
        day_cnn=cnn_mod.load_cnn(models_dir / "day_cnn.bin"),
        car_cnn=cnn_mod.load_cnn(models_dir / "car_cnn.bin"),
    )
    bundle = _load_bundle(features, images_dir)
    scores = pipe.ensemble_scores(ensemble, bundle, bundle.ids)
    with open(out / "classified.csv", "w", newline="") as fh:
        import csv

        writer = csv.writer(fh)
        writer.writerow(["vehicle_id", "label", "confidence", "score"])
        for vid, p in zip(bundle.ids, scores):
            label = pipe.LABEL_POSITIVE if p >= ensemble.boundary else pipe.LABEL_NEGATIVE
            writer.writerow([vid, label, f"{max(p, 1 - p):.9g}", f"{p:.9g}"])
    click.echo(f"wrote {out / 'classified.csv'} ({len(bundle.ids)} vehicles)")


@main.command()
@click.option("--scores", required=True, type=click.Path(exists=True),
              help="CSV with vehicle_id,score columns.")
@click.option("--truth", required=True, type=click.Path(exists=True))
@click.pass_context
@_handle_errors
def evaluate(ctx, scores, truth):
    """Compute AUC / accuracy / top-k precision of a score file."""
    scn = _scenario(ctx)
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    truth_map = read_truth_csv(truth)
    import csv

    ids, vals = [], []
    with open(scores, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "vehicle_id":
            raise ConfigError(f"unexpected scores header: {header}")
        score_col = len(header) - 1
        for row in reader:
            ids.append(row[0])
            vals.append(float(row[score_col]))
    y = np.array(
        [1 if truth_map.get(v) == "ridesourcing" else 0 for v in ids], dtype=np.int64
    )
    vals = np.array(vals)
    top_k = {
        f"{k:g}": float(metrics_mod.top_k_precision(vals, y, k, ids=np.array(ids)))
        for k in scn["eval.top_k"]
    }
    report = {
        "schema_version": SCHEMA_VERSION,
        "kind": "experiment",
        "config_hash": scn.hash,
        "seed": scn.seed,
        "holdout": {"size": len(ids), "positives": int(y.sum())},
        "stage1": {
            "auc": float(metrics_mod.auc(vals, y)),
            "accuracy": float(metrics_mod.accuracy(vals, y)),
            "top_k_precision": top_k,
            "confusion": metrics_mod.confusion_counts(vals, y),
        },
        "final": {
            "auc": float(metrics_mod.auc(vals, y)),
            "accuracy": float(metrics_mod.accuracy(vals, y)),
            "top_k_precision": top_k,
            "confusion": metrics_mod.confusion_counts(vals, y),
        },
        "cotrain": {
            "iterations": 0,
            "stalled": False,
            "added_per_iteration": [],
            "pool": {"ridesourcing": 0, "other": 0, "unlabeled": len(ids)},
        },
    }
    write_report(out / "evaluation.json", report)
    for key, value in report["final"].items():
        click.echo(f"{key}: {value}")


@main.command()
@click.pass_context
@_handle_errors
def experiment(ctx):
    """Run the full pipeline (simulate -> extract -> stage1 -> cotrain -> evaluate)."""
    scn = _scenario(ctx)
    report, run_dir = run_experiment(scn, ctx.obj["out"])
    click.echo(f"run directory: {run_dir}")
    click.echo(f"stage1 AUC: {report['stage1']['auc']:.4f}")
    click.echo(f"final  AUC: {report['final']['auc']:.4f}")
    click.echo(f"final  accuracy: {report['final']['accuracy']:.4f}")
    for k, v in report["final"]["top_k_precision"].items():
        click.echo(f"final  top-{k}% precision: {v:.4f}")


@main.command()
@click.pass_context
@_handle_errors
def ablate(ctx):
    """Leave-one-feature-out ablation of the Stage-1 forest."""
    report, run_dir = leave_one_feature_out(_scenario(ctx), ctx.obj["out"])
    click.echo(f"run directory: {run_dir}")
    base = report["baseline"]["top_k_precision"]
    click.echo(f"full model top-k: {base}")
    for name, block in report["groups"].items():
        click.echo(f"without {name}: {block['top_k_precision']}")


@main.command("noise-sweep")
@click.option("--settings", default="5:100,15:500",
              help="Comma-separated X:Y pairs (minutes:meters).")
@click.pass_context
@_handle_errors
def noise_sweep_cmd(ctx, settings):
    """Stage-1 robustness under spatio-temporal source noise."""
    try:
        parsed = []
        for part in settings.split(","):
            x, y = part.split(":")
            parsed.append((float(x), float(y)))
    except ValueError:
        raise ConfigError(f"cannot parse noise settings {settings!r}") from None
    report, run_dir = noise_sweep(_scenario(ctx), parsed, ctx.obj["out"])
    click.echo(f"run directory: {run_dir}")
    for row in report["settings"]:
        click.echo(
            f"({row['interval_min']:g} min, {row['radius_m']:g} m): "
            f"top-k {row['top_k_precision']}"
        )


if __name__ == "__main__":
    main()
