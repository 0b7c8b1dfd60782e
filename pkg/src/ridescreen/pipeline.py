"""Two-stage transfer pipeline: source-domain seeding and target co-training.

Stage 1 trains the forest on taxi/bus source features (taxi maps to the
positive class) and seeds the candidate pool with its high-confidence
labels. Stage 2 iteratively retrains the forest and the two CNNs on the
labeled pool, each classifier promoting candidates it scores past the
confidence threshold, until an iteration adds nothing. The returned
classifier averages the forest and CNN-ensemble probabilities.
"""

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cnn as cnn_mod
from . import forest as forest_mod
from .errors import ConfigError, CotrainStalled, DataError, DegenerateLabels, MissingData
from .images import ImageStack, day_level_inputs, normalize
from .util import derive_seed

DEFAULT_DELTA = 0.9
DEFAULT_MAX_ITERATIONS = 50
DECISION_BOUNDARY = 0.5

LABEL_POSITIVE = "ridesourcing"
LABEL_NEGATIVE = "other"
LABEL_UNKNOWN = "unknown"


@dataclass(frozen=True)
class Provenance:
    source: str  # stage1 | cotrain-rf | cotrain-cnn
    iteration: int
    confidence: float


@dataclass
class LabeledPool:
    """Evolving partition of candidate ids into positive / negative / unlabeled."""

    ridesourcing: set = field(default_factory=set)
    other: set = field(default_factory=set)
    unlabeled: set = field(default_factory=set)
    provenance: dict = field(default_factory=dict)

    def check(self) -> None:
        """Raise when the disjointness invariant is violated."""
        if (
            self.ridesourcing & self.other
            or self.ridesourcing & self.unlabeled
            or self.other & self.unlabeled
        ):
            raise DataError("pool sets are not disjoint")

    @property
    def all_ids(self) -> set:
        return self.ridesourcing | self.other | self.unlabeled

    @property
    def n_labeled(self) -> int:
        return len(self.ridesourcing) + len(self.other)

    def copy(self) -> "LabeledPool":
        return LabeledPool(
            ridesourcing=set(self.ridesourcing),
            other=set(self.other),
            unlabeled=set(self.unlabeled),
            provenance=dict(self.provenance),
        )


@dataclass
class TargetBundle:
    """Aligned per-candidate data: shared features and image stacks."""

    ids: list
    X: np.ndarray  # (n, n_features)
    stacks: list  # list[ImageStack], aligned with ids

    def __post_init__(self):
        if len(self.ids) != len(self.X) or len(self.ids) != len(self.stacks):
            raise ConfigError("bundle ids, features, and stacks must align")
        self.index = {vid: i for i, vid in enumerate(self.ids)}

    def rows(self, ids) -> np.ndarray:
        return self.X[[self.index[v] for v in ids]]

    def stacks_for(self, ids) -> list:
        return [self.stacks[self.index[v]] for v in ids]

    def subset(self, ids) -> "TargetBundle":
        ids = sorted(ids)
        return TargetBundle(ids=ids, X=self.rows(ids), stacks=self.stacks_for(ids))


@dataclass
class ClassifierView:
    """One co-training view: a trainer and a scorer over candidate ids."""

    name: str
    train: callable  # (pos_ids, neg_ids, iteration) -> model
    score: callable  # (model, ids) -> np.ndarray of probabilities


@dataclass
class CotrainHistory:
    iterations: int = 0
    added_per_iteration: list = field(default_factory=list)
    stalled: bool = False


def stage1_seed(
    source_X,
    source_y,
    candidate_ids,
    candidate_X,
    delta: float = DEFAULT_DELTA,
    params: forest_mod.ForestParams = None,
    seed: int = 0,
    feature_names=None,
):
    """Train the source forest and seed the candidate pool.

    source_y uses 1 for taxi (ridesourcing-like) and 0 for bus. Candidates
    with p >= delta become ridesourcing, p <= 1-delta become other, the
    rest stay unlabeled.

    Returns (ForestModel, LabeledPool).
    """
    if not 0.5 < delta <= 1.0:
        raise ConfigError(f"delta must be in (0.5, 1], got {delta}")
    model = forest_mod.train_forest(
        source_X, source_y, params, seed=seed, feature_names=feature_names
    )
    probs = forest_mod.predict_proba_batch(model, candidate_X)
    pool = LabeledPool(unlabeled=set(candidate_ids))
    for vid, p in zip(candidate_ids, probs):
        p = float(p)
        if p >= delta:
            pool.unlabeled.discard(vid)
            pool.ridesourcing.add(vid)
            pool.provenance[vid] = Provenance("stage1", 0, p)
        elif p <= 1.0 - delta:
            pool.unlabeled.discard(vid)
            pool.other.add(vid)
            pool.provenance[vid] = Provenance("stage1", 0, 1.0 - p)
    pool.check()
    return model, pool


def run_cotrain_loop(
    pool: LabeledPool,
    views,
    delta: float = DEFAULT_DELTA,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    checkpoint=None,
):
    """The co-training engine shared by cotrain and self_train.

    Each iteration retrains every view on the current pool, scores the
    unlabeled ids, and promotes ids any view is confident about. An id
    claimed for both classes in the same iteration stays unlabeled for that
    iteration. Stops when an iteration adds nothing; hitting the iteration
    cap warns CotrainStalled and retrains once on the final pool so the
    returned models match it.

    Returns (models: dict view-name -> model, pool, CotrainHistory).
    """
    if not 0.5 < delta <= 1.0:
        raise ConfigError(f"delta must be in (0.5, 1], got {delta}")
    if not pool.ridesourcing or not pool.other:
        raise DegenerateLabels("co-training needs seeded ids of both classes")
    pool.check()
    history = CotrainHistory()
    models = {}
    for iteration in range(1, max_iterations + 1):
        history.iterations = iteration
        pos = sorted(pool.ridesourcing)
        neg = sorted(pool.other)
        models = {v.name: v.train(pos, neg, iteration) for v in views}
        pending = sorted(pool.unlabeled)
        promote_pos, promote_neg = {}, {}
        if pending:
            for view in views:
                probs = np.asarray(views_score(view, models[view.name], pending))
                for vid, p in zip(pending, probs):
                    p = float(p)
                    if p >= delta:
                        promote_pos.setdefault(vid, (view.name, p))
                    elif p <= 1.0 - delta:
                        promote_neg.setdefault(vid, (view.name, 1.0 - p))
        conflicts = set(promote_pos) & set(promote_neg)
        added = 0
        for vid, (name, conf) in promote_pos.items():
            if vid in conflicts:
                continue
            pool.unlabeled.discard(vid)
            pool.ridesourcing.add(vid)
            pool.provenance[vid] = Provenance(f"cotrain-{name}", iteration, conf)
            added += 1
        for vid, (name, conf) in promote_neg.items():
            if vid in conflicts:
                continue
            pool.unlabeled.discard(vid)
            pool.other.add(vid)
            pool.provenance[vid] = Provenance(f"cotrain-{name}", iteration, conf)
            added += 1
        pool.check()
        history.added_per_iteration.append(added)
        if checkpoint is not None:
            checkpoint(iteration, pool, models)
        if added == 0:
            return models, pool, history
    # Cap reached while still growing: the last additions happened after
    # training, so refresh the models on the final pool before returning.
    warnings.warn(
        f"co-training still adding labels after {max_iterations} iterations",
        CotrainStalled,
    )
    history.stalled = True
    pos = sorted(pool.ridesourcing)
    neg = sorted(pool.other)
    models = {v.name: v.train(pos, neg, max_iterations + 1) for v in views}
    return models, pool, history


def views_score(view, model, ids):
    return view.score(model, ids)


def _label_vector(pos_ids, neg_ids):
    return np.concatenate(
        [np.ones(len(pos_ids), dtype=np.int64), np.zeros(len(neg_ids), dtype=np.int64)]
    )


def make_rf_view(
    bundle: TargetBundle,
    params: forest_mod.ForestParams = None,
    seed: int = 0,
    feature_names=None,
) -> ClassifierView:
    def train(pos_ids, neg_ids, iteration):
        X = np.vstack([bundle.rows(pos_ids), bundle.rows(neg_ids)])
        y = _label_vector(pos_ids, neg_ids)
        return forest_mod.train_forest(
            X, y, params, seed=derive_seed(seed, "rf", iteration), feature_names=feature_names
        )

    def score(model, ids):
        return forest_mod.predict_proba_batch(model, bundle.rows(ids))

    return ClassifierView(name="rf", train=train, score=score)


def _day_level_dataset(stacks, labels):
    xs, ys = [], []
    for stack, label in zip(stacks, labels):
        if stack.present.any():
            imgs = day_level_inputs(stack)
            xs.append(imgs)
            ys.extend([label] * len(imgs))
    if not xs:
        raise MissingData("no day images available for CNN training")
    return np.concatenate(xs, axis=0), np.array(ys, dtype=np.int64)


def _car_level_dataset(stacks, labels):
    xs = np.stack([normalize(stack.pixels) for stack in stacks], axis=0)
    return xs, np.asarray(labels, dtype=np.int64)


def make_cnn_view(
    bundle: TargetBundle,
    day_spec: cnn_mod.CnnSpec,
    car_spec: cnn_mod.CnnSpec,
    train_cfg: cnn_mod.TrainConfig,
    seed: int = 0,
) -> ClassifierView:
    """CNN view: day-level and car-level models, scored as their average.

    Both models are retrained from fresh initialization each iteration to
    avoid confirmation-bias drift from earlier pseudo-labels.
    """

    def train(pos_ids, neg_ids, iteration):
        stacks = bundle.stacks_for(pos_ids) + bundle.stacks_for(neg_ids)
        labels = _label_vector(pos_ids, neg_ids)
        day_x, day_y = _day_level_dataset(stacks, labels)
        car_x, car_y = _car_level_dataset(stacks, labels)
        day_cfg = cnn_mod.TrainConfig(
            **{**train_cfg.__dict__, "seed": derive_seed(seed, "day", iteration)}
        )
        car_cfg = cnn_mod.TrainConfig(
            **{**train_cfg.__dict__, "seed": derive_seed(seed, "car", iteration)}
        )
        day_model = cnn_mod.train_cnn(day_x, day_y, day_spec, day_cfg)
        car_model = cnn_mod.train_cnn(car_x, car_y, car_spec, car_cfg)
        return {"day": day_model, "car": car_model}

    def score(model, ids):
        return cnn_ensemble_scores(model["day"], model["car"], bundle.stacks_for(ids))

    return ClassifierView(name="cnn", train=train, score=score)


def cnn_ensemble_scores(day_model, car_model, stacks) -> np.ndarray:
    """Vectorized day+car ensemble probability per stack."""
    day_probs = np.empty(len(stacks))
    rows = []
    for i, stack in enumerate(stacks):
        if not stack.present.any():
            day_probs[i] = np.nan
            continue
        imgs = day_level_inputs(stack)
        day_probs[i] = np.nan  # filled below from the batched pass
        rows.append((i, imgs))
    if rows:
        lengths = [len(imgs) for _, imgs in rows]
        batch = np.concatenate([imgs for _, imgs in rows], axis=0)
        probs = cnn_mod.predict_batch(day_model, batch)
        offset = 0
        for (i, _), ln in zip(rows, lengths):
            day_probs[i] = float(np.mean(probs[offset : offset + ln]))
            offset += ln
    car_batch = np.stack([normalize(stack.pixels) for stack in stacks], axis=0)
    car_probs = cnn_mod.predict_batch(car_model, car_batch)
    combined = 0.5 * (day_probs + car_probs)
    # A fully masked stack has no day-level prediction; fall back to car-level.
    missing = np.isnan(day_probs)
    combined[missing] = car_probs[missing]
    return combined


@dataclass
class EnsembleClassifier:
    """Final target-domain classifier: forest and CNN-pair, averaged."""

    forest: forest_mod.ForestModel
    day_cnn: cnn_mod.CnnModel
    car_cnn: cnn_mod.CnnModel
    boundary: float = DECISION_BOUNDARY
    metadata: dict = field(default_factory=dict)


@dataclass
class ClassificationResult:
    label: str
    confidence: float
    probability: float


def cotrain(
    pool: LabeledPool,
    bundle: TargetBundle,
    delta: float = DEFAULT_DELTA,
    forest_params: forest_mod.ForestParams = None,
    day_spec: cnn_mod.CnnSpec = None,
    car_spec: cnn_mod.CnnSpec = None,
    train_cfg: cnn_mod.TrainConfig = None,
    seed: int = 0,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    checkpoint=None,
    feature_names=None,
):
    """Algorithm-2 co-training of the forest and CNN views over the pool.

    Returns (EnsembleClassifier, pool, CotrainHistory).
    """
    k = bundle.stacks[0].k if bundle.stacks else 7
    shape = bundle.stacks[0].pixels.shape[1:] if bundle.stacks else (24, 24)
    day_spec = day_spec or cnn_mod.CnnSpec(
        input_channels=1, input_rows=shape[0], input_cols=shape[1]
    )
    car_spec = car_spec or cnn_mod.CnnSpec(
        input_channels=k, input_rows=shape[0], input_cols=shape[1]
    )
    train_cfg = train_cfg or cnn_mod.TrainConfig()
    views = [
        make_rf_view(bundle, forest_params, seed=seed, feature_names=feature_names),
        make_cnn_view(bundle, day_spec, car_spec, train_cfg, seed=seed),
    ]
    models, pool, history = run_cotrain_loop(
        pool, views, delta=delta, max_iterations=max_iterations, checkpoint=checkpoint
    )
    ensemble = EnsembleClassifier(
        forest=models["rf"],
        day_cnn=models["cnn"]["day"],
        car_cnn=models["cnn"]["car"],
        metadata={
            "iterations": history.iterations,
            "stalled": history.stalled,
            "pool_ridesourcing": len(pool.ridesourcing),
            "pool_other": len(pool.other),
            "pool_unlabeled": len(pool.unlabeled),
        },
    )
    return ensemble, pool, history


def self_train(
    pool: LabeledPool,
    bundle: TargetBundle,
    classifier_kind: str,
    delta: float = DEFAULT_DELTA,
    forest_params: forest_mod.ForestParams = None,
    day_spec: cnn_mod.CnnSpec = None,
    car_spec: cnn_mod.CnnSpec = None,
    train_cfg: cnn_mod.TrainConfig = None,
    seed: int = 0,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    feature_names=None,
):
    """Single-classifier self-training ablation (rf or cnn view alone).

    Returns (model, pool, CotrainHistory); the model is the view's own
    (forest, or dict with day/car CNNs).
    """
    if classifier_kind == "rf":
        views = [make_rf_view(bundle, forest_params, seed=seed, feature_names=feature_names)]
    elif classifier_kind == "cnn":
        k = bundle.stacks[0].k if bundle.stacks else 7
        shape = bundle.stacks[0].pixels.shape[1:] if bundle.stacks else (24, 24)
        day_spec = day_spec or cnn_mod.CnnSpec(
            input_channels=1, input_rows=shape[0], input_cols=shape[1]
        )
        car_spec = car_spec or cnn_mod.CnnSpec(
            input_channels=k, input_rows=shape[0], input_cols=shape[1]
        )
        views = [make_cnn_view(bundle, day_spec, car_spec, train_cfg or cnn_mod.TrainConfig(), seed=seed)]
    else:
        raise ConfigError(f"classifier_kind must be 'rf' or 'cnn', got {classifier_kind!r}")
    models, pool, history = run_cotrain_loop(
        pool, views, delta=delta, max_iterations=max_iterations
    )
    return models[views[0].name], pool, history


def ensemble_score(ens: EnsembleClassifier, x_features, stack: ImageStack) -> float:
    """Averaged forest + CNN-ensemble probability for one car."""
    p_rf = forest_mod.predict_proba(ens.forest, x_features)
    p_cnn = cnn_mod.predict_cnn_ensemble(ens.day_cnn, ens.car_cnn, stack)
    return 0.5 * (p_rf + p_cnn)


def ensemble_scores(ens: EnsembleClassifier, bundle: TargetBundle, ids) -> np.ndarray:
    p_rf = forest_mod.predict_proba_batch(ens.forest, bundle.rows(ids))
    p_cnn = cnn_ensemble_scores(ens.day_cnn, ens.car_cnn, bundle.stacks_for(ids))
    return 0.5 * (p_rf + p_cnn)


def classify(ens: EnsembleClassifier, x_features, stack: ImageStack) -> ClassificationResult:
    """Final label and confidence for one car at the 0.5 decision boundary."""
    if x_features is None or stack is None:
        raise MissingData("classification needs both features and an image stack")
    x = np.asarray(x_features, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise MissingData("feature vector contains non-finite values")
    if not stack.present.any():
        raise MissingData(f"vehicle {stack.vehicle_id}: all day images absent")
    p = ensemble_score(ens, x, stack)
    label = LABEL_POSITIVE if p >= ens.boundary else LABEL_NEGATIVE
    return ClassificationResult(label=label, confidence=max(p, 1.0 - p), probability=p)


POOL_CSV_HEADER = ["vehicle_id", "label", "source", "iteration", "confidence"]


def write_pool_manifest(path, pool: LabeledPool) -> None:
    """Checkpoint manifest: one row per candidate with label and provenance."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POOL_CSV_HEADER)
        for vid in sorted(pool.all_ids):
            if vid in pool.ridesourcing:
                label = LABEL_POSITIVE
            elif vid in pool.other:
                label = LABEL_NEGATIVE
            else:
                label = LABEL_UNKNOWN
            prov = pool.provenance.get(vid)
            if prov is None:
                writer.writerow([vid, label, "unlabeled", -1, "0.5"])
            else:
                writer.writerow(
                    [vid, label, prov.source, prov.iteration, f"{prov.confidence:.9g}"]
                )


def read_pool_manifest(path) -> LabeledPool:
    pool = LabeledPool()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != POOL_CSV_HEADER:
            raise ConfigError(f"unexpected pool manifest header: {header}")
        for row in reader:
            if len(row) != 5:
                raise ConfigError(f"malformed pool row: {row}")
            vid, label, source, iteration, confidence = row
            if label == LABEL_POSITIVE:
                pool.ridesourcing.add(vid)
            elif label == LABEL_NEGATIVE:
                pool.other.add(vid)
            elif label == LABEL_UNKNOWN:
                pool.unlabeled.add(vid)
            else:
                raise ConfigError(f"invalid pool label {label!r}")
            if source != "unlabeled":
                pool.provenance[vid] = Provenance(source, int(iteration), float(confidence))
    pool.check()
    return pool


def save_checkpoint(directory, iteration: int, pool: LabeledPool, models: dict) -> Path:
    """Write one iteration's pool manifest and model files; returns the dir."""
    directory = Path(directory) / f"iter-{iteration:03d}"
    directory.mkdir(parents=True, exist_ok=True)
    write_pool_manifest(directory / "pool.csv", pool)
    if "rf" in models:
        forest_mod.save_forest(directory / "forest.bin", models["rf"])
    if "cnn" in models:
        cnn_mod.save_cnn(directory / "day_cnn.bin", models["cnn"]["day"])
        cnn_mod.save_cnn(directory / "car_cnn.bin", models["cnn"]["car"])
    return directory
