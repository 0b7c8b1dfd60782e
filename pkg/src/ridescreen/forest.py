"""Random forest over shared-feature vectors, built from scratch.

Trees are grown on class-balanced bootstrap samples with Gini impurity
splits over ceil(sqrt(d)) random candidate features; leaves store the
positive fraction so the forest emits soft vote probabilities.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateLabels, ShapeError
from .util import derive_seed

FOREST_MAGIC = b"RFOR"
FOREST_VERSION = 1


@dataclass
class ForestParams:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    n_candidates: int = 0  # 0 -> ceil(sqrt(n_features))
    stratify: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("forest needs at least one tree")
        if self.max_depth < 1 or self.min_leaf < 1:
            raise ConfigError("max_depth and min_leaf must be positive")


@dataclass
class DecisionTree:
    """Flat-array binary tree; feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # positive fraction of the node's training samples
    max_depth: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Leaf positive-fraction for each row of X."""
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(self.max_depth + 1):
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            rows = np.flatnonzero(internal)
            f = feat[rows]
            go_left = X[rows, f] <= self.threshold[node[rows]]
            node[rows] = np.where(
                go_left, self.left[node[rows]], self.right[node[rows]]
            )
        return self.value[node]


@dataclass
class ForestModel:
    trees: list
    n_features: int
    feature_names: tuple
    params: ForestParams
    seed: int
    oob_error: float
    feature_importances: np.ndarray = field(default=None)


def _gini(n_pos, n_total):
    if n_total == 0:
        return 0.0
    p = n_pos / n_total
    return 1.0 - p * p - (1.0 - p) * (1.0 - p)


def _best_split(X, y, idx, candidates, min_leaf):
    """Best (weighted-gini, feature, threshold) over the candidate features.

    Returns (None, None) when no valid split exists. Ties keep the first
    candidate feature and the lowest threshold, so growth is deterministic.
    """
    n = len(idx)
    best_score = math.inf
    best = (None, None)
    y_node = y[idx]
    for f in candidates:
        v = X[idx, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        ys = y_node[order]
        left_pos = np.cumsum(ys)[:-1]
        left_n = np.arange(1, n)
        valid = (vs[1:] > vs[:-1]) & (left_n >= min_leaf) & ((n - left_n) >= min_leaf)
        if not valid.any():
            continue
        nl = left_n[valid].astype(np.float64)
        nr = n - nl
        pl = left_pos[valid].astype(np.float64)
        pr = float(np.sum(ys)) - pl
        gini_l = 1.0 - (pl / nl) ** 2 - ((nl - pl) / nl) ** 2
        gini_r = 1.0 - (pr / nr) ** 2 - ((nr - pr) / nr) ** 2
        score = (nl * gini_l + nr * gini_r) / n
        j = int(np.argmin(score))
        if score[j] < best_score:
            pos = np.flatnonzero(valid)[j]
            thr = 0.5 * (vs[pos] + vs[pos + 1])
            best_score = score[j]
            best = (int(f), float(thr))
    return (best if best[0] is not None else (None, None)) + (best_score,)


def _grow_tree(X, y, sample_idx, rng, params, n_candidates, importance, n_root):
    feature, threshold, left, right, value = [], [], [], [], []

    def add_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    def build(idx, depth):
        node = add_node()
        n = len(idx)
        n_pos = int(np.sum(y[idx]))
        value[node] = n_pos / n
        pure = n_pos == 0 or n_pos == n
        if depth >= params.max_depth or n < 2 * params.min_leaf or pure:
            return node
        candidates = rng.choice(X.shape[1], size=n_candidates, replace=False)
        f, thr, score = _best_split(X, y, idx, candidates, params.min_leaf)
        if f is None:
            return node
        go_left = X[idx, f] <= thr
        parent_gini = _gini(n_pos, n)
        importance[f] += (n / n_root) * (parent_gini - score)
        feature[node] = f
        threshold[node] = thr
        left[node] = build(idx[go_left], depth + 1)
        right[node] = build(idx[~go_left], depth + 1)
        return node

    build(sample_idx, 0)
    return DecisionTree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value, dtype=np.float64),
        max_depth=params.max_depth,
    )


def train_forest(X, y, params: ForestParams = None, seed: int = 0, feature_names=None) -> ForestModel:
    """Fit the forest.

    Each tree sees a bootstrap draw of len(X) samples; with stratify on,
    the draw is balanced 50/50 between classes so imbalanced source data
    does not leak a class prior into the vote fractions.
    """
    params = params or ForestParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError("X must be 2-D and aligned with y")
    if len(X) < 2:
        raise DegenerateLabels("need at least two training samples")
    pos_idx = np.flatnonzero(y == 1)
    neg_idx = np.flatnonzero(y == 0)
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        raise DegenerateLabels("training labels contain a single class")
    n, d = X.shape
    n_candidates = params.n_candidates or math.ceil(math.sqrt(d))
    n_candidates = min(n_candidates, d)
    if feature_names is None:
        feature_names = tuple(f"f{i}" for i in range(d))
    feature_names = tuple(feature_names)
    if len(feature_names) != d:
        raise ShapeError("feature_names must match the feature count")

    trees = []
    importance_total = np.zeros(d, dtype=np.float64)
    oob_votes = np.zeros(n, dtype=np.float64)
    oob_counts = np.zeros(n, dtype=np.int64)
    for t in range(params.n_trees):
        rng = np.random.default_rng(derive_seed(seed, "tree", t))
        if params.stratify:
            n_pos_draw = (n + 1) // 2
            sample = np.concatenate(
                [
                    rng.choice(pos_idx, size=n_pos_draw, replace=True),
                    rng.choice(neg_idx, size=n - n_pos_draw, replace=True),
                ]
            )
        else:
            sample = rng.choice(n, size=n, replace=True)
        importance = np.zeros(d, dtype=np.float64)
        tree = _grow_tree(X, y, sample, rng, params, n_candidates, importance, n)
        importance_total += importance
        trees.append(tree)
        oob = np.setdiff1d(np.arange(n), np.unique(sample), assume_unique=True)
        if oob.size:
            oob_votes[oob] += tree.predict(X[oob])
            oob_counts[oob] += 1

    scored = oob_counts > 0
    if scored.any():
        oob_pred = (oob_votes[scored] / oob_counts[scored]) >= 0.5
        oob_error = float(np.mean(oob_pred != (y[scored] == 1)))
    else:
        oob_error = float("nan")
    total = importance_total.sum()
    importances = importance_total / total if total > 0 else importance_total
    return ForestModel(
        trees=trees,
        n_features=d,
        feature_names=feature_names,
        params=params,
        seed=seed,
        oob_error=oob_error,
        feature_importances=importances,
    )


def predict_proba_batch(model: ForestModel, X) -> np.ndarray:
    """Mean leaf positive-fraction over all trees, per row."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeError(
            f"expected (n, {model.n_features}) features, got {X.shape}"
        )
    total = np.zeros(len(X), dtype=np.float64)
    for tree in model.trees:
        total += tree.predict(X)
    return total / len(model.trees)


def predict_proba(model: ForestModel, x) -> float:
    """Ridesourcing probability of a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_features,):
        raise ShapeError(f"expected {model.n_features} features, got shape {x.shape}")
    return float(predict_proba_batch(model, x[None, :])[0])


def save_forest(path, model: ForestModel) -> None:
    """Versioned binary dump; round-trips bitwise."""
    names_blob = "\n".join(model.feature_names).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                "<4sIIIIIIB3xQd",
                FOREST_MAGIC,
                FOREST_VERSION,
                len(model.trees),
                model.n_features,
                model.params.max_depth,
                model.params.min_leaf,
                model.params.n_candidates,
                1 if model.params.stratify else 0,
                model.seed % (1 << 64),
                model.oob_error,
            )
        )
        fh.write(struct.pack("<I", len(names_blob)))
        fh.write(names_blob)
        fh.write(model.feature_importances.astype("<f8").tobytes())
        for tree in model.trees:
            fh.write(struct.pack("<I", tree.n_nodes))
            fh.write(tree.feature.astype("<i4").tobytes())
            fh.write(tree.threshold.astype("<f8").tobytes())
            fh.write(tree.left.astype("<i4").tobytes())
            fh.write(tree.right.astype("<i4").tobytes())
            fh.write(tree.value.astype("<f8").tobytes())


def load_forest(path) -> ForestModel:
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sIIIIIIB3xQd"))
        magic, version, n_trees, n_features, max_depth, min_leaf, n_cand, strat, seed, oob = struct.unpack(
            "<4sIIIIIIB3xQd", head
        )
        if magic != FOREST_MAGIC:
            raise ConfigError(f"{path}: bad forest magic {magic!r}")
        if version != FOREST_VERSION:
            raise ConfigError(f"{path}: unsupported forest version {version}")
        (names_len,) = struct.unpack("<I", fh.read(4))
        names = tuple(fh.read(names_len).decode("utf-8").split("\n"))
        importances = np.frombuffer(fh.read(8 * n_features), dtype="<f8").copy()
        params = ForestParams(
            n_trees=n_trees,
            max_depth=max_depth,
            min_leaf=min_leaf,
            n_candidates=n_cand,
            stratify=bool(strat),
        )
        trees = []
        for _ in range(n_trees):
            (n_nodes,) = struct.unpack("<I", fh.read(4))
            feature = np.frombuffer(fh.read(4 * n_nodes), dtype="<i4").copy()
            threshold = np.frombuffer(fh.read(8 * n_nodes), dtype="<f8").copy()
            left = np.frombuffer(fh.read(4 * n_nodes), dtype="<i4").copy()
            right = np.frombuffer(fh.read(4 * n_nodes), dtype="<i4").copy()
            value = np.frombuffer(fh.read(8 * n_nodes), dtype="<f8").copy()
            trees.append(
                DecisionTree(
                    feature=feature,
                    threshold=threshold,
                    left=left,
                    right=right,
                    value=value,
                    max_depth=max_depth,
                )
            )
    return ForestModel(
        trees=trees,
        n_features=n_features,
        feature_names=names,
        params=params,
        seed=seed,
        oob_error=oob,
        feature_importances=importances,
    )
