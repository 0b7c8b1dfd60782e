"""Small convolutional network over trajectory images, built from scratch.

Topology is fixed: two conv(3x3, same) + relu + maxpool(2x2) blocks, one
hidden dense layer with relu and inverted dropout, then a sigmoid output.
Day-level models take 1-channel images; car-level models take the full
K-channel stack. Training is mini-batch SGD with momentum on binary
cross-entropy.
"""

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    DegenerateLabels,
    MissingData,
    ShapeError,
    TrainingDiverged,
)
from .images import ImageStack, car_level_input, day_level_inputs
from .util import derive_seed

CNN_MAGIC = b"CNET"
CNN_VERSION = 1

PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")


@dataclass(frozen=True)
class CnnSpec:
    input_channels: int = 1
    input_rows: int = 24
    input_cols: int = 24
    conv1_filters: int = 8
    conv2_filters: int = 16
    hidden_units: int = 64
    kernel_size: int = 3
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel size must be odd for 'same' padding")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout rate must be in [0, 1)")
        if min(self.input_rows, self.input_cols) < 4:
            raise ConfigError("input must be at least 4x4 to survive two poolings")

    @property
    def pooled_shape(self) -> tuple:
        r1, c1 = self.input_rows // 2, self.input_cols // 2
        return r1 // 2, c1 // 2

    @property
    def flat_features(self) -> int:
        r, c = self.pooled_shape
        return self.conv2_filters * r * c


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 50
    patience: int = 5
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")


@dataclass
class CnnModel:
    spec: CnnSpec
    params: dict
    dtype: np.dtype
    metadata: dict = field(default_factory=dict)


def init_model(spec: CnnSpec, seed: int = 0, dtype=np.float32) -> CnnModel:
    """Seeded uniform init scaled by fan-in; biases start at zero."""
    rng = np.random.default_rng(seed)
    k = spec.kernel_size

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    params = {
        "W1": uniform((spec.conv1_filters, spec.input_channels, k, k), spec.input_channels * k * k),
        "b1": np.zeros(spec.conv1_filters, dtype=dtype),
        "W2": uniform((spec.conv2_filters, spec.conv1_filters, k, k), spec.conv1_filters * k * k),
        "b2": np.zeros(spec.conv2_filters, dtype=dtype),
        "W3": uniform((spec.hidden_units, spec.flat_features), spec.flat_features),
        "b3": np.zeros(spec.hidden_units, dtype=dtype),
        "W4": uniform((spec.hidden_units,), spec.hidden_units),
        "b4": np.zeros(1, dtype=dtype),
    }
    return CnnModel(spec=spec, params=params, dtype=np.dtype(dtype), metadata={"seed": seed})


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))


def _conv_forward(x, w, b):
    win = _windows(x, w.shape[-1])
    out = np.einsum("bchwij,fcij->bfhw", win, w, optimize=True)
    out += b[None, :, None, None]
    return out


def _conv_backward(dout, x, w):
    k = w.shape[-1]
    db = dout.sum(axis=(0, 2, 3))
    win = _windows(x, k)
    dw = np.einsum("bchwij,bfhw->fcij", win, dout, optimize=True)
    dwin = _windows(dout, k)
    dx = np.einsum("bfhwij,fcij->bchw", dwin, w[:, :, ::-1, ::-1], optimize=True)
    return dw, db, dx


def _pool_forward(x):
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = (
        x[:, :, : h2 * 2, : w2 * 2]
        .reshape(b, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h2, w2, 4)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, in_shape):
    b, c, h, w = in_shape
    h2, w2 = h // 2, w // 2
    g = np.zeros((b, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    g = g.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2 * 2, w2 * 2)
    if (h2 * 2, w2 * 2) != (h, w):
        full = np.zeros(in_shape, dtype=dout.dtype)
        full[:, :, : h2 * 2, : w2 * 2] = g
        return full
    return g


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(logits, y):
    """Per-sample binary cross-entropy from logits (numerically stable)."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))


def _check_input(spec: CnnSpec, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (spec.input_channels, spec.input_rows, spec.input_cols):
        raise ShapeError(
            f"expected input (*, {spec.input_channels}, {spec.input_rows}, "
            f"{spec.input_cols}), got {np.asarray(x).shape}"
        )
    return x


def _forward_cached(model: CnnModel, x: np.ndarray, dropout_mask=None):
    p = model.params
    z1 = _conv_forward(x, p["W1"], p["b1"])
    a1 = np.maximum(z1, 0.0)
    p1, idx1 = _pool_forward(a1)
    z2 = _conv_forward(p1, p["W2"], p["b2"])
    a2 = np.maximum(z2, 0.0)
    p2, idx2 = _pool_forward(a2)
    flat = p2.reshape(len(x), -1)
    z3 = flat @ p["W3"].T + p["b3"]
    a3 = np.maximum(z3, 0.0)
    hidden = a3 if dropout_mask is None else a3 * dropout_mask
    logits = hidden @ p["W4"] + p["b4"][0]
    cache = {
        "x": x, "z1": z1, "a1": a1, "idx1": idx1, "p1": p1,
        "z2": z2, "a2": a2, "idx2": idx2, "flat": flat,
        "z3": z3, "hidden": hidden, "mask": dropout_mask,
    }
    return logits, cache


def _backward_cached(model: CnnModel, cache: dict, y: np.ndarray):
    """Gradients of the summed per-sample BCE loss w.r.t. every parameter."""
    p = model.params
    logits = cache["hidden"] @ p["W4"] + p["b4"][0]
    dz4 = (_sigmoid(logits) - y).astype(model.dtype)
    grads = {}
    grads["W4"] = cache["hidden"].T @ dz4
    grads["b4"] = np.array([dz4.sum()], dtype=model.dtype)
    dhidden = dz4[:, None] * p["W4"][None, :]
    da3 = dhidden if cache["mask"] is None else dhidden * cache["mask"]
    dz3 = da3 * (cache["z3"] > 0)
    grads["W3"] = dz3.T @ cache["flat"]
    grads["b3"] = dz3.sum(axis=0)
    dflat = dz3 @ p["W3"]
    b = len(cache["x"])
    r, c = model.spec.pooled_shape
    dp2 = dflat.reshape(b, model.spec.conv2_filters, r, c)
    da2 = _pool_backward(dp2, cache["idx2"], cache["a2"].shape)
    dz2 = da2 * (cache["z2"] > 0)
    grads["W2"], grads["b2"], dp1 = _conv_backward(dz2, cache["p1"], p["W2"])
    da1 = _pool_backward(dp1, cache["idx1"], cache["a1"].shape)
    dz1 = da1 * (cache["z1"] > 0)
    grads["W1"], grads["b1"], _ = _conv_backward(dz1, cache["x"], p["W1"])
    return grads


def forward(model: CnnModel, x, train_mode: bool = False, rng=None):
    """Ridesourcing probability for one image tensor or a batch.

    With train_mode the hidden layer gets an inverted dropout mask drawn
    from ``rng`` (retained units scaled by 1/keep); inference is a pure
    function of the input.
    """
    single = np.asarray(x).ndim == 3
    xb = _check_input(model.spec, x).astype(model.dtype)
    mask = None
    if train_mode and model.spec.dropout_rate > 0:
        if rng is None:
            raise ConfigError("train_mode forward needs an rng for the dropout mask")
        keep = 1.0 - model.spec.dropout_rate
        mask = (
            rng.random((len(xb), model.spec.hidden_units)) < keep
        ).astype(model.dtype) / keep
    logits, _ = _forward_cached(model, xb, mask)
    probs = _sigmoid(logits.astype(np.float64))
    return float(probs[0]) if single else probs


def backward(model: CnnModel, x, y, dropout_mask=None) -> dict:
    """Gradients of the summed binary cross-entropy over the batch."""
    xb = _check_input(model.spec, x).astype(model.dtype)
    y = np.atleast_1d(np.asarray(y, dtype=model.dtype))
    if len(y) != len(xb):
        raise ShapeError("labels must align with the input batch")
    _, cache = _forward_cached(model, xb, dropout_mask)
    return _backward_cached(model, cache, y)


def train_cnn(
    X,
    y,
    spec: CnnSpec,
    cfg: TrainConfig,
    dtype=np.float32,
    log_path=None,
) -> CnnModel:
    """Mini-batch SGD with momentum; returns the model at best validation loss.

    Holds out ``val_fraction`` of the data (at least one sample) for early
    stopping with the configured patience. All randomness (init, split,
    shuffling, dropout) derives from cfg.seed.
    """
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 4 or len(X) != len(y):
        raise ShapeError("X must be (n, C, H, W) aligned with y")
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateLabels("CNN training needs both classes present")

    model = init_model(spec, seed=derive_seed(cfg.seed, "init"), dtype=dtype)
    split_rng = np.random.default_rng(derive_seed(cfg.seed, "split"))
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    dropout_rng = np.random.default_rng(derive_seed(cfg.seed, "dropout"))

    n = len(X)
    perm = split_rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    n_val = min(n_val, n - 1)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    X_val = X[val_idx].astype(dtype)
    y_val = y[val_idx]
    X_train = X[train_idx].astype(dtype)
    y_train = y[train_idx]

    keep = 1.0 - spec.dropout_rate
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    best_val = np.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_epoch = -1
    since_best = 0
    train_losses, val_losses = [], []

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(X_train))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            xb = X_train[batch]
            yb = y_train[batch].astype(dtype)
            mask = None
            if spec.dropout_rate > 0:
                mask = (
                    dropout_rng.random((len(xb), spec.hidden_units)) < keep
                ).astype(dtype) / keep
            logits, cache = _forward_cached(model, xb, mask)
            loss = float(np.sum(bce_loss(logits, yb)))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            epoch_loss += loss
            grads = _backward_cached(model, cache, yb)
            scale = cfg.learning_rate / len(xb)
            for key, g in grads.items():
                velocity[key] = cfg.momentum * velocity[key] - scale * g
                model.params[key] += velocity[key]
        train_losses.append(epoch_loss / len(X_train))

        val_logits, _ = _forward_cached(model, X_val, None)
        val_loss = float(np.mean(bce_loss(val_logits, y_val)))
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in model.params.items()}
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    model.params = best_params
    model.metadata.update(
        {
            "seed": cfg.seed,
            "epochs_run": len(train_losses),
            "best_epoch": best_epoch,
            "train_losses": train_losses,
            "val_losses": val_losses,
        }
    )
    if log_path is not None:
        append_loss_log(log_path, train_losses, val_losses)
    return model


def append_loss_log(path, train_losses, val_losses) -> None:
    """Append one row per epoch to the training-log CSV."""
    import os

    new_file = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["epoch", "train_loss", "val_loss"])
        for i, (t, v) in enumerate(zip(train_losses, val_losses)):
            writer.writerow([i, f"{t:.9g}", f"{v:.9g}"])


def predict_batch(model: CnnModel, X, chunk: int = 256) -> np.ndarray:
    """Eval-mode probabilities for a batch, chunked to bound memory."""
    X = _check_input(model.spec, X)
    out = np.empty(len(X), dtype=np.float64)
    for start in range(0, len(X), chunk):
        xb = X[start : start + chunk].astype(model.dtype)
        logits, _ = _forward_cached(model, xb, None)
        out[start : start + len(xb)] = _sigmoid(logits.astype(np.float64))
    return out


def predict_day_level(model: CnnModel, stack: ImageStack) -> float:
    """Mean probability over the stack's non-masked day channels."""
    if model.spec.input_channels != 1:
        raise ShapeError("day-level prediction needs a 1-channel model")
    xs = day_level_inputs(stack)
    return float(np.mean(predict_batch(model, xs)))


def predict_car_level(model: CnnModel, stack: ImageStack) -> float:
    """Single forward pass over the whole K-channel stack."""
    x = car_level_input(stack)
    if x.shape[1] != model.spec.input_channels:
        raise ShapeError(
            f"stack has {x.shape[1]} channels, model expects {model.spec.input_channels}"
        )
    return float(predict_batch(model, x)[0])


def predict_cnn_ensemble(day_model: CnnModel, car_model: CnnModel, stack: ImageStack) -> float:
    """Average of the day-level and car-level probabilities."""
    return 0.5 * (predict_day_level(day_model, stack) + predict_car_level(car_model, stack))


_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_cnn(path, model: CnnModel) -> None:
    """Versioned binary: spec ints then parameter tensors in declared order."""
    s = model.spec
    code = _DTYPE_CODES[model.dtype]
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                "<4sIIIIIIIIId",
                CNN_MAGIC,
                CNN_VERSION,
                code,
                s.input_channels,
                s.input_rows,
                s.input_cols,
                s.conv1_filters,
                s.conv2_filters,
                s.hidden_units,
                s.kernel_size,
                s.dropout_rate,
            )
        )
        for key in PARAM_ORDER:
            arr = model.params[key]
            fh.write(arr.astype(f"<f{model.dtype.itemsize}").tobytes(order="C"))


def load_cnn(path) -> CnnModel:
    fmt = "<4sIIIIIIIIId"
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize(fmt))
        magic, version, code, ch, rows, cols, c1, c2, h, k, drop = struct.unpack(fmt, head)
        if magic != CNN_MAGIC:
            raise ConfigError(f"{path}: bad magic {magic!r}")
        if version != CNN_VERSION:
            raise ConfigError(f"{path}: unsupported CNN version {version}")
        dtype = _CODE_DTYPES[code]
        spec = CnnSpec(
            input_channels=ch,
            input_rows=rows,
            input_cols=cols,
            conv1_filters=c1,
            conv2_filters=c2,
            hidden_units=h,
            kernel_size=k,
            dropout_rate=drop,
        )
        shapes = {
            "W1": (c1, ch, k, k),
            "b1": (c1,),
            "W2": (c2, c1, k, k),
            "b2": (c2,),
            "W3": (h, spec.flat_features),
            "b3": (h,),
            "W4": (h,),
            "b4": (1,),
        }
        params = {}
        for key in PARAM_ORDER:
            count = int(np.prod(shapes[key]))
            blob = fh.read(count * dtype.itemsize)
            if len(blob) != count * dtype.itemsize:
                raise ConfigError(f"{path}: truncated parameter tensor {key}")
            params[key] = (
                np.frombuffer(blob, dtype=f"<f{dtype.itemsize}")
                .reshape(shapes[key])
                .astype(dtype)
            )
    return CnnModel(spec=spec, params=params, dtype=dtype, metadata={})
