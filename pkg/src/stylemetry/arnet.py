"""Autoencoder-regularized recurrent driver-style network.

Topology (one segment, 35 x T input read as T steps of 35-vectors)::

    gru1 (sequence) -> gru2 (final state) -> dropout = x_tilde
    x_tilde -> fc1 (relu) = s -> fc2 (tanh) = x_hat        reconstruction
    x_tilde -> fc3 -> softmax                              driver classes

The objective is J = J_r + J_c where J_r is the per-sample mean of
||x_hat - x_tilde||^2 + lam * ||s||_1 and J_c the mean cross-entropy.
``mode="ronet"`` keeps only J_r, ``mode="conet"`` only J_c. The
reconstruction target is held constant by default (see
``ArnetConfig.target_grad``), so J_r shapes x_tilde through the encoder.
"""
from __future__ import annotations

import copy
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .featurize import FeatureMatrix

log = logging.getLogger(__name__)

MODES = ("arnet", "ronet", "conet")
MAGIC = "ARNETCKPT1"
N_INPUT_ROWS = 35

# full-size defaults live on ArnetConfig; this is the small preset
DESK_PRESET = dict(gru1_units=32, gru2_units=32, bottleneck_units=16, batch_size=256)


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArnetConfig:
    n_classes: int = 50
    gru1_units: int = 256
    gru2_units: int = 256
    bottleneck_units: int = 50
    dropout_p: float = 0.5
    lam: float = 1e-5
    mode: str = "arnet"
    batch_size: int = 2560
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    n_inputs: int = N_INPUT_ROWS
    standardize: bool = True
    # False: the reconstruction target x_tilde is a constant; J_r still
    # reaches x_tilde (and the GRUs) through the encoder fc1 -> fc2.
    # True: differentiate J_r through the target as well (exact dJ).
    target_grad: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("n_classes", "gru1_units", "gru2_units", "bottleneck_units", "batch_size", "n_inputs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")

    @property
    def uses_reconstruction(self) -> bool:
        return self.mode != "conet"

    @property
    def uses_classifier(self) -> bool:
        return self.mode != "ronet"

    def replace(self, **changes) -> "ArnetConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ArnetModel:
    config: ArnetConfig
    gru1: nn.GruParams
    gru2: nn.GruParams
    fc1: nn.DenseParams
    fc2: nn.DenseParams
    fc3: nn.DenseParams
    labels: list[str] = field(default_factory=list)
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_INPUT_ROWS))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(N_INPUT_ROWS))

    @classmethod
    def init(cls, config: ArnetConfig, labels: Sequence[str] | None = None, zero: bool = False) -> "ArnetModel":
        rng = None if zero else np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[0])
        c = config
        model = cls(
            config=c,
            gru1=nn.GruParams.init("gru1", c.n_inputs, c.gru1_units, rng),
            gru2=nn.GruParams.init("gru2", c.gru1_units, c.gru2_units, rng),
            fc1=nn.DenseParams.init("fc1", c.gru2_units, c.bottleneck_units, rng),
            fc2=nn.DenseParams.init("fc2", c.bottleneck_units, c.gru2_units, rng),
            fc3=nn.DenseParams.init("fc3", c.gru2_units, c.n_classes, rng),
            labels=list(labels) if labels is not None else [str(i) for i in range(c.n_classes)],
            input_mean=np.zeros(c.n_inputs),
            input_std=np.ones(c.n_inputs),
        )
        if len(model.labels) != c.n_classes:
            raise ValueError(f"{len(model.labels)} labels for {c.n_classes} classes")
        return model

    def params(self) -> list[nn.Param]:
        return (
            self.gru1.params() + self.gru2.params() + self.fc1.params() + self.fc2.params() + self.fc3.params()
        )

    def trainable_params(self) -> list[nn.Param]:
        ps = self.gru1.params() + self.gru2.params()
        if self.config.uses_reconstruction:
            ps += self.fc1.params() + self.fc2.params()
        if self.config.uses_classifier:
            ps += self.fc3.params()
        return ps

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def fit_standardizer(self, X: np.ndarray) -> None:
        """Per-row mean/std over all training segments and frames."""
        mean = X.mean(axis=(0, 2))
        std = X.std(axis=(0, 2))
        self.input_mean = mean
        self.input_std = np.where(std > 1e-12, std, 1.0)

    def class_index(self) -> dict[str, int]:
        return {d: i for i, d in enumerate(self.labels)}


@dataclass
class ForwardResult:
    x_tilde: np.ndarray  # (B, gru2_units)
    s: np.ndarray  # (B, k)
    x_hat: np.ndarray  # (B, gru2_units)
    logits: np.ndarray  # (B, c)


@dataclass
class Objective:
    J: float
    J_r: float
    J_c: float


@dataclass
class EpochRecord:
    epoch: int
    J_r: float
    J_c: float
    J: float
    val_accuracy: float
    val_J_r: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        lines = ["epoch,J_r,J_c,J,val_accuracy,val_J_r,seconds,best"]
        for r in self.records:
            lines.append(
                f"{r.epoch},{float(r.J_r)!r},{float(r.J_c)!r},{float(r.J)!r},{float(r.val_accuracy)!r},{float(r.val_J_r)!r},"
                f"{r.seconds:.3f},{int(r.epoch == self.best_epoch)}"
            )
        return "\n".join(lines) + "\n"


def as_batch(x) -> np.ndarray:
    """FeatureMatrix, list of them, or array -> float64 (B, 35, T)."""
    if isinstance(x, FeatureMatrix):
        x = x.values[None]
    elif isinstance(x, (list, tuple)):
        x = np.stack([m.values if isinstance(m, FeatureMatrix) else np.asarray(m) for m in x])
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (batch, 35, T) input, got shape {x.shape}")
    return x


def _forward(model: ArnetModel, X: np.ndarray, train: bool, rng=None, mask=None):
    c = model.config
    if X.shape[1] != c.n_inputs:
        raise ValueError(f"input has {X.shape[1]} rows, model expects {c.n_inputs}")
    Xn = (X - model.input_mean[None, :, None]) / model.input_std[None, :, None]
    xs = np.ascontiguousarray(Xn.transpose(2, 0, 1))  # (T, B, 35)
    h1, c1 = nn.gru_forward(xs, model.gru1, return_sequence=True)
    h2, c2 = nn.gru_forward(h1, model.gru2, return_sequence=False)
    if mask is not None:
        x_tilde = h2 * mask
    else:
        x_tilde, mask = nn.dropout_forward(h2, c.dropout_p, train, rng)
    s, cf1 = nn.dense_forward(x_tilde, model.fc1, "relu")
    x_hat, cf2 = nn.dense_forward(s, model.fc2, "tanh")
    logits, cf3 = nn.dense_forward(x_tilde, model.fc3, "identity")
    return ForwardResult(x_tilde, s, x_hat, logits), (c1, c2, mask, cf1, cf2, cf3)


def forward(model: ArnetModel, x, train: bool = False, rng: np.random.Generator | None = None) -> ForwardResult:
    result, _ = _forward(model, as_batch(x), train, rng)
    return result


def objective(result: ForwardResult, labels, config: ArnetConfig, detach_reconstruction: bool = False):
    """Loss values and gradients on the forward-result outputs.

    Returns (Objective, grads) where grads maps x_tilde/s/x_hat/logits to
    arrays (or None for a branch the mode switches off); ``x_tilde`` holds
    the gradient through the reconstruction target, present only with
    ``config.target_grad``. With ``detach_reconstruction`` no J_r gradient
    reaches x_tilde by either path.
    """
    J_r = J_c = 0.0
    grads = {"x_tilde": None, "s": None, "x_hat": None, "logits": None, "detach": detach_reconstruction}
    if config.uses_classifier:
        if labels is None:
            raise ValueError(f"mode {config.mode} needs labels")
        J_c, grads["logits"] = nn.softmax_xent(result.logits, labels)
    if config.uses_reconstruction:
        J_r, d_hat, d_target, d_s = nn.mse_l1(result.x_hat, result.x_tilde, result.s, config.lam)
        grads["x_hat"] = d_hat
        grads["s"] = d_s
        if config.target_grad and not detach_reconstruction:
            grads["x_tilde"] = d_target
    return Objective(J_r + J_c, J_r, J_c), grads


def _backward(model: ArnetModel, cache, grads) -> None:
    c1, c2, mask, cf1, cf2, cf3 = cache
    d_xt = None
    if grads["logits"] is not None:
        d_xt = nn.dense_backward(grads["logits"], cf3, model.fc3)
    if grads["x_hat"] is not None:
        d_s = nn.dense_backward(grads["x_hat"], cf2, model.fc2) + grads["s"]
        d_in = nn.dense_backward(d_s, cf1, model.fc1)
        if not grads["detach"]:
            if grads["x_tilde"] is not None:
                d_in = d_in + grads["x_tilde"]
            d_xt = d_in if d_xt is None else d_xt + d_in
    if d_xt is None:
        return
    d_h2 = nn.dropout_backward(d_xt, mask)
    d_h1 = nn.gru_backward(d_h2, c2, model.gru2)
    nn.gru_backward(d_h1, c1, model.gru1)


def loss_and_grad(
    model: ArnetModel,
    X: np.ndarray,
    labels=None,
    train: bool = True,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
    detach_reconstruction: bool = False,
) -> Objective:
    """Forward, objective and backward on one batch; grads accumulate into params."""
    result, cache = _forward(model, as_batch(X), train, rng, mask)
    obj, grads = objective(result, labels, model.config, detach_reconstruction)
    _backward(model, cache, grads)
    return obj


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _infer(model: ArnetModel, X: np.ndarray, chunk: int = 1024) -> ForwardResult:
    parts = [_forward(model, X[sl], train=False)[0] for sl in _chunks(len(X), chunk)]
    return ForwardResult(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in dataclasses.fields(ForwardResult)))


def encode_segment(model: ArnetModel, x) -> np.ndarray:
    """Bottleneck codes s (B, k), inference mode."""
    return _infer(model, as_batch(x)).s


def encode_shared(model: ArnetModel, x) -> np.ndarray:
    """Shared hidden feature x_tilde (B, gru2_units), inference mode."""
    return _infer(model, as_batch(x)).x_tilde


def predict_segment(model: ArnetModel, x) -> np.ndarray:
    """Class distributions (B, c)."""
    if not model.config.uses_classifier:
        raise ValueError("ronet model has no classifier head")
    return nn.softmax(_infer(model, as_batch(x)).logits)


def segment_accuracy(model: ArnetModel, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict_segment(model, X).argmax(axis=1) == y))


def reconstruction_loss(model: ArnetModel, X: np.ndarray) -> float:
    res = _infer(model, X)
    return nn.mse_l1(res.x_hat, res.x_tilde, res.s, model.config.lam)[0]


# -- training ----------------------------------------------------------------


def _snapshot(model: ArnetModel) -> list[np.ndarray]:
    return [p.value.copy() for p in model.params()]


def _restore(model: ArnetModel, values: list[np.ndarray]) -> None:
    for p, v in zip(model.params(), values):
        p.value[...] = v


def train(
    model: ArnetModel,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    config: ArnetConfig | None = None,
) -> tuple[ArnetModel, TrainHistory]:
    """Mini-batch ADADELTA with best-on-validation snapshot and patience.

    ``model`` is updated in place and finally holds the best parameters; it
    is also returned. Validation metric: segment accuracy (arnet, conet) or
    J_r (ronet).
    """
    cfg = config or model.config
    model.config = cfg
    X_train, X_val = as_batch(X_train), as_batch(X_val)
    y_train, y_val = np.asarray(y_train), np.asarray(y_val)
    if len(X_train) == 0 or len(X_val) == 0:
        raise ValueError("training and validation sets must be nonempty")
    if len(X_train) != len(y_train) or len(X_val) != len(y_val):
        raise ValueError("inputs and labels differ in length")
    for name, y in (("training", y_train), ("validation", y_val)):
        if np.any(y < 0) or np.any(y >= cfg.n_classes):
            raise ValueError(f"{name} labels must lie in [0, {cfg.n_classes})")

    _, shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    params = model.trainable_params()
    model.zero_grad()

    history = TrainHistory()
    maximize = cfg.uses_classifier
    best_metric = -np.inf if maximize else np.inf
    best_values = _snapshot(model)
    since_best = 0
    prev_J_r = None
    n = len(X_train)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        for sl in _chunks(n, cfg.batch_size):
            idx = order[sl]
            obj = loss_and_grad(model, X_train[idx], y_train[idx] if cfg.uses_classifier else None, True, dropout_rng)
            for p in params:
                nn.adadelta_step(p, cfg.rho, cfg.eps, cfg.lr)
            sums += len(idx) * np.array([obj.J_r, obj.J_c, obj.J])
        J_r, J_c, J = sums / n

        val_J_r = reconstruction_loss(model, X_val) if cfg.uses_reconstruction else 0.0
        val_acc = segment_accuracy(model, X_val, y_val) if cfg.uses_classifier else float("nan")
        metric = val_acc if maximize else val_J_r
        history.records.append(EpochRecord(epoch, J_r, J_c, J, val_acc, val_J_r, time.perf_counter() - t0))
        log.info("epoch %d J=%.5f J_r=%.5f J_c=%.5f val_acc=%.4f val_J_r=%.5f", epoch, J, J_r, J_c, val_acc, val_J_r)

        improved = metric > best_metric if maximize else metric < best_metric
        if improved:
            best_metric = metric
            best_values = _snapshot(model)
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if since_best >= cfg.patience:
            break
        if cfg.mode == "ronet":
            if J_r <= 1e-3 or (prev_J_r is not None and abs(prev_J_r - J_r) < 1e-4):
                break
            prev_J_r = J_r

    _restore(model, best_values)
    model.zero_grad()
    return model, history


def prepare_training(
    train_set: Sequence[FeatureMatrix],
    val_set: Sequence[FeatureMatrix],
    config: ArnetConfig,
) -> tuple[ArnetModel, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Label map, standardizer and a freshly initialized model.

    Class labels are the dense index of the sorted distinct training
    driver ids; ``config.n_classes`` is overridden to match.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be nonempty")
    labels = sorted({m.driver_id for m in train_set})
    index = {d: i for i, d in enumerate(labels)}
    unknown = sorted({m.driver_id for m in val_set} - set(index))
    if unknown:
        raise ValueError(f"validation drivers not in training set: {unknown[:5]}")
    config = config.replace(n_classes=len(labels))
    model = ArnetModel.init(config, labels)
    X_tr, X_va = as_batch(list(train_set)), as_batch(list(val_set))
    if config.standardize:
        model.fit_standardizer(X_tr)
    y_tr = np.array([index[m.driver_id] for m in train_set])
    y_va = np.array([index[m.driver_id] for m in val_set])
    return model, X_tr, y_tr, X_va, y_va


def fit(
    train_set: Sequence[FeatureMatrix],
    val_set: Sequence[FeatureMatrix],
    config: ArnetConfig,
) -> tuple[ArnetModel, TrainHistory]:
    model, X_tr, y_tr, X_va, y_va = prepare_training(train_set, val_set, config)
    return train(model, X_tr, y_tr, X_va, y_va)


# -- checkpoints ---------------------------------------------------------------


def _tensor_table(model: ArnetModel) -> list[tuple[str, np.ndarray]]:
    table = [("input_mean", model.input_mean), ("input_std", model.input_std)]
    table += [(p.name, p.value) for p in model.params()]
    return table


def _format_config(cfg: ArnetConfig) -> str:
    items = []
    for f in sorted(dataclasses.fields(cfg), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        items.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
    return " ".join(items)


def _parse_config(line: str) -> ArnetConfig:
    types = {f.name: f.type for f in dataclasses.fields(ArnetConfig)}
    kw = {}
    for item in line.split():
        key, sep, raw = item.partition("=")
        if not sep or key not in types:
            raise CheckpointError(f"bad config entry {item!r}")
        t = types[key]
        if t in ("int", int):
            kw[key] = int(raw)
        elif t in ("float", float):
            kw[key] = float(raw)
        elif t in ("bool", bool):
            if raw not in ("True", "False"):
                raise CheckpointError(f"bad boolean for {key}: {raw!r}")
            kw[key] = raw == "True"
        else:
            kw[key] = raw
    try:
        return ArnetConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config: {exc}") from None


def checkpoint_bytes(model: ArnetModel) -> bytes:
    for d in model.labels:
        if any(ch in d for ch in ",\n\r\0"):
            raise ValueError(f"driver id {d!r} cannot be stored in a checkpoint")
    header = [MAGIC, _format_config(model.config), ",".join(f"{i}:{d}" for i, d in enumerate(model.labels))]
    blobs = []
    offset = 0
    for name, arr in _tensor_table(model):
        blob = np.asarray(arr, dtype="<f4").tobytes()
        dims = ",".join(str(d) for d in arr.shape)
        header.append(f"{name} {arr.ndim} {dims} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    return ("\n".join(header) + "\n").encode("utf-8") + b"\0" + b"".join(blobs)


def save_model(model: ArnetModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def model_from_bytes(data: bytes) -> ArnetModel:
    sep = data.find(b"\0")
    if sep < 0:
        raise CheckpointError("missing header separator")
    try:
        lines = data[:sep].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise CheckpointError("header is not valid text") from None
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError("bad magic")
    if len(lines) < 3:
        raise CheckpointError("truncated header")
    cfg = _parse_config(lines[1])
    labels = []
    if lines[2]:
        for i, item in enumerate(lines[2].split(",")):
            idx, _, driver = item.partition(":")
            if idx != str(i):
                raise CheckpointError(f"label map entry {item!r} out of order")
            labels.append(driver)
    if len(labels) != cfg.n_classes:
        raise CheckpointError(f"label map has {len(labels)} entries for {cfg.n_classes} classes")

    model = ArnetModel.init(cfg, labels, zero=True)
    expected = _tensor_table(model)
    entries = lines[3:]
    if len(entries) != len(expected):
        raise CheckpointError(f"checkpoint lists {len(entries)} tensors, expected {len(expected)}")
    body = data[sep + 1:]
    loaded = {}
    for line, (name, ref) in zip(entries, expected):
        parts = line.split(" ")
        if len(parts) != 5 or parts[0] != name:
            raise CheckpointError(f"tensor entry {line!r}: expected {name}")
        try:
            ndim, offset, nbytes = int(parts[1]), int(parts[3]), int(parts[4])
            shape = tuple(int(d) for d in parts[2].split(",")) if parts[2] else ()
        except ValueError:
            raise CheckpointError(f"tensor {name}: malformed entry {line!r}") from None
        if ndim != len(shape) or shape != ref.shape:
            raise CheckpointError(f"tensor {name}: shape {shape} does not match config shape {ref.shape}")
        if nbytes != 4 * int(np.prod(shape)):
            raise CheckpointError(f"tensor {name}: {nbytes} bytes for shape {shape}")
        if offset + nbytes > len(body):
            raise CheckpointError(f"tensor {name}: blob truncated")
        arr = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=offset).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name}: non-finite values")
        loaded[name] = arr.reshape(shape)

    model.input_mean = loaded.pop("input_mean")
    model.input_std = loaded.pop("input_std")
    for p in model.params():
        p.value[...] = loaded[p.name]
    return model


def load_model(path) -> ArnetModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return model_from_bytes(data)


def clone(model: ArnetModel) -> ArnetModel:
    return copy.deepcopy(model)

