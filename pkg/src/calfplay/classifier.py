"""Numpy MLP for play classification: forward/backward, Adam, early stopping, evaluation.

Architecture is affine -> ReLU -> dropout -> affine -> ReLU -> dropout ->
affine, 1024 -> 512 -> 256 -> 3 by default.  Weights start at
U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases at zero.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Any, Sequence

import numpy as np

from .errors import CalfplayError

LAYER_SIZES = (1024, 512, 256, 3)
PARAM_COUNT = 656_899
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
INIT_SCHEME = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases"
CHECKPOINT_MAGIC = b"CALFMLP1"

Params = dict[str, np.ndarray]


def param_names(n_layers: int) -> list[str]:
    return [name for k in range(1, n_layers + 1) for name in (f"W{k}", f"b{k}")]


def count_params(params: Params) -> int:
    return sum(int(p.size) for p in params.values())


def init_mlp(seed: int, sizes: Sequence[int] = LAYER_SIZES, dtype=np.float32) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for k, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:]), start=1):
        bound = 1.0 / math.sqrt(fan_in)
        params[f"W{k}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        params[f"b{k}"] = np.zeros(fan_out, dtype=dtype)
    if tuple(sizes) == LAYER_SIZES:
        assert count_params(params) == PARAM_COUNT, count_params(params)
    return params


def _n_layers(params: Params) -> int:
    return sum(1 for k in params if k.startswith("W"))


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)   # pre-activations of hidden layers
    masks: list[np.ndarray | None] = field(default_factory=list)  # scaled dropout masks
    outs: list[np.ndarray] = field(default_factory=list)  # hidden outputs after dropout


def forward(
    params: Params,
    x: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout_p: float = 0.5,
) -> tuple[np.ndarray, ForwardCache]:
    """Logits for a batch; train mode applies inverted dropout (mask / (1-p))."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params["W1"].shape[0]:
        raise ValueError(f"input shape {x.shape} does not match layer 1 ({params['W1'].shape[0]} inputs)")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    if train and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    dtype = params["W1"].dtype
    h = x.astype(dtype, copy=False)
    cache = ForwardCache(x=h)
    L = _n_layers(params)
    for k in range(1, L):
        z = h @ params[f"W{k}"] + params[f"b{k}"]
        h = np.maximum(z, 0)
        mask = None
        if train and dropout_p > 0:
            keep = rng.random(h.shape) >= dropout_p
            mask = keep.astype(dtype) / dtype.type(1 - dropout_p)
            h = h * mask
        cache.pre.append(z)
        cache.masks.append(mask)
        cache.outs.append(h)
    logits = h @ params[f"W{L}"] + params[f"b{L}"]
    return logits, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient wrt the logits."""
    logits = np.asarray(logits)
    y = np.asarray(y, dtype=np.int64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(b), y]))
    grad = softmax(logits)
    grad[np.arange(b), y] -= 1
    return loss, grad / b


def backward(params: Params, cache: ForwardCache, dlogits: np.ndarray) -> Params:
    L = _n_layers(params)
    if dlogits.shape != (cache.x.shape[0], params[f"W{L}"].shape[1]):
        raise ValueError(f"upstream gradient shape {dlogits.shape} does not match the cached batch")
    grads: Params = {}
    g = dlogits.astype(params["W1"].dtype, copy=False)
    for k in range(L, 0, -1):
        h_in = cache.outs[k - 2] if k > 1 else cache.x
        grads[f"W{k}"] = h_in.T @ g
        grads[f"b{k}"] = g.sum(axis=0)
        if k > 1:
            g = g @ params[f"W{k}"].T
            mask = cache.masks[k - 2]
            if mask is not None:
                g = g * mask
            g = g * (cache.pre[k - 2] > 0)
    return grads


@dataclass
class AdamState:
    m: Params
    v: Params
    t: int = 0


def adam_init(params: Params) -> AdamState:
    return AdamState({k: np.zeros_like(p) for k, p in params.items()},
                     {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Params, grads: Params, state: AdamState, lr: float, weight_decay: float = 0.0,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """One in-place Adam update; L2 enters as ``weight_decay * param`` added to the gradient."""
    state.t += 1
    t = state.t
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if weight_decay:
            g = g + weight_decay * p
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 1e-5
    batch_size: int = 64
    dropout_p: float = 0.5
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be at least 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")


class EarlyStopping:
    """Stop after ``patience`` epochs without a strictly lower validation loss."""

    def __init__(self, patience: int = 5) -> None:
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; True when it improved on the best so far."""
        if val_loss < self.best_loss:
            self.best_loss, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def _batched_logits(params: Params, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    parts = [forward(params, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, params[f"W{_n_layers(params)}"].shape[1]))


def loss_and_accuracy(params: Params, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    logits = _batched_logits(params, x)
    loss, _ = cross_entropy(logits, y)
    return loss, float(np.mean(np.argmax(logits, axis=1) == y))


@dataclass
class TrainResult:
    params: Params
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    epochs_run: int


def _write(log_stream: IO[str] | None, obj: dict) -> None:
    if log_stream is not None:
        log_stream.write(json.dumps(obj, sort_keys=True) + "\n")


def train(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    cfg: TrainConfig | None = None,
    log_stream: IO[str] | None = None,
    provenance: dict | None = None,
    sizes: Sequence[int] | None = None,
) -> TrainResult:
    """Minibatch Adam with per-epoch shuffling and early stopping on validation loss.

    Returns the parameters of the epoch with the lowest validation loss.
    The run log gets a header line, one line per epoch and a closing line.
    """
    cfg = cfg or TrainConfig()
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    x_train = np.asarray(x_train, dtype=np.float32)
    x_val = np.asarray(x_val, dtype=np.float32)
    y_train = np.asarray(y_train, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    sizes = tuple(sizes) if sizes else (x_train.shape[1],) + LAYER_SIZES[1:]
    params = init_mlp(cfg.seed, sizes)
    state = adam_init(params)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    _write(log_stream, {
        "type": "header",
        "config": asdict(cfg),
        "layer_sizes": list(sizes),
        "param_count": count_params(params),
        "init": INIT_SCHEME,
        "adam": {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS},
        "n_train": int(len(x_train)),
        "n_val": int(len(x_val)),
        "provenance": provenance or {},
    })

    stopper = EarlyStopping(cfg.patience)
    best = {k: p.copy() for k, p in params.items()}
    history = []
    n = len(x_train)
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, cache = forward(params, x_train[idx], train=True, rng=dropout_rng, dropout_p=cfg.dropout_p)
            loss, dlogits = cross_entropy(logits, y_train[idx])
            grads = backward(params, cache, dlogits)
            adam_step(params, grads, state, cfg.learning_rate, cfg.weight_decay)
            loss_sum += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y_train[idx]))
        val_loss, val_acc = loss_and_accuracy(params, x_val, y_val)
        improved = stopper.update(epoch, val_loss)
        if improved:
            best = {k: p.copy() for k, p in params.items()}
        record = {
            "type": "epoch",
            "epoch": epoch,
            "train_loss": loss_sum / n,
            "train_accuracy": correct / n,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
            "improved": improved,
        }
        history.append(record)
        _write(log_stream, record)
        if stopper.should_stop:
            break
    _write(log_stream, {"type": "final", "best_epoch": stopper.best_epoch,
                        "best_val_loss": stopper.best_loss, "epochs_run": epoch})
    return TrainResult(best, history, stopper.best_epoch, stopper.best_loss, epoch)


@dataclass
class EvalReport:
    classes: list[str]
    counts: list[list[int]]          # rows = true class, columns = predicted
    row_percent: list[list[float | None]]
    accuracy: float
    precision: list[float | None]
    recall: list[float | None]
    f1: list[float | None]
    support: list[int]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        width = max(len(c) for c in self.classes) + 2
        lines = [f"accuracy: {self.accuracy:.4f}", "",
                 f"{'class':<{width}}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}"]

        def fmt(v):
            return f"{v:10.4f}" if v is not None else f"{'n/a':>10}"

        for i, c in enumerate(self.classes):
            lines.append(f"{c:<{width}}{fmt(self.precision[i])}{fmt(self.recall[i])}{fmt(self.f1[i])}{self.support[i]:>9}")
        lines += ["", "confusion (rows true, columns predicted; counts and row %):",
                  " " * width + "".join(f"{c[:14]:>16}" for c in self.classes)]
        for i, c in enumerate(self.classes):
            cells = []
            for j in range(len(self.classes)):
                pct = self.row_percent[i][j]
                cells.append(f"{self.counts[i][j]:>7} ({pct:5.1f}%)" if pct is not None else f"{self.counts[i][j]:>7} (  n/a)")
            lines.append(f"{c:<{width}}" + "".join(f"{s:>16}" for s in cells))
        return "\n".join(lines) + "\n"


def evaluate_predictions(y_true: Sequence[int], y_pred: Sequence[int], classes: Sequence[str]) -> EvalReport:
    """Confusion matrix and per-class precision/recall/F1.

    Precision is undefined (None) for a class never predicted and recall for
    a class absent from ``y_true``; F1 is undefined when either is.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    k = len(classes)
    if len(y_true) == 0:
        raise ValueError("empty evaluation set")
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in shape")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision, recall, f1, row_pct = [], [], [], []
    for i in range(k):
        tp = int(cm[i, i])
        p = tp / int(predicted[i]) if predicted[i] else None
        r = tp / int(support[i]) if support[i] else None
        if p is None or r is None:
            f = None
        else:
            f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        precision.append(p)
        recall.append(r)
        f1.append(f)
        row_pct.append([int(c) / int(support[i]) * 100 if support[i] else None for c in cm[i]])
    return EvalReport(
        classes=list(classes),
        counts=cm.tolist(),
        row_percent=row_pct,
        accuracy=int(np.trace(cm)) / int(cm.sum()),
        precision=precision,
        recall=recall,
        f1=f1,
        support=support.tolist(),
    )


def evaluate(params: Params, x: np.ndarray, y: np.ndarray, classes: Sequence[str]) -> EvalReport:
    if len(x) == 0:
        raise ValueError("empty test split")
    logits = _batched_logits(params, np.asarray(x, dtype=params["W1"].dtype))
    return evaluate_predictions(y, np.argmax(logits, axis=1), classes)


def save_checkpoint(path: str | Path, params: Params, config: dict[str, Any] | None = None,
                    provenance: dict[str, Any] | None = None) -> None:
    """Write magic, uint32 header length, JSON header, then float32 LE arrays in header order."""
    names = param_names(_n_layers(params))
    header = {
        "order": names,
        "shapes": {k: list(params[k].shape) for k in names},
        "dtype": "<f4",
        "config": config or {},
        "provenance": provenance or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(params[k], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[Params, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CalfplayError(f"{path}: not a classifier checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    params: Params = {}
    for k in header["order"]:
        shape = tuple(header["shapes"][k])
        size = int(np.prod(shape))
        end = off + 4 * size
        if end > len(data):
            raise CalfplayError(f"{path}: truncated at parameter {k}")
        params[k] = np.frombuffer(data[off:end], dtype="<f4").reshape(shape).astype(np.float32)
        off = end
    if off != len(data):
        raise CalfplayError(f"{path}: {len(data) - off} trailing bytes")
    return params, header
