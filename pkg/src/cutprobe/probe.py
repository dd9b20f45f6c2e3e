"""Softmax linear probe: the one trainable layer of the toolkit.

Mini-batch gradient descent with momentum on softmax cross-entropy, and
nothing else: no weight decay, no augmentation, no schedule. The training
configuration deliberately has no regularization field. Model selection
across epochs uses evaluation-set accuracy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DataError, FormatError, ShapeMismatchError
from .weights import parse_weights, serialize_weights

# distinct RNG stream tags so init and shuffling never share a sequence
_INIT_TAG = 0x1317
_SHUFFLE_TAG = 0x51F7


@dataclass
class ProbeModel:
    """Weights (K,N) and bias (K,) of the softmax classifier."""

    W: np.ndarray
    b: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def num_features(self) -> int:
        return self.W.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        """Batch logits, features (B,N) -> (B,K)."""
        return features @ self.W.T + self.b

    def copy(self) -> "ProbeModel":
        return ProbeModel(self.W.copy(), self.b.copy())


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    max_epochs: int = 50
    seed: int = 0
    momentum: float = 0.9
    standardize: bool = False  # off by default: features are used raw

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DataError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise DataError(
                f"batch_size and max_epochs must be positive, got "
                f"{self.batch_size}, {self.max_epochs}"
            )
        if not 0 <= self.momentum < 1:
            raise DataError(f"momentum must be in [0,1), got {self.momentum}")


@dataclass
class TrainTrace:
    """Per-epoch training loss and evaluation accuracy."""

    train_loss: list[float] = field(default_factory=list)
    eval_accuracy: list[float] = field(default_factory=list)
    selected_epoch: int = -1  # index into the lists, 0-based


def init_probe(num_classes: int, num_features: int, seed: int) -> ProbeModel:
    """Uniform(-a, a) weights with a = sqrt(6/(K+N)), zero bias."""
    if num_classes < 2:
        raise DataError(f"probe needs at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _INIT_TAG]))
    a = math.sqrt(6.0 / (num_classes + num_features))
    w = rng.uniform(-a, a, size=(num_classes, num_features)).astype(np.float32)
    return ProbeModel(W=w, b=np.zeros(num_classes, dtype=np.float32))


def cross_entropy_grad(
    model: ProbeModel, features: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy over a batch and its exact gradients.

    Internals run in float64; gradients come back float32 to match the
    model parameters. Per sample the weight gradient is
    (softmax(logits) - onehot(label)) outer features, averaged.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[1] != model.num_features:
        raise ShapeMismatchError(
            f"features shape {x.shape} does not match probe with "
            f"{model.num_features} inputs"
        )
    if y.shape != (x.shape[0],):
        raise ShapeMismatchError(f"labels shape {y.shape} does not match batch {x.shape[0]}")
    k = model.num_classes
    if y.size and (y.min() < 0 or y.max() >= k):
        raise DataError(f"label out of range [0, {k}): found {int(y.min())}..{int(y.max())}")
    batch = x.shape[0]
    logits = x @ model.W.T.astype(np.float64) + model.b.astype(np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(logits).sum(axis=1, keepdims=True))
    logp = logits - logsumexp
    loss = float(-logp[np.arange(batch), y].mean())
    delta = np.exp(logp)
    delta[np.arange(batch), y] -= 1.0
    grad_w = (delta.T @ x / batch).astype(np.float32)
    grad_b = delta.mean(axis=0).astype(np.float32)
    return loss, grad_w, grad_b


def _accuracy(model: ProbeModel, x: np.ndarray, y: np.ndarray) -> float:
    # argmax takes the first maximum, so logit ties resolve to the lowest class
    pred = np.argmax(model.logits(x), axis=1)
    return float((pred == y).mean())


def _standardizer(x: np.ndarray):
    mean = x.mean(axis=0, dtype=np.float64).astype(np.float32)
    std = x.std(axis=0, dtype=np.float64).astype(np.float32)
    std = np.where(std == 0, np.float32(1), std)
    return mean, std


def train_probe(
    train: tuple[np.ndarray, np.ndarray],
    eval_set: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    num_classes: int | None = None,
    init: ProbeModel | None = None,
) -> tuple[ProbeModel, TrainTrace]:
    """Train on (features, labels) arrays, select the epoch with the best
    evaluation accuracy (earliest on ties), return that snapshot + trace.

    ``init`` overrides the seeded initialization with a caller-supplied
    starting point (copied, not mutated).

    With config.standardize the per-dimension transform fitted on the
    training set is folded into the returned weights, so the model always
    applies to raw features.
    """
    x_train, y_train = train
    x_eval, y_eval = eval_set
    x_train = np.asarray(x_train, dtype=np.float32)
    x_eval = np.asarray(x_eval, dtype=np.float32)
    y_train = np.asarray(y_train, dtype=np.int64)
    y_eval = np.asarray(y_eval, dtype=np.int64)
    if x_train.shape[0] == 0:
        raise DataError("training set is empty")
    if x_eval.shape[0] == 0:
        raise DataError("evaluation set is empty")
    if x_train.ndim != 2 or x_eval.ndim != 2 or x_train.shape[1] != x_eval.shape[1]:
        raise ShapeMismatchError(
            f"train features {x_train.shape} and eval features {x_eval.shape} "
            f"must be 2-D with equal width"
        )
    k = num_classes if num_classes is not None else int(max(y_train.max(), y_eval.max())) + 1

    mean = std = None
    if config.standardize:
        mean, std = _standardizer(x_train)
        x_train = (x_train - mean) / std
        x_eval = (x_eval - mean) / std

    if init is not None:
        if init.W.shape != (k, x_train.shape[1]):
            raise ShapeMismatchError(
                f"init model shape {init.W.shape} does not match "
                f"({k}, {x_train.shape[1]})"
            )
        model = init.copy()
    else:
        model = init_probe(k, x_train.shape[1], config.seed)
    vel_w = np.zeros_like(model.W)
    vel_b = np.zeros_like(model.b)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _SHUFFLE_TAG]))
    lr = np.float32(config.learning_rate)
    mom = np.float32(config.momentum)

    trace = TrainTrace()
    best: ProbeModel | None = None
    n = x_train.shape[0]
    for epoch in range(config.max_epochs):
        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            loss, grad_w, grad_b = cross_entropy_grad(model, x_train[idx], y_train[idx])
            vel_w = mom * vel_w - lr * grad_w
            vel_b = mom * vel_b - lr * grad_b
            model.W += vel_w
            model.b += vel_b
            loss_sum += loss * len(idx)
        trace.train_loss.append(loss_sum / n)
        acc = _accuracy(model, x_eval, y_eval)
        trace.eval_accuracy.append(acc)
        if trace.selected_epoch < 0 or acc > trace.eval_accuracy[trace.selected_epoch]:
            trace.selected_epoch = epoch
            best = model.copy()
    assert best is not None
    if mean is not None:
        best = ProbeModel(W=best.W / std[None, :], b=best.b - best.W @ (mean / std))
    return best, trace


def evaluate(
    model: ProbeModel, features: tuple[np.ndarray, np.ndarray]
) -> tuple[float, np.ndarray]:
    """Accuracy and a (true, predicted) confusion matrix on a feature set."""
    x, y = features
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise DataError("cannot evaluate on an empty feature set")
    if x.ndim != 2 or x.shape[1] != model.num_features:
        raise ShapeMismatchError(
            f"features shape {x.shape} does not match probe with "
            f"{model.num_features} inputs"
        )
    k = model.num_classes
    if y.min() < 0 or y.max() >= k:
        raise DataError(f"label out of range [0, {k}): found {int(y.min())}..{int(y.max())}")
    pred = np.argmax(model.logits(x), axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return float((pred == y).mean()), confusion


def save_probe(path, model: ProbeModel, metadata: dict | None = None) -> None:
    """Serialize a probe into the weight container format.

    The metadata dict (cut-point, seed, training config, ...) rides along
    as tensor "probe.meta": the UTF-8 bytes of its JSON encoding, one byte
    per float32 value, which round-trips exactly.
    """
    tensors = {"probe.W": model.W, "probe.b": model.b}
    meta_json = json.dumps(metadata or {}, sort_keys=True)
    tensors["probe.meta"] = np.frombuffer(meta_json.encode("utf-8"), dtype=np.uint8).astype(
        np.float32
    )
    with open(path, "wb") as fh:
        fh.write(serialize_weights(tensors))


def load_probe(path) -> tuple[ProbeModel, dict]:
    with open(path, "rb") as fh:
        store = parse_weights(fh.read())
    for key in ("probe.W", "probe.b", "probe.meta"):
        if key not in store:
            raise FormatError(f"probe file is missing tensor '{key}'")
    meta_bytes = store["probe.meta"].astype(np.uint8).tobytes()
    metadata = json.loads(meta_bytes.decode("utf-8")) if meta_bytes else {}
    w = store["probe.W"]
    b = store["probe.b"]
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise FormatError(
            f"probe tensors have inconsistent shapes W {w.shape}, b {b.shape}"
        )
    return ProbeModel(W=w.copy(), b=b.copy()), metadata


def config_metadata(config: TrainConfig) -> dict:
    """JSON-safe dict of a training configuration."""
    return asdict(config)
