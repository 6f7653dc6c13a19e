"""Backbones, classifier heads, pretraining, linear probing and full fine-tuning.

A backbone is a small fully connected tanh network standing in for a
pretrained vision model. Its "strength" is the pair (width, pretraining
breadth): wider networks pretrained on more concepts play the role of
foundation models, narrow ones pretrained on few concepts the role of
conventional CNNs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import binfmt
from .datagen import Dataset, SplitSpec, split
from .errors import ConfigError, DataError, ShapeError
from .numcore import RngStream, SgdHyper, as_matrix, cross_entropy_batch, lr_at_epoch, sgd_step, softmax_rows

logger = logging.getLogger(__name__)

TRAINING_MODES = ("linear_probe", "full_finetune")
DEFAULT_BATCH_SIZE = 32
VALIDATION_FRACTION = 0.1


@dataclass(frozen=True)
class BackboneSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    pretrain_classes: int
    pretrain_samples_per_class: int = 100
    activation: str = "tanh"
    strength_tag: str = "mid"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ConfigError("hidden_widths must be a non-empty sequence of positive widths")
        if self.pretrain_classes < 2:
            raise ConfigError("pretraining needs at least 2 classes")
        if self.activation != "tanh":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def feature_dim(self) -> int:
        return self.hidden_widths[-1]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "pretrain_classes": self.pretrain_classes,
            "pretrain_samples_per_class": self.pretrain_samples_per_class,
            "activation": self.activation,
            "strength_tag": self.strength_tag,
        }


def preset_spec(strength: str, input_dim: int = 32, samples_per_class: int = 100) -> BackboneSpec:
    """The three stock backbones: shallow (16 wide, 8 classes), mid (64, 24), strong (256, 64)."""
    widths, classes = {"shallow": (16, 8), "mid": (64, 24), "strong": (256, 64)}[strength]
    return BackboneSpec(input_dim, (widths, widths), classes, samples_per_class, "tanh", strength)


@dataclass(eq=False)
class Backbone:
    spec: BackboneSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    frozen: bool = True

    def __post_init__(self):
        if self.frozen:
            self.freeze()

    def freeze(self) -> None:
        self.frozen = True
        for arr in (*self.weights, *self.biases):
            arr.flags.writeable = False

    def copy(self, frozen: bool = False) -> "Backbone":
        return Backbone(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases], frozen=frozen)

    def param_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a).tobytes() for pair in zip(self.weights, self.biases) for a in pair)


@dataclass(eq=False)
class Head:
    weight: np.ndarray  # (classes, feature_dim)
    bias: np.ndarray  # (classes,)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "Head":
        return Head(self.weight.copy(), self.bias.copy())


@dataclass
class TrainReport:
    epochs_run: int
    best_validation_accuracy: float
    selected_epoch: int
    final_train_loss: float
    validation_history: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")


@dataclass(eq=False)
class ComposedModel:
    backbone: Backbone
    head: Head
    training_mode: str = "linear_probe"
    trained: bool = False

    def __post_init__(self):
        if self.training_mode not in TRAINING_MODES:
            raise ConfigError(f"unknown training mode {self.training_mode!r}")
        if self.head.weight.shape[1] != self.backbone.spec.feature_dim:
            raise ShapeError("head width does not match backbone feature dimension")

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def input_dim(self) -> int:
        return self.backbone.spec.input_dim

    def logits(self, inputs) -> np.ndarray:
        return _head_forward(self.head, extract_features(self.backbone, inputs))


# -- forward pieces -------------------------------------------------------------


def _forward_layers(weights, biases, x):
    acts = [x]
    h = x
    for w, b in zip(weights, biases):
        h = np.tanh(h @ w.T + b)
        acts.append(h)
    return acts


def _head_forward(head, feats):
    return feats @ head.weight.T + head.bias


def extract_features(backbone: Backbone, inputs) -> np.ndarray:
    """Final hidden-layer activations for each input row."""
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != backbone.spec.input_dim:
        raise ShapeError(f"inputs have {x.shape[1]} columns, backbone expects {backbone.spec.input_dim}")
    return _forward_layers(backbone.weights, backbone.biases, x)[-1]


def predict(model: ComposedModel, inputs, mode: str = "hard") -> np.ndarray:
    """Hard mode: argmax class per row (lowest index wins ties). Soft mode: probability rows."""
    probs = softmax_rows(model.logits(inputs))
    if mode == "soft":
        return probs
    if mode == "hard":
        return np.argmax(probs, axis=1).astype(np.int64)
    raise ConfigError(f"unknown prediction mode {mode!r}")


# -- initialisation -------------------------------------------------------------


def _fan_in_uniform(rng: RngStream, fan_out, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_head(feature_dim: int, num_classes: int, rng: RngStream) -> Head:
    return Head(_fan_in_uniform(rng, num_classes, feature_dim), np.zeros(num_classes))


def init_backbone(spec: BackboneSpec, rng: RngStream) -> Backbone:
    weights, biases = [], []
    fan_in = spec.input_dim
    for width in spec.hidden_widths:
        weights.append(_fan_in_uniform(rng, width, fan_in))
        biases.append(np.zeros(width))
        fan_in = width
    return Backbone(spec, weights, biases, frozen=False)


def compose(backbone: Backbone, num_classes: int, rng: RngStream, training_mode: str = "linear_probe") -> ComposedModel:
    """Attach a freshly initialised head to ``backbone``."""
    return ComposedModel(backbone, init_head(backbone.spec.feature_dim, num_classes, rng), training_mode)


# -- training -------------------------------------------------------------------


def _backprop(weights, biases, head, x, y):
    """Loss and gradients for every layer (backbone layers first, then head)."""
    acts = _forward_layers(weights, biases, x)
    feats = acts[-1]
    loss, dz = cross_entropy_batch(_head_forward(head, feats), y)
    grads_w = [None] * len(weights)
    grads_b = [None] * len(biases)
    head_gw = dz.T @ feats
    head_gb = dz.sum(axis=0)
    delta = dz @ head.weight
    for i in range(len(weights) - 1, -1, -1):
        delta = delta * (1.0 - acts[i + 1] ** 2)
        grads_w[i] = delta.T @ acts[i]
        grads_b[i] = delta.sum(axis=0)
        if i:
            delta = delta @ weights[i]
    return loss, grads_w, grads_b, head_gw, head_gb


def _head_backprop(head, feats, y):
    loss, dz = cross_entropy_batch(_head_forward(head, feats), y)
    return loss, dz.T @ feats, dz.sum(axis=0)


class _Params:
    """Flat list of parameter arrays plus matching momentum buffers."""

    def __init__(self, arrays):
        self.arrays = [a.copy() for a in arrays]
        self.velocity = [np.zeros_like(a) for a in arrays]

    def step(self, grads, hyper, lr):
        for i, g in enumerate(grads):
            self.arrays[i], self.velocity[i] = sgd_step(self.arrays[i], g, self.velocity[i], hyper, lr)


def _accuracy(pred, truth):
    return float(np.mean(pred == truth)) if len(truth) else float("nan")


def _validation_split(labeled: Dataset, rng: RngStream):
    seed = int(rng.child("validation-split").integers(0, 2**63))
    train, val = split(labeled, SplitSpec((1.0 - VALIDATION_FRACTION, VALIDATION_FRACTION), seed), tags=("train", "val"))
    return train, val


def _fit(model: ComposedModel, labeled: Dataset, hyper: SgdHyper, epochs: int, rng: RngStream,
         tune_backbone: bool, batch_size: int):
    if labeled is None or len(labeled) == 0:
        raise DataError("cannot train on an empty dataset")
    if labeled.labels is None:
        raise DataError("training data must be labeled")
    if labeled.dim != model.input_dim:
        raise ShapeError(f"data has {labeled.dim} columns, model expects {model.input_dim}")
    if labeled.labels.max() >= model.num_classes:
        raise DataError("labels exceed the model's class count")
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    train, val = _validation_split(labeled, rng)
    n_bb = len(model.backbone.weights)
    if tune_backbone:
        params = _Params([*model.backbone.weights, *model.backbone.biases, model.head.weight, model.head.bias])
        xtr = train.features
    else:
        # frozen features never change, so compute them once
        params = _Params([model.head.weight, model.head.bias])
        xtr = extract_features(model.backbone, train.features)
        xval = extract_features(model.backbone, val.features) if len(val) else None
    ytr = train.labels
    shuffle_rng = rng.child("minibatch-order")

    def unpack(arrays):
        if tune_backbone:
            ws, bs = arrays[:n_bb], arrays[n_bb : 2 * n_bb]
            return ws, bs, Head(arrays[-2], arrays[-1])
        return model.backbone.weights, model.backbone.biases, Head(arrays[0], arrays[1])

    def val_predictions(arrays):
        ws, bs, head = unpack(arrays)
        if tune_backbone:
            feats = _forward_layers(ws, bs, val.features)[-1]
        else:
            feats = xval
        return np.argmax(_head_forward(head, feats), axis=1)

    best_acc, best_epoch, best_arrays = -1.0, 0, None
    history = []
    epoch_loss = float("nan")
    n = xtr.shape[0]
    for epoch in range(epochs):
        lr = lr_at_epoch(hyper, epoch)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            ws, bs, head = unpack(params.arrays)
            if tune_backbone:
                loss, gw, gb, hgw, hgb = _backprop(ws, bs, head, xtr[idx], ytr[idx])
                params.step([*gw, *gb, hgw, hgb], hyper, lr)
            else:
                loss, hgw, hgb = _head_backprop(head, xtr[idx], ytr[idx])
                params.step([hgw, hgb], hyper, lr)
            total += loss * len(idx)
        epoch_loss = total / n
        if len(val):
            acc = _accuracy(val_predictions(params.arrays), val.labels)
        else:
            ws, bs, head = unpack(params.arrays)
            feats = xtr if not tune_backbone else _forward_layers(ws, bs, xtr)[-1]
            acc = _accuracy(np.argmax(_head_forward(head, feats), axis=1), ytr)
        history.append(acc)
        if acc > best_acc:
            best_acc, best_epoch, best_arrays = acc, epoch + 1, [a.copy() for a in params.arrays]

    ws, bs, head = unpack(best_arrays)
    if tune_backbone:
        backbone = Backbone(model.backbone.spec, list(ws), list(bs), frozen=False)
    else:
        backbone = model.backbone
    trained = ComposedModel(backbone, head, "full_finetune" if tune_backbone else "linear_probe", trained=True)
    train_acc = _accuracy(predict(trained, train.features), train.labels)
    report = TrainReport(epochs, best_acc, best_epoch, epoch_loss, history, train_acc)
    logger.debug("trained %s: val=%.4f epoch=%d loss=%.4f", trained.training_mode, best_acc, best_epoch, epoch_loss)
    return trained, report


def train_linear_probe(backbone: Backbone, labeled: Dataset, hyper: SgdHyper, epochs: int, rng: RngStream,
                       batch_size: int = DEFAULT_BATCH_SIZE) -> tuple[ComposedModel, TrainReport]:
    """Fit a fresh linear head on frozen backbone features.

    10% of ``labeled`` is held out; the returned head is the snapshot from the
    epoch with the best held-out accuracy (earliest epoch on ties).
    """
    if not backbone.frozen:
        raise ConfigError("linear probing requires a frozen backbone")
    if labeled is None or len(labeled) == 0:
        raise DataError("cannot train on an empty dataset")
    model = compose(backbone, labeled.class_count, rng.child("head-init"), "linear_probe")
    return _fit(model, labeled, hyper, epochs, rng, tune_backbone=False, batch_size=batch_size)


def full_finetune(model: ComposedModel, labeled: Dataset, hyper: SgdHyper, epochs: int, rng: RngStream,
                  batch_size: int = DEFAULT_BATCH_SIZE) -> tuple[ComposedModel, TrainReport]:
    """Update backbone and head together. The input model's arrays are left untouched."""
    return _fit(model, labeled, hyper, epochs, rng, tune_backbone=True, batch_size=batch_size)


def finetune_from(backbone: Backbone, labeled: Dataset, hyper: SgdHyper, epochs: int, rng: RngStream,
                  batch_size: int = DEFAULT_BATCH_SIZE) -> tuple[ComposedModel, TrainReport]:
    """Fresh head on a pretrained backbone, then full fine-tuning."""
    if labeled is None or len(labeled) == 0:
        raise DataError("cannot train on an empty dataset")
    model = compose(backbone, labeled.class_count, rng.child("head-init"), "full_finetune")
    return full_finetune(model, labeled, hyper, epochs, rng, batch_size)


def train_model(backbone: Backbone, labeled: Dataset, mode: str, hyper: SgdHyper, epochs: int, rng: RngStream,
                batch_size: int = DEFAULT_BATCH_SIZE) -> tuple[ComposedModel, TrainReport]:
    if mode == "linear_probe":
        return train_linear_probe(backbone, labeled, hyper, epochs, rng, batch_size)
    if mode == "full_finetune":
        return finetune_from(backbone, labeled, hyper, epochs, rng, batch_size)
    raise ConfigError(f"unknown training mode {mode!r}")


def pretrain_backbone(spec: BackboneSpec, pretrain_data: Dataset, hyper: SgdHyper, rng: RngStream,
                      epochs: int = 30, batch_size: int = DEFAULT_BATCH_SIZE) -> Backbone:
    """Supervised pretraining on a concept mixture; the pretraining head is thrown away.

    Uses every row for training (no validation hold-out) and returns the
    final-epoch weights, frozen.
    """
    if pretrain_data.class_count != spec.pretrain_classes:
        raise ConfigError(
            f"pretraining data has {pretrain_data.class_count} classes, spec expects {spec.pretrain_classes}"
        )
    if len(pretrain_data) == 0:
        raise DataError("empty pretraining set")
    if pretrain_data.dim != spec.input_dim:
        raise ShapeError("pretraining data dimension does not match the backbone spec")
    backbone = init_backbone(spec, rng.child("backbone-init"))
    head = init_head(spec.feature_dim, spec.pretrain_classes, rng.child("pretrain-head-init"))
    n_bb = len(backbone.weights)
    params = _Params([*backbone.weights, *backbone.biases, head.weight, head.bias])
    x, y = pretrain_data.features, pretrain_data.labels
    order_rng = rng.child("minibatch-order")
    for epoch in range(epochs):
        lr = lr_at_epoch(hyper, epoch)
        order = order_rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            a = params.arrays
            _, gw, gb, hgw, hgb = _backprop(a[:n_bb], a[n_bb : 2 * n_bb], Head(a[-2], a[-1]), x[idx], y[idx])
            params.step([*gw, *gb, hgw, hgb], hyper, lr)
    a = params.arrays
    return Backbone(spec, list(a[:n_bb]), list(a[n_bb : 2 * n_bb]), frozen=True)


# -- serialization ----------------------------------------------------------------


def _backbone_arrays(backbone, prefix=""):
    out = []
    for i, (w, b) in enumerate(zip(backbone.weights, backbone.biases)):
        out += [(f"{prefix}layer{i}.weight", w), (f"{prefix}layer{i}.bias", b)]
    return out


def save_backbone(backbone: Backbone, path) -> None:
    fields = {"spec": backbone.spec.to_dict(), "frozen": backbone.frozen}
    binfmt.write_container(path, "backbone", fields, _backbone_arrays(backbone))


def _backbone_from(header_spec, arrays, frozen, prefix=""):
    spec = BackboneSpec(**{**header_spec, "hidden_widths": tuple(header_spec["hidden_widths"])})
    n = len(spec.hidden_widths)
    ws = [arrays[f"{prefix}layer{i}.weight"] for i in range(n)]
    bs = [arrays[f"{prefix}layer{i}.bias"] for i in range(n)]
    return Backbone(spec, ws, bs, frozen=frozen)


def load_backbone(path) -> Backbone:
    header, arrays = binfmt.read_container(path, "backbone")
    return _backbone_from(header["spec"], arrays, bool(header["frozen"]))


def save_model(model: ComposedModel, path) -> None:
    fields = {
        "spec": model.backbone.spec.to_dict(),
        "frozen": model.backbone.frozen,
        "training_mode": model.training_mode,
        "trained": model.trained,
        "num_classes": model.num_classes,
    }
    arrays = _backbone_arrays(model.backbone, "backbone.") + [("head.weight", model.head.weight), ("head.bias", model.head.bias)]
    binfmt.write_container(path, "composed-model", fields, arrays)


def load_model(path) -> ComposedModel:
    header, arrays = binfmt.read_container(path, "composed-model")
    backbone = _backbone_from(header["spec"], arrays, bool(header["frozen"]), "backbone.")
    head = Head(arrays["head.weight"], arrays["head.bias"])
    return ComposedModel(backbone, head, header["training_mode"], trained=bool(header["trained"]))
