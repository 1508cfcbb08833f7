"""The frozen baseline classifier and the generic binary-classifier trainer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffnet
from .diffnet import MlpConfig, MlpParams
from .tabular import Dataset, EncodedMatrix, Schema, SchemaError, encode


class FrozenError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    include_protected: bool = False


def mlp_config(input_width: int, config: ClassifierConfig) -> MlpConfig:
    return MlpConfig((input_width, *config.hidden, 2), config.activation, "softmax")


@dataclass
class FitResult:
    params: MlpParams
    val_accuracy: float
    epochs: int
    history: list[float] = field(default_factory=list)


def hard_labels(probs: np.ndarray) -> np.ndarray:
    # argmax picks class 0 on ties
    return np.argmax(probs, axis=1)


def fit_binary(
    x: np.ndarray,
    y: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    config: ClassifierConfig,
    seed: int,
) -> tuple[MlpConfig, FitResult]:
    """Train a softmax MLP with Adam and early stopping on validation accuracy.

    Returns the parameters of the best validation epoch.
    """
    net = mlp_config(x.shape[1], config)
    rng = np.random.default_rng(seed)
    params = diffnet.init_params(net, rng)
    opt = diffnet.Adam(params, lr=config.lr)
    y = np.asarray(y, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    best = (-1.0, params.copy(), 0)
    history = []
    stale = 0
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            acts = diffnet.forward(net, opt.params, x[idx])
            _, g = diffnet.cross_entropy(acts[-1], y[idx])
            grads, _ = diffnet.backward(net, opt.params, acts, g)
            opt.step(grads)
        acc = float((hard_labels(diffnet.predict(net, opt.params, x_val)) == y_val).mean())
        history.append(acc)
        if acc > best[0]:
            best = (acc, opt.params.copy(), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return net, FitResult(best[1], best[0], epoch, history)


@dataclass
class Classifier:
    """A binary classifier over the encoded feature block of ``schema``."""

    config: MlpConfig
    params: MlpParams
    schema: Schema
    label: str
    include_protected: bool = False
    frozen: bool = True
    val_accuracy: float | None = None

    @property
    def schema_fingerprint(self) -> str:
        return self.schema.fingerprint()

    @property
    def input_width(self) -> int:
        return self.config.input_width

    def inputs(self, data: Dataset | EncodedMatrix) -> np.ndarray:
        m = data if isinstance(data, EncodedMatrix) else encode(data)
        if m.schema.feature_columns != self.schema.feature_columns:
            raise SchemaError("dataset features do not match the classifier's schema")
        if self.include_protected:
            return m.features_and_protected()
        return m.features

    def digest(self) -> str:
        return self.params.digest()

    def update(self, params: MlpParams) -> None:
        if self.frozen:
            raise FrozenError("classifier is frozen")
        self.params = params

    def to_dict(self) -> dict:
        return {
            "kind": "classifier",
            "schema": self.schema.to_dict(),
            "label": self.label,
            "include_protected": self.include_protected,
            "val_accuracy": self.val_accuracy,
            "network": diffnet.params_to_dict(self.config, self.params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Classifier":
        if d.get("kind") != "classifier":
            raise ValueError("not a classifier checkpoint")
        config, params = diffnet.params_from_dict(d["network"])
        return cls(config, params, Schema.from_dict(d["schema"]), d["label"],
                   d["include_protected"], True, d.get("val_accuracy"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Classifier":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_classifier(train: Dataset, val: Dataset, config: ClassifierConfig | None = None, seed: int = 0) -> Classifier:
    config = config or ClassifierConfig()
    if train.schema != val.schema:
        raise SchemaError("train and validation sets must share a schema")
    schema = train.schema
    if schema.column(schema.label_column).cardinality != 2:
        raise SchemaError("label must be binary")
    m_train, m_val = encode(train), encode(val)
    pick = (lambda m: m.features_and_protected()) if config.include_protected else (lambda m: m.features)
    net, fit = fit_binary(pick(m_train), train.labels, pick(m_val), val.labels, config, seed)
    return Classifier(net, fit.params, schema, schema.label_column, config.include_protected,
                      frozen=True, val_accuracy=fit.val_accuracy)


def predict(c: Classifier, batch: EncodedMatrix | np.ndarray) -> np.ndarray:
    """Class probabilities, one row per input row."""
    x = c.inputs(batch) if isinstance(batch, EncodedMatrix) else np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != c.input_width:
        raise SchemaError(f"input width {x.shape[-1]} does not match classifier width {c.input_width}")
    return diffnet.predict(c.config, c.params, x)


def accuracy(c: Classifier, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("empty dataset")
    probs = predict(c, encode(data))
    return float((hard_labels(probs) == data.labels).mean())
