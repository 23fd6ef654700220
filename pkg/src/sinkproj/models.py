"""Desk-scale differentiable classifiers with closed-form gradients.

Two architectures cover the experiments: multinomial logistic regression
("linear") and a one-hidden-layer ReLU network ("mlp").  Inputs are the
normalized mass histograms themselves, flattened row-major, so the attack
and the classifier share one domain.  All gradients (inputs and
parameters) are analytic and checked against finite differences in the
test suite.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import MassVector, NumericalFailure
from .seeding import named_rng

__all__ = [
    "TinyClassifier",
    "TrainConfig",
    "loss_and_input_grad",
    "train_standard",
    "train_adversarial",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TinyClassifier:
    """A linear or one-hidden-layer ReLU classifier over flattened histograms."""

    kind: str
    weights: dict[str, np.ndarray]
    class_count: int
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown architecture {self.kind!r}")
        for name, value in self.weights.items():
            if not np.all(np.isfinite(value)):
                raise ValueError(f"parameter {name!r} contains non-finite entries")

    @classmethod
    def linear(cls, input_shape, class_count, rng: np.random.Generator) -> "TinyClassifier":
        dim = int(np.prod(input_shape))
        weights = {
            "W": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(class_count, dim)),
            "b": np.zeros(class_count),
        }
        return cls("linear", weights, class_count, tuple(input_shape))

    @classmethod
    def mlp(cls, input_shape, class_count, hidden, rng: np.random.Generator) -> "TinyClassifier":
        dim = int(np.prod(input_shape))
        weights = {
            "W1": rng.normal(0.0, np.sqrt(2.0 / dim), size=(hidden, dim)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, np.sqrt(2.0 / hidden), size=(class_count, hidden)),
            "b2": np.zeros(class_count),
        }
        return cls("mlp", weights, class_count, tuple(input_shape))

    def _flatten(self, x: MassVector) -> np.ndarray:
        if x.values.shape != self.input_shape:
            raise ValueError(f"input shape {x.values.shape} does not match model {self.input_shape}")
        return x.values.ravel()

    def logits(self, flat: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return self.weights["W"] @ flat + self.weights["b"]
        hidden = np.maximum(self.weights["W1"] @ flat + self.weights["b1"], 0.0)
        return self.weights["W2"] @ hidden + self.weights["b2"]

    def predict(self, x: MassVector) -> int:
        return int(np.argmax(self.logits(self._flatten(x))))

    def loss_and_input_grad(self, x: MassVector, label: int) -> tuple[float, np.ndarray]:
        return loss_and_input_grad(self, x, label)

    def clone(self) -> "TinyClassifier":
        return TinyClassifier(
            self.kind,
            {k: v.copy() for k, v in self.weights.items()},
            self.class_count,
            self.input_shape,
        )


def loss_and_input_grad(model: TinyClassifier, x: MassVector, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy loss and its analytic gradient with respect to the input."""
    if not 0 <= label < model.class_count:
        raise ValueError(f"label {label} out of range for {model.class_count} classes")
    flat = model._flatten(x)
    if model.kind == "linear":
        probs = softmax(model.logits(flat))
        delta = probs.copy()
        delta[label] -= 1.0
        grad = model.weights["W"].T @ delta
    else:
        pre = model.weights["W1"] @ flat + model.weights["b1"]
        hidden = np.maximum(pre, 0.0)
        probs = softmax(model.weights["W2"] @ hidden + model.weights["b2"])
        delta = probs.copy()
        delta[label] -= 1.0
        back = (model.weights["W2"].T @ delta) * (pre > 0)
        grad = model.weights["W1"].T @ back
    loss = -float(np.log(max(probs[label], 1e-300)))
    return loss, grad.reshape(model.input_shape)


def _batch_param_grads(model: TinyClassifier, batch: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a (batch, dim) matrix and its parameter gradients."""
    count = batch.shape[0]
    onehot = np.zeros((count, model.class_count))
    onehot[np.arange(count), labels] = 1.0
    if model.kind == "linear":
        probs = softmax(batch @ model.weights["W"].T + model.weights["b"])
        delta = (probs - onehot) / count
        grads = {"W": delta.T @ batch, "b": delta.sum(axis=0)}
    else:
        pre = batch @ model.weights["W1"].T + model.weights["b1"]
        hidden = np.maximum(pre, 0.0)
        probs = softmax(hidden @ model.weights["W2"].T + model.weights["b2"])
        delta = (probs - onehot) / count
        back = (delta @ model.weights["W2"]) * (pre > 0)
        grads = {
            "W1": back.T @ batch,
            "b1": back.sum(axis=0),
            "W2": delta.T @ hidden,
            "b2": delta.sum(axis=0),
        }
    loss = -float(np.mean(np.log(np.maximum(probs[np.arange(count), labels], 1e-300))))
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyperparameters: momentum 0.9, weight decay 5e-4, lr 0.1 dropping to 0.01."""

    epochs: int
    lr_initial: float = 0.1
    lr_drop: float = 0.01
    lr_drop_epoch: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 128

    def __post_init__(self):
        for name in ("lr_initial", "lr_drop"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_drop_epoch < 0:
            raise ValueError("batch_size must be >= 1 and epochs/lr_drop_epoch >= 0")

    def learning_rate(self, epoch: int) -> float:
        """Rate for a 0-based epoch index; the drop applies from epoch lr_drop_epoch on."""
        return self.lr_initial if epoch < self.lr_drop_epoch else self.lr_drop


class _SgdOptimizer:
    """SGD with momentum and decoupled-from-nothing weight decay.

    update: g <- grad + weight_decay * w; v <- momentum * v + g; w <- w - lr * v.
    With momentum 0 and weight decay 0 this is plain gradient descent.
    """

    def __init__(self, model: TinyClassifier, cfg: TrainConfig):
        self.cfg = cfg
        self.velocity = {k: np.zeros_like(v) for k, v in model.weights.items()}

    def step(self, model: TinyClassifier, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, grad in grads.items():
            total = grad + self.cfg.weight_decay * model.weights[name]
            self.velocity[name] = self.cfg.momentum * self.velocity[name] + total
            model.weights[name] = model.weights[name] - lr * self.velocity[name]


def _dataset_matrix(dataset) -> tuple[np.ndarray, np.ndarray]:
    flats = np.stack([image.values.ravel() for image, _ in dataset])
    labels = np.array([int(label) for _, label in dataset])
    return flats, labels


def _accuracy(model: TinyClassifier, flats: np.ndarray, labels: np.ndarray) -> float:
    if model.kind == "linear":
        logits = flats @ model.weights["W"].T + model.weights["b"]
    else:
        hidden = np.maximum(flats @ model.weights["W1"].T + model.weights["b1"], 0.0)
        logits = hidden @ model.weights["W2"].T + model.weights["b2"]
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_standard(model: TinyClassifier, dataset, cfg: TrainConfig, seed: int = 0):
    """Minibatch SGD on clean examples; deterministic given the seed.

    Returns the trained model (a copy; the input is untouched) and the
    per-epoch training-accuracy history.
    """
    model = model.clone()
    flats, labels = _dataset_matrix(dataset)
    optimizer = _SgdOptimizer(model, cfg)
    rng = named_rng(seed, "train-standard")
    history: list[float] = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        order = rng.permutation(len(labels))
        for start in range(0, len(order), cfg.batch_size):
            chosen = order[start : start + cfg.batch_size]
            _, grads = _batch_param_grads(model, flats[chosen], labels[chosen])
            optimizer.step(model, grads, lr)
        history.append(_accuracy(model, flats, labels))
    return model, history


def train_adversarial(
    model: TinyClassifier,
    dataset,
    cfg: TrainConfig,
    train_schedule,
    sinkhorn_cfg,
    kernel,
    seed: int = 0,
):
    """Adversarial training: fit each minibatch on attacked examples.

    Per example the attack runs under the growing-radius budget and the
    first adversarial example found replaces the input (the last iterate
    when none is found).  Projection failures fall back to the clean
    example and are logged.  Returns (model, per-epoch clean-accuracy
    history).
    """
    from .attack import pgd_attack

    model = model.clone()
    flats, labels = _dataset_matrix(dataset)
    images = [image for image, _ in dataset]
    optimizer = _SgdOptimizer(model, cfg)
    rng = named_rng(seed, "train-adversarial")
    history: list[float] = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        order = rng.permutation(len(labels))
        for start in range(0, len(order), cfg.batch_size):
            chosen = order[start : start + cfg.batch_size]
            perturbed = np.empty((len(chosen), flats.shape[1]))
            for row, index in enumerate(chosen):
                try:
                    result = pgd_attack(
                        model, images[index], int(labels[index]),
                        train_schedule, step=0.1, sinkhorn_cfg=sinkhorn_cfg, kernel=kernel,
                    )
                    perturbed[row] = result.adversarial_example.values.ravel()
                except NumericalFailure as exc:
                    logger.warning("projection failed for example %d: %s", index, exc)
                    perturbed[row] = flats[index]
            _, grads = _batch_param_grads(model, perturbed, labels[chosen])
            optimizer.step(model, grads, lr)
        history.append(_accuracy(model, flats, labels))
    return model, history


def save_checkpoint(model: TinyClassifier, path) -> None:
    """Write the versioned JSON checkpoint format (see README for the schema)."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": model.kind,
        "class_count": model.class_count,
        "input_shape": list(model.input_shape),
        "weights": {
            name: {
                "shape": list(value.shape),
                "data": base64.b64encode(np.ascontiguousarray(value).tobytes()).decode("ascii"),
            }
            for name, value in model.weights.items()
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_checkpoint(path) -> TinyClassifier:
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    weights = {}
    for name, spec in payload["weights"].items():
        raw = base64.b64decode(spec["data"])
        weights[name] = np.frombuffer(raw, dtype=float).reshape(spec["shape"]).copy()
    return TinyClassifier(
        kind=payload["architecture"],
        weights=weights,
        class_count=int(payload["class_count"]),
        input_shape=tuple(payload["input_shape"]),
    )
