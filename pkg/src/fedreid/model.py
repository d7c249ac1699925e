"""Two-layer identity model: an affine+ReLU backbone and a linear classifier head.

The backbone is the part clients share with the server; the classifier is
sized to each client's identity count and never leaves the client.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .numcore import ParamVector, param_vector

DEFAULT_INPUT_DIM = 16
DEFAULT_HIDDEN_DIM = 8
SHARED_BATCH_SIZE = 32

CHECKPOINT_MAGIC = "fedreid-checkpoint"
CHECKPOINT_VERSION = 1


class LabelError(ValueError):
    pass


class BatchSizeError(ValueError):
    pass


class TrainingDivergenceError(FloatingPointError):
    def __init__(self, block: str, message: str | None = None):
        self.block = block
        super().__init__(message or f"non-finite gradient in parameter block '{block}'")


@dataclass
class Backbone:
    weight: np.ndarray  # (input_dim, hidden_dim)
    bias: np.ndarray  # (hidden_dim,)

    @property
    def input_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weight.shape[1]

    def embed(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x @ self.weight + self.bias, 0.0)

    def to_vector(self) -> ParamVector:
        return param_vector(np.concatenate([self.weight.reshape(-1), self.bias]))

    @classmethod
    def from_vector(cls, vec, input_dim: int, hidden_dim: int) -> "Backbone":
        vec = np.asarray(vec, dtype=np.float64)
        expected = input_dim * hidden_dim + hidden_dim
        if vec.shape != (expected,):
            raise ValueError(f"backbone vector has length {vec.size}, expected {expected}")
        split = input_dim * hidden_dim
        return cls(vec[:split].reshape(input_dim, hidden_dim).copy(), vec[split:].copy())

    def copy(self) -> "Backbone":
        return Backbone(self.weight.copy(), self.bias.copy())


@dataclass
class Classifier:
    weight: np.ndarray  # (hidden_dim, num_classes)
    bias: np.ndarray  # (num_classes,)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "Classifier":
        return Classifier(self.weight.copy(), self.bias.copy())


def init_backbone(rng: np.random.Generator, input_dim: int = DEFAULT_INPUT_DIM,
                  hidden_dim: int = DEFAULT_HIDDEN_DIM) -> Backbone:
    bound = 1.0 / np.sqrt(input_dim)
    return Backbone(rng.uniform(-bound, bound, size=(input_dim, hidden_dim)),
                    rng.uniform(-bound, bound, size=hidden_dim))


def init_classifier(rng: np.random.Generator, hidden_dim: int, num_classes: int) -> Classifier:
    bound = 1.0 / np.sqrt(hidden_dim)
    return Classifier(rng.uniform(-bound, bound, size=(hidden_dim, num_classes)),
                      rng.uniform(-bound, bound, size=num_classes))


def scheduled_lr(lr0: float, epoch: int, step_size: int = 40, gamma: float = 0.1) -> float:
    """Step decay: ``lr0 * gamma ** (epoch // step_size)``."""
    return lr0 * gamma ** (epoch // step_size)


@dataclass
class OptimizerState:
    """SGD state for one (backbone, classifier) pair.

    ``epoch`` is the cumulative count of local epochs this client has run,
    which drives the step schedule across federated rounds.
    """

    lr_backbone: float = 0.005
    lr_classifier: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    step_size: int = 40
    gamma: float = 0.1
    epoch: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lrs(self) -> tuple[float, float]:
        return (scheduled_lr(self.lr_backbone, self.epoch, self.step_size, self.gamma),
                scheduled_lr(self.lr_classifier, self.epoch, self.step_size, self.gamma))


class ForwardResult(NamedTuple):
    embeddings: np.ndarray
    logits: np.ndarray
    loss: float


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LabelError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    loss = -float(np.mean(log_probs[np.arange(len(labels)), labels]))
    return loss, exp / total


def forward(backbone: Backbone, classifier: Classifier, x: np.ndarray,
            labels: np.ndarray) -> ForwardResult:
    labels = _check_labels(labels, classifier.num_classes)
    emb = backbone.embed(x)
    logits = emb @ classifier.weight + classifier.bias
    loss, _ = _cross_entropy(logits, labels)
    return ForwardResult(emb, logits, loss)


def gradients(backbone: Backbone, classifier: Classifier, x: np.ndarray,
              labels: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy loss and its gradient for every parameter block."""
    labels = _check_labels(labels, classifier.num_classes)
    n = len(labels)
    pre = x @ backbone.weight + backbone.bias
    emb = np.maximum(pre, 0.0)
    logits = emb @ classifier.weight + classifier.bias
    loss, probs = _cross_entropy(logits, labels)

    d_logits = probs
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    d_emb = d_logits @ classifier.weight.T
    d_pre = d_emb * (pre > 0.0)
    grads = {
        "backbone.weight": x.T @ d_pre,
        "backbone.bias": d_pre.sum(axis=0),
        "classifier.weight": emb.T @ d_logits,
        "classifier.bias": d_logits.sum(axis=0),
    }
    return loss, grads


def _param_blocks(backbone: Backbone, classifier: Classifier) -> dict[str, np.ndarray]:
    return {
        "backbone.weight": backbone.weight,
        "backbone.bias": backbone.bias,
        "classifier.weight": classifier.weight,
        "classifier.bias": classifier.bias,
    }


def sgd_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               lrs: dict[str, float], state: OptimizerState) -> None:
    """In-place SGD step with L2 weight decay and heavy-ball momentum."""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergenceError(name)
    for name, grad in grads.items():
        param = params[name]
        g = grad + state.weight_decay * param if state.weight_decay else grad
        if state.momentum:
            buf = state.buffers.get(name)
            buf = g.copy() if buf is None else state.momentum * buf + g
            state.buffers[name] = buf
            g = buf
        param -= lrs[name] * g


def backward_and_step(backbone: Backbone, classifier: Classifier, state: OptimizerState,
                      x: np.ndarray, labels: np.ndarray) -> float:
    """One optimizer step on ``(x, labels)``; returns the pre-step loss."""
    loss, grads = gradients(backbone, classifier, x, labels)
    if not np.isfinite(loss):
        raise TrainingDivergenceError("loss", "non-finite training loss")
    lr_b, lr_c = state.current_lrs()
    lrs = {"backbone.weight": lr_b, "backbone.bias": lr_b,
           "classifier.weight": lr_c, "classifier.bias": lr_c}
    sgd_update(_param_blocks(backbone, classifier), grads, lrs, state)
    return loss


def train_epoch(backbone: Backbone, classifier: Classifier, state: OptimizerState,
                x: np.ndarray, labels: np.ndarray, batch_size: int,
                rng: np.random.Generator) -> list[float]:
    """One shuffled pass over the data; the final partial batch is kept."""
    order = rng.permutation(len(labels))
    losses = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        losses.append(backward_and_step(backbone, classifier, state, x[idx], labels[idx]))
    state.epoch += 1
    return losses


def extract_features(backbone: Backbone, batch: np.ndarray,
                     batch_size: int = SHARED_BATCH_SIZE) -> np.ndarray:
    if len(batch) != batch_size:
        raise BatchSizeError(f"feature batch must hold {batch_size} samples, got {len(batch)}")
    return backbone.embed(batch).reshape(-1)


def extract_logits(backbone: Backbone, classifier: Classifier, batch: np.ndarray) -> np.ndarray:
    return (backbone.embed(batch) @ classifier.weight + classifier.bias).reshape(-1)


def save_checkpoint(path: str | Path, vector: ParamVector, *, input_dim: int,
                    hidden_dim: int, num_classes: int = 0, epoch: int = 0,
                    kind: str = "backbone") -> None:
    """Write a parameter vector as text: one JSON header line, then one value per line.

    Values use ``repr`` so they round-trip exactly.
    """
    header = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "input_dim": input_dim,
        "hidden_dim": hidden_dim,
        "num_classes": num_classes,
        "epoch": epoch,
        "length": int(len(vector)),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(repr(float(v)) for v in vector)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[dict, ParamVector]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"empty checkpoint: {path}")
    header = json.loads(lines[0])
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    values = [float(v) for v in lines[1:] if v]
    if len(values) != header["length"]:
        raise ValueError(f"checkpoint {path} declares {header['length']} values, "
                         f"found {len(values)}")
    return header, param_vector(values)
