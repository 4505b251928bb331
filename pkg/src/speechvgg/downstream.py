"""Multinomial logistic regression over recording embeddings.

Full-batch gradient descent on softmax cross-entropy with L2 weight
decay. The objective is convex, parameters start at zero, and the
learning rate is halved whenever a step would increase the loss, so
fitting is deterministic and the loss trace is non-increasing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .nn import softmax


@dataclass
class LogRegModel:
    W: np.ndarray   # (classes, dim)
    b: np.ndarray   # (classes,)
    l2: float = 0.0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise ValueError("parameters must be finite")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "dim": self.dim,
                    "classes": self.num_classes,
                    "W": [float(v) for v in self.W.ravel()],
                    "b": [float(v) for v in self.b],
                    "l2": self.l2,
                },
                fh,
            )
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "LogRegModel":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        w = np.array(d["W"]).reshape(int(d["classes"]), int(d["dim"]))
        return cls(w, np.array(d["b"]), float(d["l2"]))


def _loss(x, onehot, w, b, l2):
    probs = softmax(x @ w.T + b)
    n = x.shape[0]
    ce = -np.log(np.maximum((probs * onehot).sum(axis=1), 1e-300)).mean()
    return ce + 0.5 * l2 * float((w * w).sum()), probs


def fit(
    embeddings,
    labels,
    l2: float = 1e-4,
    iters: int = 500,
    lr: float = 0.1,
    seed: int = 0,
    history: list | None = None,
) -> LogRegModel:
    """Fit a softmax classifier; zero-initialized, so `seed` never changes the result.

    Each iteration takes one gradient step, halving the rate until the
    step does not increase the regularized loss. Pass a list as
    ``history`` to record the per-iteration loss.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError(
            f"dimension mismatch: {x.shape} embeddings vs {y.shape} labels"
        )
    if x.shape[0] == 0:
        raise DataError("no training examples")
    if y.min() < 0:
        raise ValueError("labels must be non-negative class indices")
    classes = int(y.max()) + 1
    if classes < 2 or np.unique(y).size < 2:
        raise ValueError("at least 2 classes required")
    n, dim = x.shape
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), y] = 1.0

    w = np.zeros((classes, dim))
    b = np.zeros(classes)
    loss, probs = _loss(x, onehot, w, b, l2)
    if history is not None:
        history.append(loss)
    for _ in range(iters):
        gw = (probs - onehot).T @ x / n + l2 * w
        gb = (probs - onehot).mean(axis=0)
        while True:
            w_new = w - lr * gw
            b_new = b - lr * gb
            new_loss, new_probs = _loss(x, onehot, w_new, b_new, l2)
            if new_loss <= loss or lr < 1e-12:
                break
            lr *= 0.5
        if lr < 1e-12:
            break
        w, b, loss, probs = w_new, b_new, new_loss, new_probs
        if history is not None:
            history.append(loss)
    return LogRegModel(w, b, l2)


def predict(model: LogRegModel, embedding) -> np.ndarray:
    """softmax(W e + b); accepts one vector or a matrix of rows."""
    e = np.asarray(embedding, dtype=np.float64)
    single = e.ndim == 1
    if single:
        e = e[None]
    if e.shape[1] != model.dim:
        raise ValueError(f"dimension mismatch: embedding has {e.shape[1]}, model {model.dim}")
    probs = softmax(e @ model.W.T + model.b)
    return probs[0] if single else probs


def evaluate(model: LogRegModel, embeddings, labels):
    """(accuracy, confusion matrix); confusion rows index the true class."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.shape[0] == 0:
        raise DataError("empty evaluation set")
    if x.shape[0] != y.shape[0]:
        raise ValueError("dimension mismatch between embeddings and labels")
    preds = predict(model, x).argmax(axis=1)
    k = model.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, preds), 1)
    return float(np.trace(confusion) / y.size), confusion
