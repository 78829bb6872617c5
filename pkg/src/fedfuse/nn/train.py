"""Mini-batch training loop and evaluation for the visual model."""

from dataclasses import dataclass

import numpy as np

from . import layers
from .model import CnnModel, ModelWeights
from .optim import Adam


@dataclass(frozen=True)
class TrainStats:
    """Metrics from the last completed epoch of a training call."""

    loss: float
    accuracy: float
    epochs_done: int
    samples: int


def train_local(
    model: CnnModel,
    weights: ModelWeights,
    x: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    adam: Adam,
    rng: np.random.Generator,
    epochs_done: int = 0,
    augment_fn=None,
) -> TrainStats:
    """Run ``epochs`` passes of shuffled mini-batch Adam updates in place.

    ``epochs_done`` is the number of epochs this parameter set has already
    been trained for; the effective learning rate continues the decay
    schedule from there. ``augment_fn(batch, rng) -> batch`` is applied to
    the images of every batch when given. Returns stats of the final epoch.
    """
    n = x.shape[0]
    labels = np.asarray(labels)
    if labels.shape[0] != n:
        raise ValueError(f"{n} samples but {labels.shape[0]} labels")
    if n == 0:
        raise ValueError("cannot train on an empty dataset")

    loss_sum = 0.0
    correct = 0
    for e in range(epochs):
        lr = adam.config.lr_at(epochs_done + e)
        final = e == epochs - 1
        loss_sum = 0.0
        correct = 0
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = x[idx]
            yb = labels[idx]
            if augment_fn is not None:
                xb = augment_fn(xb, rng)
            loss, probs, grads, _ = model.loss_and_grads(weights, xb, yb, rng=rng)
            adam.step(weights, grads, lr)
            if final:
                loss_sum += loss * len(idx)
                correct += int((probs.argmax(axis=1) == yb).sum())
    return TrainStats(
        loss=loss_sum / n,
        accuracy=correct / n,
        epochs_done=epochs_done + epochs,
        samples=n,
    )


def evaluate(
    model: CnnModel,
    weights: ModelWeights,
    x: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 32,
) -> tuple[float, float]:
    """Deterministic mean cross-entropy and accuracy, dropout disabled."""
    n = x.shape[0]
    labels = np.asarray(labels)
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        xb = x[start : start + batch_size]
        yb = labels[start : start + batch_size]
        logits, fc = model.forward(weights, xb)
        del fc  # activations are dead weight here
        loss, probs, _ = layers.softmax_cross_entropy(logits, yb)
        loss_sum += loss * xb.shape[0]
        correct += int((probs.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / n
