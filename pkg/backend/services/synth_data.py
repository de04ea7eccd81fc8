"""
Synthetic Moment Tasks
Feature-map classification tasks whose class signal lives in the first and
second moments of the local features, plus a first-order baseline
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from models.schemas import OptimConfig, TaskSpec
from services.errors import InsufficientLocationsError
from services.model_head import OptimState, loss_softmax_ce, sgd_step
from services.numkernel import Matrix, Rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Sample:
    """One feature map (n locations x C channels) and its class"""
    features: Matrix
    label: int


@dataclass(frozen=True)
class ClassModel:
    """Gaussian that generates every location of one class"""
    mean: np.ndarray
    covariance: Matrix
    chol: Matrix


def class_models(task: TaskSpec) -> List[ClassModel]:
    """
    Covariances are Q^T diag(spectrum) Q with a per-class random rotation and
    a per-class permutation of a log-spaced spectrum; means sit on scaled
    simplex vertices for mean_and_covariance tasks, at zero otherwise
    """
    rng = Rng(task.seed).child("classes")
    base = np.geomspace(task.spectrum_lo, task.spectrum_hi, task.channels)
    models = []
    for k in range(task.classes):
        stream = rng.child(f"class-{k}")
        q = stream.child("rotation").orthogonal(task.channels)
        spectrum = stream.child("spectrum").generator().permutation(base)
        covariance = q.T @ np.diag(spectrum) @ q
        covariance = 0.5 * (covariance + covariance.T)
        mean = np.zeros(task.channels)
        if task.kind == "mean_and_covariance":
            if k < task.channels:
                mean[k] = task.mean_separation
            else:
                direction = stream.child("mean").normal(task.channels)
                mean = task.mean_separation * direction / np.linalg.norm(direction)
        models.append(ClassModel(mean=mean, covariance=covariance,
                                 chol=np.linalg.cholesky(covariance)))
    return models


def _draw(model: ClassModel, locations: int, rng: Rng) -> Matrix:
    z = rng.normal((locations, model.mean.size))
    return model.mean + z @ model.chol.T


def generate(task: TaskSpec) -> Tuple[List[Sample], List[Sample]]:
    """
    Train and test samples, class-major. Every sample has its own named
    sub-stream, so the splits are disjoint and each sample is reproducible on
    its own.
    """
    if task.locations < task.channels + 1:
        raise InsufficientLocationsError(
            f"locations ({task.locations}) must be at least channels + 1 ({task.channels + 1})"
        )
    models = class_models(task)
    root = Rng(task.seed).child("samples")
    splits = {}
    for split, per_class in (("train", task.train_per_class), ("test", task.test_per_class)):
        samples = []
        for k, model in enumerate(models):
            for i in range(per_class):
                rows = _draw(model, task.locations, root.child(f"{split}-{k}-{i}"))
                samples.append(Sample(features=rows, label=k))
        splits[split] = samples
    logger.info(
        f"Generated {task.kind} task: {len(splits['train'])} train / {len(splits['test'])} test "
        f"samples, {task.classes} classes, {task.locations}x{task.channels}"
    )
    return splits["train"], splits["test"]


def _standardize(train: np.ndarray, test: np.ndarray):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def baseline_meanpool(train: Sequence[Sample], test: Sequence[Sample], epochs: int = 30,
                      optim: OptimConfig = OptimConfig(lr=0.05, batch_size=16),
                      seed: int = 0) -> float:
    """
    First-order control arm: a linear softmax classifier on each sample's mean
    vector, trained with the same clipped SGD as the head. Returns test
    accuracy.
    """
    if not train or not test:
        raise ValueError("baseline needs non-empty train and test sets")
    classes = max(s.label for s in list(train) + list(test)) + 1
    x_train = np.stack([s.features.mean(axis=0) for s in train])
    x_test = np.stack([s.features.mean(axis=0) for s in test])
    x_train, x_test = _standardize(x_train, x_test)
    y_train = np.array([s.label for s in train])

    params = {"weights": np.zeros((classes, x_train.shape[1])), "bias": np.zeros(classes)}
    state = OptimState.for_params(params, optim)
    order_rng = Rng(seed).child("baseline-order")
    for epoch in range(epochs):
        order = order_rng.child(f"epoch-{epoch}").generator().permutation(len(train))
        for start in range(0, len(order), optim.batch_size):
            idx = order[start:start + optim.batch_size]
            grads = {"weights": np.zeros_like(params["weights"]), "bias": np.zeros(classes)}
            for i in idx:
                logits = params["weights"] @ x_train[i] + params["bias"]
                _, g = loss_softmax_ce(logits, int(y_train[i]))
                grads["weights"] += np.outer(g, x_train[i])
                grads["bias"] += g
            grads = {k: v / len(idx) for k, v in grads.items()}
            params, state = sgd_step(params, grads, state)

    predictions = np.argmax(x_test @ params["weights"].T + params["bias"], axis=1)
    accuracy = float(np.mean(predictions == np.array([s.label for s in test])))
    logger.info(f"Mean-pool baseline test accuracy: {accuracy:.4f}")
    return accuracy
