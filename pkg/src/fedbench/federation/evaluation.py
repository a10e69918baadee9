from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..data import Dataset
from ..engine import ModelState, predict
from ..errors import ConfigError


def accuracy(model: ModelState, test: Dataset) -> float:
    """Top-1 accuracy of eval-mode predictions."""
    if len(test) == 0:
        raise ConfigError("evaluation on an empty test set")
    logits = predict(model, test.images)
    return float(np.mean(np.argmax(logits, axis=1) == test.labels))


def evaluate_global(model: ModelState, test: Dataset) -> float:
    return accuracy(model, test)


def evaluate_personalized(models: Sequence[ModelState], tests: Dataset | Sequence[Dataset]) -> float:
    """Unweighted mean of each client model's accuracy on its own (or a shared) test set."""
    if isinstance(tests, Dataset):
        tests = [tests] * len(models)
    if len(tests) != len(models):
        raise ConfigError(f"{len(tests)} test sets for {len(models)} client models")
    return float(np.mean([accuracy(m, t) for m, t in zip(models, tests)]))


@dataclass(frozen=True)
class ConvergencePolicy:
    window: int = 5
    delta: float = 0.001


def detect_convergence(series: Sequence[float], policy: ConvergencePolicy = ConvergencePolicy()) -> int | None:
    """First 1-based round r where the next ``window`` rounds gain less than ``delta``
    over the trailing ``window``-round mean ending at r."""
    w = policy.window
    if w < 1:
        raise ConfigError("convergence window must be >= 1")
    acc = np.asarray(series, dtype=np.float64)
    if len(acc) < 2 * w:
        return None
    for r in range(w - 1, len(acc) - w):
        smoothed = acc[r - w + 1:r + 1].mean()
        if acc[r:r + w + 1].max() - smoothed < policy.delta:
            return r + 1
    return None
