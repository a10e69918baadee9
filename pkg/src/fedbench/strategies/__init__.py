"""The benchmarked federated algorithms, selectable by name."""
from __future__ import annotations

from ..errors import ConfigError
from .base import LocalResult, Strategy, local_train, minibatches
from .classic import Elastic, FedAvg, FedNova, FedProx, FedRS, Moon
from .dense import Dense, build_generator, ensemble_logits, pairwise_distance_with_grad
from .ours import Ours
from .personalized import EXCHANGE, PRR, RECOVER, SUBLIMATE, FedBN, prr_phase

STRATEGIES: dict[str, type[Strategy]] = {
    cls.name: cls for cls in (FedAvg, FedProx, Moon, FedNova, FedRS, Elastic, FedBN, PRR, Dense, Ours)
}


def build_strategy(name: str, **hyper) -> Strategy:
    """Instantiate a strategy by name with hyperparameter overrides."""
    try:
        cls = STRATEGIES[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}") from None
    return cls(**hyper)


def default_hyperparameters(name: str) -> dict:
    return build_strategy(name).hyperparameters()


__all__ = [
    "STRATEGIES", "build_strategy", "default_hyperparameters", "Strategy", "LocalResult", "local_train",
    "minibatches", "FedAvg", "FedProx", "Moon", "FedNova", "FedRS", "Elastic", "FedBN", "PRR", "Dense", "Ours",
    "build_generator", "ensemble_logits", "pairwise_distance_with_grad", "prr_phase",
    "RECOVER", "EXCHANGE", "SUBLIMATE",
]
