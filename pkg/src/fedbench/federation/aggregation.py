"""Weighted parameter averaging and the server-side variants built on it."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..engine import ModelState, Role
from ..errors import ConfigError, SchemaError

FEDAVG_ROLES = frozenset({Role.TRAINABLE, Role.BN_STATISTIC})


@dataclass(frozen=True)
class AggregationWeights:
    p: np.ndarray

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "AggregationWeights":
        n = np.asarray(counts, dtype=np.float64)
        if n.ndim != 1 or len(n) == 0 or np.any(n <= 0):
            raise ConfigError(f"sample counts must be positive, got {list(counts)}")
        return cls(n / n.sum())

    @classmethod
    def uniform(cls, k: int) -> "AggregationWeights":
        return cls.from_counts([1] * k)

    def __len__(self) -> int:
        return len(self.p)


def fedavg_mask(model: ModelState) -> list[str]:
    return model.names(FEDAVG_ROLES)


def fedbn_mask(model: ModelState) -> list[str]:
    """Everything outside batch-norm layers."""
    return model.names({Role.TRAINABLE}, include_batchnorm=False)


def _check(models: Sequence[ModelState], weights: AggregationWeights) -> None:
    if not models:
        raise ConfigError("aggregation needs at least one model")
    if len(weights) != len(models):
        raise ConfigError(f"{len(weights)} weights for {len(models)} models")
    for i, m in enumerate(models[1:], start=1):
        if not m.same_schema(models[0]):
            raise SchemaError(f"model {i} schema differs from model 0")


def weighted_mean(arrays: Sequence[np.ndarray], p: np.ndarray) -> np.ndarray:
    """sum_k p_k * a_k, summed in value order so the result ignores client order."""
    terms = np.stack([pk * a for pk, a in zip(p, arrays)])
    if len(terms) == 1:
        return terms[0]
    return np.sort(terms, axis=0).sum(axis=0)


def aggregate_weighted(models: Sequence[ModelState], weights: AggregationWeights,
                       mask: Iterable[str] | None = None, base: ModelState | None = None) -> ModelState:
    """Average the parameters named in ``mask``; everything else comes from ``base``.

    ``base`` defaults to ``models[0]``.  Batch counters are never averaged.
    """
    _check(models, weights)
    ref = models[0]
    names = fedavg_mask(ref) if mask is None else list(mask)
    roles = ref.roles()
    out = (base if base is not None else ref).copy()
    if base is not None and not base.same_schema(ref):
        raise SchemaError("base model schema differs from the aggregated models")
    for name in names:
        if roles[name] is Role.BN_COUNTER:
            continue
        out.set(name, weighted_mean([m.get(name) for m in models], weights.p))
    return out


def elastic_coefficients(sensitivities: np.ndarray, weights: AggregationWeights, tau: float) -> np.ndarray:
    """Per-layer update scale 1 + tau - normalised sensitivity.

    ``sensitivities`` is [clients, layers]; client vectors are combined with
    the aggregation weights, then min-max normalised across layers.
    """
    s = np.asarray(sensitivities, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != len(weights):
        raise ConfigError(f"sensitivities must be [{len(weights)}, layers], got {s.shape}")
    pooled = weighted_mean(list(s), weights.p)
    lo, hi = pooled.min(), pooled.max()
    normed = np.full_like(pooled, 0.5) if hi == lo else (pooled - lo) / (hi - lo)
    return 1.0 + tau - normed


def elastic_aggregate(previous: ModelState, models: Sequence[ModelState], weights: AggregationWeights,
                      sensitivities: np.ndarray, tau: float) -> ModelState:
    """W_l <- W_l^t + zeta_l * (avg_l - W_l^t) for every trainable layer l."""
    averaged = aggregate_weighted(models, weights)
    zeta = elastic_coefficients(sensitivities, weights, tau)
    layers = previous.trainable_layers()
    if len(zeta) != len(layers):
        raise ConfigError(f"{len(zeta)} sensitivities for {len(layers)} trainable layers")
    out = averaged
    for z, layer_name in zip(zeta, layers):
        if z == 1.0:
            continue
        layer = previous.layer(layer_name)
        for key in layer.params:
            if layer.role(key) is not Role.TRAINABLE:
                continue
            name = f"{layer_name}.{key}"
            w_prev = previous.get(name)
            out.set(name, w_prev + z * (averaged.get(name) - w_prev))
    return out


def fednova_direction(previous: ModelState, models: Sequence[ModelState], weights: AggregationWeights,
                      steps: Sequence[int]) -> tuple[dict[str, np.ndarray], float]:
    """Per-step normalised update sum_k p_k * delta_k / tau_k and tau_eff = sum_k p_k tau_k."""
    _check(models, weights)
    tau = np.asarray(steps, dtype=np.float64)
    if len(tau) != len(models):
        raise ConfigError(f"{len(tau)} step counts for {len(models)} models")
    if np.any(tau < 1):
        raise ConfigError("every client must report at least one local step")
    direction = {}
    for name in previous.trainable_names():
        w_prev = previous.get(name)
        direction[name] = weighted_mean([(w_prev - m.get(name)) / t for m, t in zip(models, tau)], weights.p)
    return direction, float(np.dot(weights.p, tau))


def fednova_aggregate(previous: ModelState, models: Sequence[ModelState], weights: AggregationWeights,
                      steps: Sequence[int], rho: float,
                      momentum: dict[str, np.ndarray] | None) -> tuple[ModelState, dict[str, np.ndarray]]:
    """Normalised averaging with server momentum ``rho``; BN statistics are plainly averaged."""
    direction, tau_eff = fednova_direction(previous, models, weights, steps)
    out = aggregate_weighted(models, weights, previous.names({Role.BN_STATISTIC}), base=previous)
    new_momentum = {}
    for name, d in direction.items():
        update = tau_eff * d
        if momentum is not None and rho:
            update = rho * momentum[name] + update
        new_momentum[name] = update
        out.set(name, previous.get(name) - update)
    return out, new_momentum
