"""Global-model strategies: FedAvg and the methods that alter its local loss or server step."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..engine import (
    ModelState,
    backward,
    ce_soft_with_grad,
    contrastive_with_grad,
    forward,
    prox_with_grad,
    restricted_log_weights,
)
from ..errors import ConfigError
from ..federation.aggregation import elastic_aggregate, fednova_aggregate
from ..rng import stream
from .base import LocalResult, Strategy, local_train


class FedAvg(Strategy):
    name = "fedavg"


class FedProx(Strategy):
    name = "fedprox"

    @dataclass(frozen=True)
    class Hyper:
        mu: float = 0.01

    def __init__(self, **hyper):
        super().__init__(**hyper)
        if self.hp.mu < 0:
            raise ConfigError("fedprox.mu must be >= 0")
        self.anchor: dict[int, ModelState] = {}

    def broadcast_scalars(self) -> int:
        return 1

    def client_model(self, ctx, k, global_model):
        self.anchor[k] = global_model.copy()
        return global_model.copy()

    def batch_loss(self, ctx, k, model, xb, yb):
        loss, grads = super().batch_loss(ctx, k, model, xb, yb)
        if self.hp.mu:
            prox, prox_grads = prox_with_grad(model, self.anchor[k], self.hp.mu)
            loss += prox
            for name, g in prox_grads.items():
                grads[name] = grads[name] + g
        return loss, grads


class Moon(Strategy):
    name = "moon"
    passes_per_step = 3  # current model plus global and previous-local snapshots

    @dataclass(frozen=True)
    class Hyper:
        mu: float = 1.0
        tau: float = 0.5

    def __init__(self, **hyper):
        super().__init__(**hyper)
        if self.hp.tau <= 0:
            raise ConfigError("moon.tau must be > 0")
        self.previous: dict[int, ModelState] = {}
        self.global_snapshot: dict[int, ModelState] = {}

    def broadcast_scalars(self) -> int:
        return 1

    def setup(self, ctx):
        # round 1: the previous-local representation comes from the initial model
        self.previous = {k: ctx.init_model.copy() for k in range(ctx.fed.clients)}

    def client_model(self, ctx, k, global_model):
        self.global_snapshot[k] = global_model.copy()
        return global_model.copy()

    def batch_loss(self, ctx, k, model, xb, yb):
        trace = forward(model, xb, "train")
        loss, dlogits = ce_soft_with_grad(trace.logits, yb)
        rep_grad = None
        if self.hp.mu:
            z_glob = forward(self.global_snapshot[k], xb, "eval").representation
            z_prev = forward(self.previous[k], xb, "eval").representation
            con, rep_grad = contrastive_with_grad(trace.representation, z_glob, z_prev, self.hp.tau, self.hp.mu)
            loss += con
        return loss, backward(model, trace, dlogits, rep_grad=rep_grad)

    def local_update(self, ctx, k, model, rnd):
        result = local_train(self, ctx, k, model, rnd)
        self.previous[k] = result.model.copy()
        return result


class FedRS(Strategy):
    name = "fedrs"

    @dataclass(frozen=True)
    class Hyper:
        alpha: float = 0.5

    def __init__(self, **hyper):
        super().__init__(**hyper)
        if not 0.0 <= self.hp.alpha <= 1.0:
            raise ConfigError("fedrs.alpha must lie in [0, 1]")
        self.log_weights: dict[int, np.ndarray] = {}

    def broadcast_scalars(self) -> int:
        return 1

    def setup(self, ctx):
        for k, data in enumerate(ctx.clients):
            self.log_weights[k] = restricted_log_weights(data.class_present(), self.hp.alpha)

    def batch_loss(self, ctx, k, model, xb, yb):
        trace = forward(model, xb, "train")
        logits = trace.logits
        if self.hp.alpha < 1.0:
            logits = logits + self.log_weights[k]
        loss, dlogits = ce_soft_with_grad(logits, yb)
        return loss, backward(model, trace, dlogits)


class FedNova(Strategy):
    name = "fednova"

    @dataclass(frozen=True)
    class Hyper:
        rho: float = 0.9

    def __init__(self, **hyper):
        super().__init__(**hyper)
        if not 0.0 <= self.hp.rho < 1.0:
            raise ConfigError("fednova.rho must lie in [0, 1)")
        self.momentum = None

    def broadcast_scalars(self) -> int:
        return 1

    def upload_scalars(self, model):
        return 1  # the client's normalising weight

    def aggregate(self, ctx, global_model, results):
        out, self.momentum = fednova_aggregate(
            global_model, [r.model for r in results], ctx.weights, [r.steps for r in results],
            self.hp.rho, self.momentum,
        )
        return out


class Elastic(Strategy):
    name = "elastic"

    @dataclass(frozen=True)
    class Hyper:
        mu: float = 0.95
        tau: float = 0.5
        probe_fraction: float = 0.1

    def __init__(self, **hyper):
        super().__init__(**hyper)
        if not 0.0 < self.hp.probe_fraction <= 1.0:
            raise ConfigError("elastic.probe_fraction must lie in (0, 1]")
        if not 0.0 <= self.hp.mu <= 1.0:
            raise ConfigError("elastic.mu must lie in [0, 1]")
        self.sensitivity: dict[int, np.ndarray] = {}

    def broadcast_scalars(self) -> int:
        return 1

    def upload_scalars(self, model):
        return len(model.trainable_layers())

    def probe(self, ctx, k: int, model: ModelState, rnd: int) -> tuple[np.ndarray, int]:
        """Per-layer L2 norm of the loss gradient on a random slice of local data."""
        data = ctx.clients[k]
        m = max(2, math.ceil(self.hp.probe_fraction * len(data))) if len(data) > 1 else 1
        idx = np.sort(stream(ctx.fed.seed, "probe", k, rnd).choice(len(data), size=min(m, len(data)), replace=False))
        xb = data.images[idx].astype(np.float64)
        trace = forward(model, xb, "train", update_stats=False)
        _, dlogits = ce_soft_with_grad(trace.logits, data.targets()[idx])
        grads = backward(model, trace, dlogits)
        norms = []
        for layer_name in model.trainable_layers():
            sq = sum(float(np.sum(g * g)) for n, g in grads.items() if n.rsplit(".", 1)[0] == layer_name)
            norms.append(math.sqrt(sq))
        return np.array(norms), self.step_flops(model, xb.shape)

    def local_update(self, ctx, k, model, rnd):
        norms, probe_flops = self.probe(ctx, k, model, rnd)
        prev = self.sensitivity.get(k, np.zeros_like(norms))
        self.sensitivity[k] = self.hp.mu * prev + (1.0 - self.hp.mu) * norms
        result = local_train(self, ctx, k, model, rnd)
        result.flops["probe"] = probe_flops
        result.extras["sensitivity"] = self.sensitivity[k].copy()
        return result

    def aggregate(self, ctx, global_model, results):
        sens = np.stack([r.extras["sensitivity"] for r in results])
        return elastic_aggregate(global_model, [r.model for r in results], ctx.weights, sens, self.hp.tau)
