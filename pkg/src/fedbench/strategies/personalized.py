"""Personalized strategies: clients keep part (FedBN) or all (PRR) of their model."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..engine import AdamState, ModelState, adam_step, backward, ce_soft_with_grad, forward, kd_with_grad, predict
from ..errors import ConfigError
from ..federation.aggregation import aggregate_weighted, fedbn_mask
from ..rng import stream
from .base import LocalResult, Strategy, check_finite, minibatches


class FedBN(Strategy):
    name = "fedbn"
    personalized = True
    global_model_defined = False

    def __init__(self, **hyper):
        super().__init__(**hyper)
        self.local: dict[int, ModelState] = {}

    def setup(self, ctx):
        if not any(layer.kind == "batchnorm" for layer in ctx.init_model.layers):
            warnings.warn("fedbn on a model without batch norm behaves as fedavg", stacklevel=2)
        self.local = {}

    def transmitted_params(self, model):
        return model.param_count() - model.batchnorm_param_count()

    def client_model(self, ctx, k, global_model):
        if k not in self.local:
            return global_model.copy()
        model = self.local[k].copy()
        for name in fedbn_mask(global_model):
            model.set(name, global_model.get(name).copy())
        return model

    def aggregate(self, ctx, global_model, results):
        models = [r.model for r in results]
        mask = fedbn_mask(global_model)
        # each client keeps its own batch-norm layers; the rest is the weighted mean
        self.local = {k: aggregate_weighted(models, ctx.weights, mask, base=models[k]) for k in range(len(models))}
        return aggregate_weighted(models, ctx.weights, mask, base=global_model)

    def personalized_models(self, ctx, results):
        return [self.local[k] for k in range(len(results))]


RECOVER, EXCHANGE, SUBLIMATE = "recover", "exchange", "sublimate"


def prr_phase(deputy_acc: float, personal_acc: float, alpha1: float, alpha2: float, eps: float = 1e-8) -> str:
    """Pick the transfer phase from the deputy/personalized accuracy ratio."""
    r = deputy_acc / max(personal_acc, eps)
    if r < alpha1:
        return RECOVER
    if r < alpha2:
        return EXCHANGE
    return SUBLIMATE


class PRR(Strategy):
    name = "prr"
    personalized = True
    passes_per_step = 2  # deputy and personalized model both train on every batch

    @dataclass(frozen=True)
    class Hyper:
        alpha1: float = 0.7
        alpha2: float = 0.9
        kd_temperature: float = 1.0

    def __init__(self, **hyper):
        super().__init__(**hyper)
        if not 0.0 <= self.hp.alpha1 <= self.hp.alpha2:
            raise ConfigError("prr needs 0 <= alpha1 <= alpha2")
        if self.hp.kd_temperature <= 0:
            raise ConfigError("prr.kd_temperature must be > 0")
        self.notes.append("prr: cross-entropy and distillation terms weighted 1:1 in every phase")
        self.personal: dict[int, ModelState] = {}
        self.phases: dict[int, list[str]] = {}

    def setup(self, ctx):
        self.personal = {k: ctx.init_model.copy() for k in range(ctx.fed.clients)}
        self.phases = {k: [] for k in range(ctx.fed.clients)}

    def local_update(self, ctx, k, model, rnd):
        deputy, personal = model, self.personal[k]
        data = ctx.clients[k]
        x = data.images.astype(np.float64)
        y = data.targets()
        labels = data.labels
        opt_d, opt_p = AdamState(), AdamState()
        temp = self.hp.kd_temperature
        steps = spent = 0
        for epoch in range(ctx.fed.local_epochs):
            a_d = float(np.mean(np.argmax(predict(deputy, x), axis=1) == labels))
            a_p = float(np.mean(np.argmax(predict(personal, x), axis=1) == labels))
            phase = prr_phase(a_d, a_p, self.hp.alpha1, self.hp.alpha2)
            self.phases[k].append(phase)
            for idx in minibatches(len(data), ctx.fed.batch_size, stream(ctx.fed.seed, "shuffle", k, rnd, epoch)):
                xb = x[idx]
                td = forward(deputy, xb, "train")
                tp = forward(personal, xb, "train")
                loss_d, g_d = ce_soft_with_grad(td.logits, y[idx])
                loss_p, g_p = ce_soft_with_grad(tp.logits, y[idx])
                if phase == EXCHANGE:
                    kd, g = kd_with_grad(td.logits, tp.logits, temp)
                    loss_d, g_d = loss_d + kd, g_d + g
                if phase in (EXCHANGE, SUBLIMATE):
                    kd, g = kd_with_grad(tp.logits, td.logits, temp)
                    loss_p, g_p = loss_p + kd, g_p + g
                check_finite(loss_d + loss_p, f"client {k}, round {rnd}, step {steps}")
                adam_step(deputy, backward(deputy, td, g_d), opt_d, ctx.fed.optimizer)
                adam_step(personal, backward(personal, tp, g_p), opt_p, ctx.fed.optimizer)
                steps += 1
                spent += self.step_flops(deputy, xb.shape)
        return LocalResult(deputy, steps, {"train": spent}, {"phase": self.phases[k][-1]})

    def personalized_models(self, ctx, results):
        return [self.personal[k] for k in range(len(results))]
