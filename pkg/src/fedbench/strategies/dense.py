"""One-shot federated learning: client pretraining, server-side generation, distillation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..engine import (
    AdamState,
    ModelState,
    activation,
    adam_step,
    backward,
    ce_soft_with_grad,
    dense,
    flops,
    forward,
    kd_with_grad,
)
from ..errors import ConfigError, TrainingError
from ..federation.ledger import Direction
from ..rng import stream
from .base import Strategy, check_finite, local_train


def build_generator(latent_dim: int, num_classes: int, out_shape, rng: np.random.Generator,
                    hidden: int = 64) -> ModelState:
    """Conditional MLP: [z, onehot(y)] -> tanh image."""
    out_dim = int(np.prod(out_shape))
    layers = [
        dense("g1", latent_dim + num_classes, hidden, rng),
        activation("g_act1", "tanh"),
        dense("g2", hidden, out_dim, rng, gain=1.0),
        activation("g_out", "tanh"),
    ]
    return ModelState(layers, (latent_dim + num_classes,), rep_layer="g_act1")


def ensemble_logits(models, x: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the client models' eval-mode logits."""
    return np.mean([forward(m, x, "eval").logits for m in models], axis=0)


def pairwise_distance_with_grad(x: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean L2 distance over all pairs in the batch, and its gradient."""
    n = len(x)
    flat = x.reshape(n, -1)
    if n < 2:
        return 0.0, np.zeros_like(x)
    diff = flat[:, None, :] - flat[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    pairs = n * (n - 1) / 2
    value = float(np.sum(np.triu(dist, 1)) / pairs)
    safe = np.where(dist > 0, dist, np.inf)
    grad = np.sum(diff / safe[:, :, None], axis=1) / pairs
    return value, grad.reshape(x.shape)


class Dense(Strategy):
    name = "dense"
    one_shot = True

    @dataclass(frozen=True)
    class Hyper:
        lambda1: float = 1.0
        lambda2: float = 0.5
        pretrain_epochs: int = 25
        generator_steps: int = 200
        distill_steps: int = 400
        latent_dim: int = 16
        synth_batch: int = 64

    def __init__(self, **hyper):
        super().__init__(**hyper)
        for key in ("pretrain_epochs", "generator_steps", "distill_steps", "latent_dim", "synth_batch"):
            if getattr(self.hp, key) < 1:
                raise ConfigError(f"dense.{key} must be >= 1")
        if self.hp.synth_batch < 2:
            raise ConfigError("dense.synth_batch must be >= 2")
        self.notes.append("dense: pretraining epochs reduced from 250 for desk-scale runs")
        self.client_models: list[ModelState] = []
        self.generator: ModelState | None = None
        self.history: dict[str, list[float]] = {"generator": [], "distill": []}

    def _latent(self, rng, num_classes):
        n = self.hp.synth_batch
        y = np.arange(n) % num_classes
        z = rng.standard_normal((n, self.hp.latent_dim))
        return np.concatenate([z, np.eye(num_classes)[y]], axis=1), y

    def generate(self, rng, num_classes, image_shape, mode="eval"):
        zin, y = self._latent(rng, num_classes)
        trace = forward(self.generator, zin, mode)
        return trace, trace.logits.reshape((len(y),) + tuple(image_shape)), y

    def run_one_shot(self, ctx, global_model):
        fed, ledger = ctx.fed, ctx.ledger
        num_classes = global_model.num_classes
        shape = global_model.input_shape
        self.client_models = []
        for k in range(fed.clients):
            try:
                res = local_train(self, ctx, k, global_model.copy(), 1, epochs=self.hp.pretrain_epochs)
            except TrainingError as exc:
                raise TrainingError(f"client {k} pretraining diverged: {exc}") from exc
            ledger.spend(1, k, res.flops["train"], res.steps, "train")
            ledger.send(1, k, Direction.UP, self.transmitted_params(res.model))
            self.client_models.append(res.model)

        # server side: ledgered against client id -1
        self.generator = build_generator(self.hp.latent_dim, num_classes, shape,
                                         stream(fed.seed, "dense", "generator-init"))
        rng = stream(fed.seed, "dense", "generator")
        opt = AdamState()
        batch_shape = (self.hp.synth_batch,) + tuple(shape)
        teacher_step = len(self.client_models) * flops(global_model, batch_shape)
        gen_step = flops(self.generator, (self.hp.synth_batch, self.generator.input_shape[0]))
        for step in range(self.hp.generator_steps):
            trace, x, y = self.generate(rng, num_classes, shape, mode="train")
            dx = np.zeros_like(x)
            logits_sum = 0.0
            traces = []
            for m in self.client_models:
                t = forward(m, x, "eval")
                traces.append(t)
                logits_sum = logits_sum + t.logits
            ens = logits_sum / len(self.client_models)
            ce, dens = ce_soft_with_grad(ens, np.eye(num_classes)[y])
            for m, t in zip(self.client_models, traces):
                _, d = backward(m, t, dens / len(self.client_models), input_grad=True)
                dx += d
            div, ddiv = pairwise_distance_with_grad(x)
            loss = self.hp.lambda1 * ce - self.hp.lambda2 * div
            check_finite(loss, f"generator step {step}")
            dout = (self.hp.lambda1 * dx - self.hp.lambda2 * ddiv).reshape(trace.logits.shape)
            adam_step(self.generator, backward(self.generator, trace, dout), opt, fed.optimizer)
            self.history["generator"].append(loss)
        ledger.spend(1, -1, self.hp.generator_steps * (teacher_step + gen_step), 0, "server")

        student = global_model.copy()
        rng = stream(fed.seed, "dense", "distill")
        opt = AdamState()
        for step in range(self.hp.distill_steps):
            _, x, _ = self.generate(rng, num_classes, shape)
            teacher = ensemble_logits(self.client_models, x)
            trace = forward(student, x, "train")
            loss, dlogits = kd_with_grad(trace.logits, teacher)
            check_finite(loss, f"distillation step {step}")
            adam_step(student, backward(student, trace, dlogits), opt, fed.optimizer)
            self.history["distill"].append(loss)
        ledger.spend(1, -1, self.hp.distill_steps * (teacher_step + flops(student, batch_shape)), 0, "server")
        return student, list(self.client_models)

