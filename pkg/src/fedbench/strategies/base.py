"""Strategy hooks and the shared local training loop."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import TYPE_CHECKING

import numpy as np

from ..data import Dataset
from ..engine import AdamState, ModelState, adam_step, backward, ce_soft_with_grad, flops, forward
from ..errors import ConfigError, TrainingError
from ..federation.aggregation import aggregate_weighted
from ..rng import stream

if TYPE_CHECKING:
    from ..federation.loop import RunContext


@dataclass
class LocalResult:
    model: ModelState
    steps: int
    flops: dict[str, int] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one sample is dropped (batch norm needs two)."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches.pop()
    return batches


def check_finite(loss: float, where: str) -> None:
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss ({loss}) at {where}")


class Strategy:
    """FedAvg behaviour; subclasses override the hooks they change.

    Hyperparameters are declared as a nested ``Hyper`` dataclass.
    """

    name = "fedavg"
    one_shot = False
    personalized = False
    global_model_defined = True
    passes_per_step = 1

    @dataclass(frozen=True)
    class Hyper:
        pass

    def __init__(self, **hyper):
        known = {f.name for f in fields(self.Hyper)}
        unknown = set(hyper) - known
        if unknown:
            raise ConfigError(f"strategy {self.name}: unknown hyperparameters {sorted(unknown)}")
        self.hp = self.Hyper(**hyper)
        self.notes: list[str] = []

    def hyperparameters(self) -> dict:
        return {f.name: getattr(self.hp, f.name) for f in fields(self.hp)}

    # -- lifecycle -----------------------------------------------------------
    def prepare_clients(self, ctx: "RunContext") -> list[Dataset]:
        return list(ctx.clients)

    def setup(self, ctx: "RunContext") -> None:
        pass

    # -- communication ---------------------------------------------------------
    def broadcast_scalars(self) -> int:
        """Control scalars sent once to each client before the first round."""
        return 0

    def upload_scalars(self, model: ModelState) -> int:
        """Extra scalars each client uploads every round."""
        return 0

    def transmitted_params(self, model: ModelState) -> int:
        return model.param_count()

    # -- computation ----------------------------------------------------------
    def step_flops(self, model: ModelState, batch_shape) -> int:
        return self.passes_per_step * flops(model, batch_shape)

    def client_model(self, ctx: "RunContext", k: int, global_model: ModelState) -> ModelState:
        return global_model.copy()

    def batch_loss(self, ctx: "RunContext", k: int, model: ModelState, xb: np.ndarray, yb: np.ndarray):
        trace = forward(model, xb, "train")
        loss, dlogits = ce_soft_with_grad(trace.logits, yb)
        return loss, backward(model, trace, dlogits)

    def local_update(self, ctx: "RunContext", k: int, model: ModelState, rnd: int) -> LocalResult:
        return local_train(self, ctx, k, model, rnd)

    def aggregate(self, ctx: "RunContext", global_model: ModelState, results: list[LocalResult]) -> ModelState:
        return aggregate_weighted([r.model for r in results], ctx.weights)

    def personalized_models(self, ctx: "RunContext", results: list[LocalResult]) -> list[ModelState]:
        """Client models scored by personalized evaluation (pre-aggregation by default)."""
        return [r.model for r in results]


def local_train(strategy: Strategy, ctx: "RunContext", k: int, model: ModelState, rnd: int,
                data: Dataset | None = None, epochs: int | None = None) -> LocalResult:
    """Minibatch Adam over ``data`` (client k's partition by default) with a fresh optimizer."""
    data = ctx.clients[k] if data is None else data
    epochs = ctx.fed.local_epochs if epochs is None else epochs
    x = data.images.astype(np.float64)
    y = data.targets()
    opt = AdamState()
    steps = spent = 0
    for epoch in range(epochs):
        for idx in minibatches(len(data), ctx.fed.batch_size, stream(ctx.fed.seed, "shuffle", k, rnd, epoch)):
            xb = x[idx]
            loss, grads = strategy.batch_loss(ctx, k, model, xb, y[idx])
            check_finite(loss, f"client {k}, round {rnd}, step {steps}")
            adam_step(model, grads, opt, ctx.fed.optimizer)
            steps += 1
            spent += strategy.step_flops(model, xb.shape)
    return LocalResult(model, steps, {"train": spent})
