"""The round loop: download, local update, upload, aggregate, evaluate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..data import Dataset
from ..engine import ModelState
from ..errors import FedBenchError
from .aggregation import AggregationWeights
from .config import FederationConfig
from .evaluation import detect_convergence, evaluate_global, evaluate_personalized
from .ledger import CostLedger, Direction
from .report import RoundRecord, RunReport

# Departures from the reference setup that every run carries.
BASE_DEVIATIONS = (
    "small BN classifier (toy MLP/CNN) instead of ResNet-50",
    "seeded random initialisation instead of ImageNet-pretrained weights",
    "synthetic desk-scale images instead of the medical datasets",
    "optimizer state is reset at the start of every local update",
)


@dataclass
class RunContext:
    fed: FederationConfig
    clients: list[Dataset]
    test: Dataset | list[Dataset]
    init_model: ModelState
    ledger: CostLedger = field(default_factory=CostLedger)
    weights: AggregationWeights | None = None


def client_drift(models: Sequence[ModelState], anchor: ModelState) -> float:
    """Mean over clients of ||w_k - w_anchor||_2 on trainable parameters."""
    names = anchor.trainable_names()
    norms = []
    for m in models:
        sq = sum(float(np.sum((m.get(n) - anchor.get(n)) ** 2)) for n in names)
        norms.append(math.sqrt(sq))
    return float(np.mean(norms))


def run_federation(fed: FederationConfig, strategy, clients: Sequence[Dataset], test,
                   init_model: ModelState,
                   on_aggregate: Callable | None = None) -> RunReport:
    """Simulate ``fed.global_rounds`` rounds of ``strategy`` over ``clients``.

    ``on_aggregate(round, strategy, ctx, results, global_model)`` is called after
    each aggregation (used by tests to observe intermediate state).
    """
    if len(clients) != fed.clients:
        raise FedBenchError(f"config declares {fed.clients} clients but {len(clients)} partitions were given")
    if isinstance(test, Dataset) and len(test) == 0:
        raise FedBenchError("test set is empty")
    ctx = RunContext(fed, list(clients), test, init_model)
    ctx.clients = strategy.prepare_clients(ctx)
    ctx.weights = AggregationWeights.from_counts([len(c) for c in ctx.clients])
    strategy.setup(ctx)
    ledger = ctx.ledger
    flags: list[str] = []
    records: list[RoundRecord] = []
    global_model = init_model.copy()

    def evaluate(rnd, global_model, pers_models, drift):
        want_global = fed.eval_mode in ("global", "both")
        no_global = not strategy.global_model_defined
        want_pers = fed.eval_mode in ("personalized", "both") or (want_global and no_global)
        pers = evaluate_personalized(pers_models, test) if want_pers else math.nan
        if want_global and no_global:
            glob = pers
            flag = f"{strategy.name}: global accuracy column reports the personalized mean"
            if flag not in flags:
                flags.append(flag)
        elif want_global:
            glob = evaluate_global(global_model, test if isinstance(test, Dataset) else Dataset.concat(test))
        else:
            glob = math.nan
        records.append(RoundRecord(rnd, glob, pers, ledger.total_transmitted(), ledger.bytes_transmitted(),
                                   ledger.total_flops(), drift))

    if strategy.one_shot:
        global_model, pers_models = strategy.run_one_shot(ctx, global_model)
        evaluate(1, global_model, pers_models, math.nan)
    else:
        for rnd in range(1, fed.global_rounds + 1):
            results = []
            try:
                for k in range(fed.clients):
                    extra = strategy.broadcast_scalars() if rnd == 1 else 0
                    ledger.send(rnd, k, Direction.DOWN, strategy.transmitted_params(global_model), extra)
                    local = strategy.client_model(ctx, k, global_model)
                    res = strategy.local_update(ctx, k, local, rnd)
                    for kind, spent in res.flops.items():
                        ledger.spend(rnd, k, spent, res.steps if kind == "train" else 0, kind)
                    ledger.send(rnd, k, Direction.UP, strategy.transmitted_params(res.model),
                                strategy.upload_scalars(res.model))
                    results.append(res)
                drift = client_drift([r.model for r in results], global_model)
                new_global = strategy.aggregate(ctx, global_model, results)
            except FedBenchError as exc:
                raise type(exc)(f"round {rnd}: {exc}") from exc
            global_model = new_global
            if on_aggregate is not None:
                on_aggregate(rnd, strategy, ctx, results, global_model)
            evaluate(rnd, global_model, strategy.personalized_models(ctx, results), drift)

    if fed.eval_mode == "personalized" or (strategy.personalized and fed.eval_mode == "both"):
        primary = "personalized"
    else:
        primary = "global"
    report = RunReport(records, None, ledger=ledger, global_model=global_model)
    report.manifest = {
        "config": fed.to_dict(),
        "strategy": {"name": strategy.name, "hyperparameters": strategy.hyperparameters()},
        "seed": fed.seed,
        "primary_metric": primary,
        "convergence_policy": {"window": fed.convergence.window, "delta": fed.convergence.delta,
                               "rule": "first round r with max(acc[r..r+window]) - mean(acc[r-window+1..r]) < delta"},
        "deviations": list(BASE_DEVIATIONS) + list(strategy.notes),
        "flags": flags,
        "model": {
            "param_count": init_model.param_count(),
            "bn_param_count": init_model.batchnorm_param_count(),
            "trainable_layers": len(init_model.trainable_layers()),
            "step_flops": strategy.step_flops(init_model, (fed.batch_size,) + init_model.input_shape),
        },
        "client_sizes": [len(c) for c in ctx.clients],
        "client_synthetic": [int(np.sum(c.provenance == 1)) for c in ctx.clients],
        "mean_client_drift": [None if math.isnan(r.client_drift) else r.client_drift for r in records],
        "train_steps": ledger.train_steps(),
    }
    report.convergence_round = detect_convergence(report.accuracy_series(), fed.convergence)
    return report
