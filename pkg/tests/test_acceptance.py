"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -v`` and read the summary block at the end.
"""
import math
import time

import numpy as np
import pytest

from fedbench.cli import main as cli_main
from fedbench.data import (
    Dataset,
    FeatureShift,
    SyntheticSpec,
    apply_feature_shift,
    cross_client_std,
    gaussian_mixture,
    gen_synthetic,
    partition_dirichlet,
    partition_kfold,
)
from fedbench.diffusion import (
    DDPMConfig,
    DiffusionSchedule,
    ddpm_epochs,
    forward_noise_closed,
    forward_noise_step,
    sample,
    smooth_labels,
    train_ddpm,
)
from fedbench.engine import (
    Layer,
    ModelState,
    Role,
    activation,
    backward,
    batchnorm,
    ce_soft_with_grad,
    contrastive_with_grad,
    conv,
    dense,
    forward,
    kd_with_grad,
    mse_with_grad,
    prox_with_grad,
    restricted_log_weights,
    toy_mlp,
)
from fedbench.federation import (
    AggregationWeights,
    FederationConfig,
    RunContext,
    aggregate_weighted,
    closed_form_total,
    evaluate_global,
    fedbn_mask,
    run_federation,
)
from fedbench.rng import stream
from fedbench.strategies import FedAvg, FedBN, FedProx, FedRS, Moon, Ours, build_strategy, local_train
from fedbench.strategies import pairwise_distance_with_grad

from fedhelpers import ACCEPTANCE, SHAPE, dirichlet_clients, fixture_test_set, init_model, params_equal, run
from gradcheck import numeric_grad, rel_error, roundoff_bound

ALL = ("fedavg", "fedprox", "moon", "fednova", "fedrs", "elastic", "fedbn", "prr", "dense", "ours")


def verdict(capsys, number, title, ok, detail, elapsed, budget):
    in_time = elapsed < budget
    passed = bool(ok) and in_time
    line = (f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {title}  [{detail}; "
            f"{elapsed:.2f}s of {budget:g}s budget{'' if in_time else ', OVER BUDGET'}]")
    ACCEPTANCE.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line
    assert in_time, line


# -- 1. communication accounting ---------------------------------------------------------

def test_criterion_1_communication_accounting(capsys):
    data = gen_synthetic(SyntheticSpec(2, 20, (1, 2, 2), 1.0, 0.3), 0)
    test = data.subset(np.arange(4))
    # one optimizer step per client update keeps the sweep cheap; accounting ignores training
    fast = {"dense": dict(pretrain_epochs=1, generator_steps=1, distill_steps=1, synth_batch=4, latent_dim=2)}
    start = time.perf_counter()
    mismatches = []
    checked = 0
    for name in ALL:
        for E in (1, 2, 3, 5):
            for K in (1, 2, 3, 5):
                clients = [data.subset(np.arange(2 * k, 2 * k + 2)) for k in range(K)]
                model = toy_mlp((1, 2, 2), 2, stream(0, "init"), hidden=(4, 4))
                fed = FederationConfig(K, E, local_epochs=1, batch_size=2, seed=0, eval_mode="global")
                rep = run_federation(fed, build_strategy(name, **fast.get(name, {})), clients, test, model)
                want = closed_form_total(name, model.param_count(), model.batchnorm_param_count(),
                                         len(model.trainable_layers()), E, K)
                got = rep.ledger.total_transmitted()
                checked += 1
                if got != want or rep.ledger.bytes_transmitted() != 4 * got:
                    mismatches.append((name, E, K, got, want))
    elapsed = time.perf_counter() - start

    # the reference model at its published size
    P = 24_090_000
    row_ok = all(closed_form_total("fedavg", P, 0, 0, E, K) == 48_180_000 * E * K
                 for E in (1, 2, 3, 5) for K in (1, 2, 3, 5))
    bytes_per_model = 4 * P
    # the published byte figure is itself rounded: some P that rounds to 2.409e7 gives both printed values
    consistent = [p for p in range(24_085_000, 24_095_000)
                  if float(f"{2 * p:.4g}") == 4.818e7 and float(f"{4 * p:.4g}") == 9.635e7
                  and float(f"{p:.4g}") == 2.409e7]
    ok = not mismatches and row_ok and bytes_per_model == 96_360_000 and consistent
    detail = (f"{checked} ledgers exact, {len(mismatches)} mismatches; P=2.409e7 gives 4.818e7*E*K params and "
              f"{bytes_per_model:.4e} bytes/model; published 9.635e7 matches P in "
              f"[{consistent[0] if consistent else '-'}, {consistent[-1] if consistent else '-'}]")
    verdict(capsys, 1, "communication accounting", ok, detail, elapsed, 1.0)


# -- 2. FLOP ratios ----------------------------------------------------------------------

def test_criterion_2_flop_ratios(capsys, two_class_fixture):
    start = time.perf_counter()
    test = fixture_test_set()
    even = dirichlet_clients(two_class_fixture, 2, alpha=100.0, seed=0)
    per_epoch = {}
    for name in ("fedavg", "moon", "prr"):
        rep = run(build_strategy(name), even, test, rounds=1, epochs=1)
        per_epoch[name] = rep.ledger.total_flops(kind="train")
    moon = per_epoch["moon"] / per_epoch["fedavg"]
    prr = per_epoch["prr"] / per_epoch["fedavg"]
    # uneven clients so that augmentation actually adds synthetic samples and steps
    uneven = [two_class_fixture.subset(np.arange(0, 30)), two_class_fixture.subset(np.arange(30, 120))]
    a = run(FedAvg(), uneven, test, rounds=1)
    o = run(Ours(ddpm_epochs=3, ddpm_hidden=16, timesteps=10), uneven, test, rounds=1)
    per_step_a = a.ledger.total_flops(kind="train") / a.ledger.train_steps()
    per_step_o = o.ledger.total_flops(kind="train") / o.ledger.train_steps()
    ours = per_step_o / per_step_a
    elapsed = time.perf_counter() - start
    ok = moon == 3.0 and prr == 2.0 and ours == 1.0 and o.ledger.train_steps() > a.ledger.train_steps()
    verdict(capsys, 2, "FLOP ratios", ok, f"MOON/FedAvg={moon}, PRR/FedAvg={prr}, Ours/FedAvg per step={ours}",
            elapsed, 1.0)


# -- 3. aggregation oracle ---------------------------------------------------------------

def _random_model(r):
    width = int(r.integers(1, 5))
    layers = [dense("d1", 3, width, r), batchnorm("bn", width), activation("a"), dense("d2", width, 2, r)]
    m = ModelState(layers, (3,), "a")
    for name in m.state_dict():
        v = m.get(name)
        if name.endswith("batches_tracked"):
            m.set(name, np.array(r.integers(0, 100)).reshape(v.shape))
        else:
            m.set(name, r.normal(scale=10.0 ** r.integers(-3, 4), size=v.shape))
    return m, width


def _brute_force_mean(models, counts, name):
    total = float(sum(counts))
    arrays = [np.asarray(m.get(name), dtype=np.float64).ravel().tolist() for m in models]
    out = [math.fsum((counts[k] / total) * arrays[k][i] for k in range(len(models))) for i in range(len(arrays[0]))]
    return np.array(out).reshape(models[0].get(name).shape)


def test_criterion_3_aggregation_oracle(capsys):
    start = time.perf_counter()
    worst = 0.0
    counters_ok = True
    for instance in range(1000):
        r = np.random.default_rng(instance)
        K = int(r.integers(1, 7))
        seed_model, width = _random_model(r)
        models = []
        for _ in range(K):
            m = seed_model.copy()
            for name in m.state_dict():
                v = m.get(name)
                m.set(name, v if name.endswith("batches_tracked") else r.normal(scale=np.abs(v).max() + 1.0, size=v.shape))
            models.append(m)
        counts = [int(c) for c in r.integers(1, 1000, size=K)]
        agg = aggregate_weighted(models, AggregationWeights.from_counts(counts))
        roles = agg.roles()
        for name in agg.state_dict():
            if roles[name] is Role.BN_COUNTER:
                counters_ok &= np.array_equal(agg.get(name), models[0].get(name))
                continue
            want = _brute_force_mean(models, counts, name)
            worst = max(worst, float(np.max(np.abs(agg.get(name) - want))))
    elapsed = time.perf_counter() - start
    verdict(capsys, 3, "aggregation oracle", worst <= 1e-12 and counters_ok,
            f"1000 instances, max abs error {worst:.2e}", elapsed, 10.0)


# -- 4. disabling equivalence --------------------------------------------------------------

def _trajectory(strategy, clients, test, seed):
    states = []

    def hook(rnd, strategy, ctx, results, global_model):
        states.append(global_model.state_dict())

    rep = run(strategy, clients, test, rounds=10, seed=seed, on_aggregate=hook)
    return states, rep.accuracy_series("global"), rep.accuracy_series("personalized")


def test_criterion_4_disabling_equivalence(capsys, two_class_fixture):
    start = time.perf_counter()
    test = fixture_test_set()
    failures = []
    for seed in (0, 1, 2):
        clients = dirichlet_clients(two_class_fixture, 3, alpha=0.5, seed=seed)
        ref = _trajectory(FedAvg(), clients, test, seed)
        variants = {"fedprox(mu=0)": FedProx(mu=0.0), "moon(mu=0)": Moon(mu=0.0), "fedrs(alpha=1)": FedRS(alpha=1.0),
                    "ours(no augmentation)": Ours(augment=False)}
        for label, strategy in variants.items():
            states, glob, pers = _trajectory(strategy, clients, test, seed)
            same = (glob == ref[1] and pers == ref[2] and len(states) == len(ref[0])
                    and all(all(np.array_equal(a[n], b[n]) for n in a) for a, b in zip(states, ref[0])))
            if not same:
                failures.append(f"{label}@seed{seed}")
    elapsed = time.perf_counter() - start
    verdict(capsys, 4, "strategy-disabling equivalence", not failures,
            f"4 variants x 3 seeds x 10 rounds, bitwise params and accuracy; failures={failures}", elapsed, 300.0)


# -- 5. FedBN mask invariant ------------------------------------------------------------

def test_criterion_5_fedbn_mask(capsys, two_class_fixture):
    start = time.perf_counter()
    clients = dirichlet_clients(two_class_fixture, 3, alpha=0.5, seed=0)
    stats_ok = []
    worst = [0.0]

    def hook(rnd, strategy, ctx, results, global_model):
        models = [r.model for r in results]
        avg = aggregate_weighted(models, ctx.weights)
        shared = set(fedbn_mask(global_model))
        roles = global_model.roles()
        for k, res in enumerate(results):
            local = strategy.local[k]
            for name in res.model.state_dict():
                if name in shared:
                    worst[0] = max(worst[0], float(np.max(np.abs(local.get(name) - avg.get(name)))))
                elif roles[name] in (Role.BN_STATISTIC, Role.BN_COUNTER):
                    stats_ok.append(np.array_equal(local.get(name), res.model.get(name)))

    run(FedBN(), clients, fixture_test_set(), rounds=20, on_aggregate=hook)
    elapsed = time.perf_counter() - start
    ok = len(stats_ok) == 20 * 3 * 2 * 3 and all(stats_ok) and worst[0] <= 1e-12
    verdict(capsys, 5, "FedBN mask invariant", ok,
            f"{len(stats_ok)} BN statistic checks bitwise, shared params max error {worst[0]:.1e}", elapsed, 120.0)


# -- 6. diffusion correctness -----------------------------------------------------------

def _within(a, b, tol_se):
    n = len(a)
    mean_se = math.sqrt(a.var(ddof=1) / n + b.var(ddof=1) / n)

    def var_se(x):
        c = x - x.mean()
        return math.sqrt(max(np.mean(c**4) - np.mean(c**2) ** 2, 0.0) / n)

    var_se_total = math.sqrt(var_se(a) ** 2 + var_se(b) ** 2)
    return (abs(a.mean() - b.mean()) < tol_se * mean_se, abs(a.var(ddof=1) - b.var(ddof=1)) < tol_se * var_se_total)


def test_criterion_6_diffusion_correctness(capsys):
    start = time.perf_counter()
    s = DiffusionSchedule()
    n = 10_000
    mix = gaussian_mixture([-0.5, 0.5], 5000, (1,), 0.2, seed=0)
    x0 = mix.images.ravel().astype(np.float64)[stream(0, "x0").permutation(n)]
    results = {}
    for t in (1, s.T // 2, s.T):
        rng = stream(1, "iterate", t)
        x = x0.copy()
        for step in range(t):
            x = forward_noise_step(x, s.beta[step], rng.normal(size=n))
        closed = forward_noise_closed(x0, t, stream(1, "closed", t).normal(size=n), s)
        results[t] = tuple(bool(v) for v in _within(x, closed, 3.0))
    eq7 = np.array_equal(smooth_labels([1.0, 0.0], 0.1, 2), np.array([0.95, 0.05]))
    eq8 = ddpm_epochs(2, 2000, None) == 1000 and ddpm_epochs(9, 100_000, None) == 90
    elapsed = time.perf_counter() - start
    mc_ok = all(m and v for m, v in results.values())
    verdict(capsys, 6, "diffusion correctness", mc_ok and eq7 and eq8,
            f"mean/var within 3 SE at t=1,{s.T // 2},{s.T}: {results}; smoothing exact={eq7}; epoch rule exact={eq8}",
            elapsed, 60.0)


# -- 7. generative fidelity -------------------------------------------------------------

def _shifted_clients(seed):
    """Three clients of different size and brightness, like the TB sources."""
    data = gen_synthetic(SyntheticSpec(2, 300, SHAPE, 1.0, 0.3), seed)
    perm = stream(seed, "tb-split").permutation(len(data))
    sizes = [60, 120, 178]
    bounds = np.cumsum([0] + sizes)
    clients = [data.subset(np.sort(perm[bounds[i]:bounds[i + 1]])) for i in range(3)]
    shifts = [FeatureShift(-0.4, 1.0, 0.02), FeatureShift(0.0, 1.0, 0.02), FeatureShift(0.4, 1.0, 0.02)]
    return apply_feature_shift(clients, shifts, seed)


def test_criterion_7_generative_fidelity(capsys):
    start = time.perf_counter()
    mixture = gaussian_mixture([-0.5, 0.5], 200, (1, 1, 2), 0.2, seed=0)
    ddpm = train_ddpm(mixture, DiffusionSchedule(), DDPMConfig(epochs=100), seed=1)
    errors = [float(abs(sample(ddpm, label, 300, seed=2).mean() - mean)) for label, mean in ((0, -0.5), (1, 0.5))]
    means_ok = max(errors) < 0.15
    changes = []
    for seed in (0, 1, 2):
        clients = _shifted_clients(seed)
        fed = FederationConfig(3, 1, seed=seed)
        ctx = RunContext(fed, clients, clients[0], init_model(seed))
        augmented = Ours().prepare_clients(ctx)
        before, after = cross_client_std(clients) * 127.5, cross_client_std(augmented) * 127.5
        changes.append((round(before, 3), round(after, 3)))
    std_ok = all(a < b for b, a in changes)
    elapsed = time.perf_counter() - start
    verdict(capsys, 7, "generative fidelity", means_ok and std_ok,
            f"class-mean errors {[round(e, 3) for e in errors]}; cross-client std (0..255) before->after per seed "
            f"{changes}", elapsed, 600.0)


# -- 8. qualitative orderings -----------------------------------------------------------

def _benchmark(seed):
    data = gen_synthetic(SyntheticSpec(4, 200, (1, 6, 6)), seed)
    folds, test = partition_kfold(data, 5, seed)
    pool = Dataset.concat(folds)
    return pool, partition_dirichlet(pool, 5, 0.5, seed), test


def test_criterion_8_qualitative_orderings(capsys):
    start = time.perf_counter()
    rounds, epochs = 40, 2
    rows = []
    for seed in (0, 1, 2):
        pool, clients, test = _benchmark(seed)
        model = toy_mlp((1, 6, 6), 4, stream(seed, "init"), hidden=(32, 32))
        fed = FederationConfig(5, rounds, local_epochs=epochs, batch_size=32, seed=seed, eval_mode="global")
        avg = run_federation(fed, build_strategy("fedavg"), clients, test, model)
        prox = run_federation(fed, build_strategy("fedprox", mu=0.01), clients, test, model)
        dense_run = run_federation(fed, build_strategy("dense"), clients, test, model)
        # pooled-data oracle with the same optimizer and the same number of passes over the data
        central_fed = FederationConfig(1, 1, local_epochs=rounds * epochs, batch_size=32, seed=seed)
        central = local_train(FedAvg(), RunContext(central_fed, [pool], test, model), 0, model.copy(), 1).model
        rows.append({
            "drift": (float(np.mean(avg.manifest["mean_client_drift"])),
                      float(np.mean(prox.manifest["mean_client_drift"]))),
            "dense": (dense_run.final_accuracy, avg.final_accuracy,
                      dense_run.ledger.total_transmitted() == 5 * model.param_count()),
            "ratio": avg.final_accuracy / evaluate_global(central, test),
        })
    a = all(r["drift"][1] < r["drift"][0] for r in rows)
    b = all(r["dense"][0] < r["dense"][1] and r["dense"][2] for r in rows)
    c = all(r["ratio"] >= 0.9 for r in rows)
    elapsed = time.perf_counter() - start
    detail = ("(a) drift fedavg/fedprox " + ", ".join(f"{r['drift'][0]:.4f}/{r['drift'][1]:.4f}" for r in rows)
              + "; (b) acc dense/fedavg " + ", ".join(f"{r['dense'][0]:.3f}/{r['dense'][1]:.3f}" for r in rows)
              + " with K*P communication; (c) fedavg/central " + ", ".join(f"{r['ratio']:.3f}" for r in rows))
    verdict(capsys, 8, "qualitative orderings", a and b and c, detail, elapsed, 1800.0)


# -- 9. determinism -----------------------------------------------------------------------

DETERMINISM_CONFIG = """
strategies = fedavg, fedprox, moon, fednova, fedrs, elastic, fedbn, prr, dense, ours
partition.folds = 3
partition.method = quantity
partition.proportions = 0.2, 0.3, 0.5
partition.brightness = -0.3, 0, 0.3
federation.rounds = 3
strategy.dense.pretrain_epochs = 2
strategy.dense.generator_steps = 5
strategy.dense.distill_steps = 5
strategy.ours.ddpm_max_epochs = 20
"""


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(capsys, tmp_path):
    start = time.perf_counter()
    cfg = tmp_path / "det.cfg"
    cfg.write_text(DETERMINISM_CONFIG)
    codes = [cli_main(["run", "--config", str(cfg), "--out", str(tmp_path / d), "--seed", "11"]) for d in ("a", "b")]
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    reports = sum(1 for p in a if p.name == "report.csv")
    ok = codes == [0, 0] and a == b and reports == 30
    elapsed = time.perf_counter() - start
    verdict(capsys, 9, "determinism", ok,
            f"{len(a)} files from 10 strategies x 3 folds byte-identical across two CLI runs", elapsed, 600.0)


# -- 10. gradient checks ------------------------------------------------------------------

def _layer_case(kind, r):
    if kind == "dense":
        return ModelState([dense("l", 4, 3, r)], (4,), "l"), (3, 4)
    if kind == "conv":
        return ModelState([conv("l", 2, 2, 3, r), Layer("f", "flatten")], (2, 4, 4), "f"), (2, 2, 4, 4)
    if kind == "conv-strided":
        return ModelState([conv("l", 1, 2, 3, r, stride=2), Layer("f", "flatten")], (1, 5, 5), "f"), (2, 1, 5, 5)
    if kind == "batchnorm-1d":
        return ModelState([dense("d", 3, 3, r), batchnorm("l", 3)], (3,), "l"), (5, 3)
    if kind == "batchnorm-2d":
        return ModelState([batchnorm("l", 2), Layer("f", "flatten")], (2, 3, 3), "f"), (3, 2, 3, 3)
    if kind in ("relu", "tanh", "silu"):
        return ModelState([dense("d", 3, 3, r), activation("l", kind)], (3,), "l"), (4, 3)
    if kind == "pool":
        return ModelState([conv("c", 1, 2, 3, r), Layer("l", "pool")], (1, 4, 4), "l"), (3, 1, 4, 4)
    if kind == "flatten":
        return ModelState([Layer("l", "flatten"), dense("d", 8, 2, r)], (2, 2, 2), "d"), (3, 2, 2, 2)
    raise KeyError(kind)


LAYER_KINDS = ("dense", "conv", "conv-strided", "batchnorm-1d", "batchnorm-2d", "relu", "tanh", "silu", "pool",
               "flatten")


def _layer_error(kind, r):
    model, xshape = _layer_case(kind, r)
    for layer in model.layers:
        if layer.kind == "batchnorm":
            layer.params["gamma"] = r.normal(1.0, 0.3, size=layer.params["gamma"].shape)
            layer.params["beta"] = r.normal(0.0, 0.3, size=layer.params["beta"].shape)
    x = r.normal(size=xshape)
    upstream = r.normal(size=forward(model, x, "eval").logits.shape)

    def loss():
        return float((forward(model, x, "train", update_stats=False).logits * upstream).sum())

    grads, dx = backward(model, forward(model, x, "train", update_stats=False), upstream, input_grad=True)
    atol = roundoff_bound(loss())
    worst = rel_error(dx, numeric_grad(loss, x), atol)
    for name in model.trainable_names():
        worst = max(worst, rel_error(grads[name], numeric_grad(loss, model.get(name)), atol))
    return worst


def _vector_error(fn, arrays, which):
    """fn(*arrays) -> (value, grad wrt arrays[which])."""
    value, g = fn(*arrays)
    return rel_error(g, numeric_grad(lambda: fn(*arrays)[0], arrays[which]), roundoff_bound(value))


def _loss_errors(r):
    n, c = int(r.integers(2, 6)), int(r.integers(2, 5))
    logits = r.normal(size=(n, c)) * 2
    soft = r.dirichlet(np.ones(c), size=n)
    out = {"cross-entropy": _vector_error(ce_soft_with_grad, [logits, soft], 0)}
    present = r.random(c) < 0.6
    present[r.integers(c)] = True
    logw = restricted_log_weights(present, float(r.uniform(0.05, 0.95)))
    out["restricted softmax"] = _vector_error(lambda z, y: ce_soft_with_grad(z + logw, y), [logits.copy(), soft], 0)
    temp = float(r.uniform(0.5, 4.0))
    out["distillation"] = _vector_error(lambda s, t: kd_with_grad(s, t, temp), [logits.copy(), r.normal(size=(n, c))], 0)
    d = int(r.integers(2, 6))
    tau, mu = float(r.uniform(0.2, 2.0)), float(r.uniform(0.1, 2.0))
    z = [r.normal(size=(n, d)) for _ in range(3)]
    out["contrastive"] = _vector_error(lambda a, b, p: contrastive_with_grad(a, b, p, tau, mu), z, 0)
    out["diversity"] = _vector_error(pairwise_distance_with_grad, [r.normal(size=(n, 1, 2, 2))], 0)
    out["denoising mse"] = _vector_error(mse_with_grad, [r.normal(size=(n, 4)), r.normal(size=(n, 4))], 0)
    model = ModelState([dense("a", 3, 2, r), batchnorm("bn", 2)], (3,), "bn")
    anchor = model.copy()
    for name in anchor.trainable_names():
        anchor.set(name, r.normal(size=anchor.get(name).shape))
    pmu = float(r.uniform(0.001, 10.0))
    value, grads = prox_with_grad(model, anchor, pmu)
    out["proximal"] = max(rel_error(grads[name], numeric_grad(lambda: prox_with_grad(model, anchor, pmu)[0],
                                                              model.get(name)), roundoff_bound(value))
                          for name in model.trainable_names())
    return out


def _strategy_error(name, fixture, r, ctx_cache):
    """Full local objective of one strategy at random coordinates of a random model."""
    if name not in ctx_cache:
        client = fixture.subset(np.flatnonzero(fixture.labels == 0)) if name == "fedrs" else fixture
        s = build_strategy(name)
        fed = FederationConfig(1, 1, batch_size=16)
        ctx = RunContext(fed, [client], fixture_test_set(), init_model(0))
        ctx.weights = AggregationWeights.uniform(1)
        s.setup(ctx)
        ctx_cache[name] = (s, ctx, client)
    s, ctx, client = ctx_cache[name]
    base = toy_mlp(SHAPE, 2, r, hidden=(16, 16))
    for layer in base.layers:
        if layer.kind == "batchnorm":
            layer.params["gamma"] = r.normal(1.0, 0.3, size=layer.params["gamma"].shape)
            layer.params["beta"] = r.normal(0.0, 0.3, size=layer.params["beta"].shape)
    model = s.client_model(ctx, 0, base)
    if name == "moon":
        s.previous[0] = toy_mlp(SHAPE, 2, r, hidden=(16, 16))
    idx = r.choice(len(client), size=8, replace=False)
    xb, yb = client.images[idx].astype(np.float64), client.targets()[idx]
    value, grads = s.batch_loss(ctx, 0, model, xb, yb)
    atol = roundoff_bound(value)
    worst = 0.0
    for pname in r.choice(model.trainable_names(), size=3, replace=False):
        arr = model.get(pname)
        flat = r.integers(arr.size, size=min(4, arr.size))
        for i in flat:
            j = np.unravel_index(i, arr.shape)
            orig = arr[j]
            arr[j] = orig + 1e-5
            fp = s.batch_loss(ctx, 0, model, xb, yb)[0]
            arr[j] = orig - 1e-5
            fm = s.batch_loss(ctx, 0, model, xb, yb)[0]
            arr[j] = orig
            worst = max(worst, rel_error(np.array([grads[pname][j]]), np.array([(fp - fm) / 2e-5]), atol))
    return worst


def test_criterion_10_gradient_checks(capsys, two_class_fixture):
    start = time.perf_counter()
    worst = {}
    for kind in LAYER_KINDS:
        for i in range(100):
            worst[kind] = max(worst.get(kind, 0.0), _layer_error(kind, np.random.default_rng(i)))
    for i in range(100):
        for term, err in _loss_errors(np.random.default_rng(10_000 + i)).items():
            worst[term] = max(worst.get(term, 0.0), err)
    cache = {}
    for name in ("fedavg", "fedprox", "moon", "fednova", "fedrs", "elastic", "fedbn", "prr"):
        for i in range(100):
            worst[f"{name} objective"] = max(worst.get(f"{name} objective", 0.0),
                                             _strategy_error(name, two_class_fixture, np.random.default_rng(i), cache))
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    verdict(capsys, 10, "gradient checks", not bad,
            f"{len(worst)} kinds/terms x 100 instances, worst rel error {max(worst.values()):.1e}; failing={bad}",
            elapsed, 120.0)
