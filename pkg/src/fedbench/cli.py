"""Command-line front end: ``fedbench run | summarize | costs | stats``.

Configuration is flat ``key = value`` text with dotted section paths, e.g.::

    strategies = fedavg, fedprox
    federation.rounds = 20
    strategy.fedprox.mu = 0.01

Any key can be overridden from the environment as ``FEDBENCH_<KEY>`` with dots
written as double underscores (``FEDBENCH_FEDERATION__ROUNDS=5``). Precedence is
defaults < file < environment < ``--seed``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    FeatureShift,
    SyntheticSpec,
    apply_feature_shift,
    gen_synthetic,
    kfold_indices,
    load_dataset,
    partition_dirichlet,
    partition_quantity,
    pixel_stats,
)
from .engine import AdamHyper, build_model
from .errors import ConfigError, FedBenchError
from .federation import (
    ConvergencePolicy,
    FederationConfig,
    RunContext,
    detect_convergence,
    read_report,
    run_federation,
)
from .federation.report import atomic_write
from .rng import stream
from .strategies import STRATEGIES, build_strategy, default_hyperparameters

ENV_PREFIX = "FEDBENCH_"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
FAILED_MARKER = "FAILED"
PARTITION_METHODS = ("kfold", "dirichlet", "quantity")

# key -> default; the default's type is the key's type
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "out": "runs",
    "strategies": "fedavg",
    "dataset.source": "synthetic",
    "dataset.classes": 2,
    "dataset.samples_per_class": 60,
    "dataset.image_shape": "1x4x4",
    "dataset.signal": 1.0,
    "dataset.noise": 0.3,
    "partition.folds": 6,
    "partition.run_folds": "",
    "partition.method": "kfold",
    "partition.clients": 0,
    "partition.concentration": 0.5,
    "partition.proportions": "",
    "partition.brightness": "",
    "partition.contrast": "",
    "partition.shift_noise": "",
    "model.arch": "mlp",
    "model.width": "32,32",
    "federation.rounds": 20,
    "federation.local_epochs": 1,
    "federation.batch_size": 32,
    "federation.eval_mode": "both",
    "federation.lr": 1e-3,
    "federation.weight_decay": 5e-4,
    "federation.convergence_window": 5,
    "federation.convergence_delta": 0.001,
    "stats.fold": 0,
    "stats.augment": True,
}


# -- configuration ------------------------------------------------------------------

def _coerce(key: str, raw: str, default):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
    except ValueError:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw.strip()!r}") from None
    return text


def _strategy_default(key: str):
    parts = key.split(".")
    if len(parts) != 3:
        raise ConfigError(f"{key}: strategy keys look like strategy.<name>.<hyperparameter>")
    _, name, hp = parts
    if name not in STRATEGIES:
        raise ConfigError(f"{key}: unknown strategy {name!r}; choose from {sorted(STRATEGIES)}")
    defaults = default_hyperparameters(name)
    if hp not in defaults:
        raise ConfigError(f"{key}: unknown hyperparameter {hp!r} for {name}; choose from {sorted(defaults)}")
    return defaults[hp]


def _default_for(key: str):
    if key.startswith("strategy."):
        return _strategy_default(key)
    if key not in DEFAULTS:
        raise ConfigError(f"{key}: unknown config key")
    return DEFAULTS[key]


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key in raw:
            raise ConfigError(f"{key}: set twice ({origin}:{lineno})")
        raw[key] = value
    return raw


def env_overrides(environ) -> dict[str, str]:
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            out[name[len(ENV_PREFIX):].lower().replace("__", ".")] = value
    return out


def resolve_config(raw: dict[str, str]) -> dict[str, object]:
    """Typed config: every default plus validated overrides, keys sorted."""
    cfg: dict[str, object] = dict(DEFAULTS)
    for key, value in raw.items():
        cfg[key] = _coerce(key, value, _default_for(key))
    return dict(sorted(cfg.items()))


def load_config(path, environ=None, seed: int | None = None) -> dict[str, object]:
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"--config: cannot read {path}: {exc.strerror}") from None
        raw.update(parse_config_text(text, str(path)))
    raw.update(env_overrides(os.environ if environ is None else environ))
    if seed is not None:
        raw["seed"] = str(seed)
    return resolve_config(raw)


def _floats(cfg, key) -> list[float]:
    text = str(cfg[key]).strip()
    if not text:
        return []
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None


def _ints(cfg, key, sep=",") -> list[int]:
    text = str(cfg[key]).strip()
    if not text:
        return []
    try:
        return [int(v) for v in text.split(sep)]
    except ValueError:
        raise ConfigError(f"{key}: expected integers separated by {sep!r}, got {text!r}") from None


def strategy_names(cfg) -> list[str]:
    names = [s.strip().lower() for s in str(cfg["strategies"]).split(",") if s.strip()]
    if not names:
        raise ConfigError("strategies: at least one strategy is required")
    for name in names:
        if name not in STRATEGIES:
            raise ConfigError(f"strategies: unknown strategy {name!r}; choose from {sorted(STRATEGIES)}")
    if len(set(names)) != len(names):
        raise ConfigError("strategies: listed more than once")
    return names


def strategy_hyper(cfg, name: str) -> dict:
    prefix = f"strategy.{name}."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def make_strategy(cfg, name: str):
    try:
        return build_strategy(name, **strategy_hyper(cfg, name))
    except ConfigError as exc:
        raise ConfigError(f"strategy.{name}: {exc}") from None


def federation_config(cfg, clients: int) -> FederationConfig:
    return FederationConfig(
        clients=clients,
        global_rounds=cfg["federation.rounds"],
        local_epochs=cfg["federation.local_epochs"],
        batch_size=cfg["federation.batch_size"],
        seed=cfg["seed"],
        eval_mode=cfg["federation.eval_mode"],
        optimizer=AdamHyper(lr=cfg["federation.lr"], weight_decay=cfg["federation.weight_decay"]),
        convergence=ConvergencePolicy(cfg["federation.convergence_window"], cfg["federation.convergence_delta"]),
    )


# -- experiment assembly -------------------------------------------------------------

def load_source(cfg) -> Dataset:
    source = str(cfg["dataset.source"])
    if source != "synthetic":
        return load_dataset(source)
    shape = tuple(_ints(cfg, "dataset.image_shape", "x"))
    spec = SyntheticSpec(cfg["dataset.classes"], cfg["dataset.samples_per_class"], shape,
                         cfg["dataset.signal"], cfg["dataset.noise"])
    return gen_synthetic(spec, cfg["seed"])


def fold_list(cfg) -> list[int]:
    folds = cfg["partition.folds"]
    chosen = _ints(cfg, "partition.run_folds") or list(range(folds))
    for f in chosen:
        if not 0 <= f < folds:
            raise ConfigError(f"partition.run_folds: fold {f} outside [0, {folds})")
    return sorted(set(chosen))


def _shifts(cfg, clients: int) -> list[FeatureShift] | None:
    cols = {"brightness_offset": "partition.brightness", "contrast_scale": "partition.contrast",
            "noise_sigma": "partition.shift_noise"}
    values = {field: _floats(cfg, key) for field, key in cols.items()}
    if not any(values.values()):
        return None
    for field, key in cols.items():
        if values[field] and len(values[field]) != clients:
            raise ConfigError(f"{key}: {len(values[field])} values for {clients} clients")
    defaults = FeatureShift()
    return [FeatureShift(**{f: (v[k] if v else getattr(defaults, f)) for f, v in values.items()})
            for k in range(clients)]


def build_fold(cfg, dataset: Dataset, fold: int) -> tuple[list[Dataset], Dataset]:
    """Fold ``fold`` is the test set; the remaining folds form the training pool."""
    folds = cfg["partition.folds"]
    parts = kfold_indices(dataset, folds, cfg["seed"])
    test = dataset.subset(parts[fold])
    rest = [p for i, p in enumerate(parts) if i != fold]
    method = cfg["partition.method"]
    n_clients = cfg["partition.clients"]
    seed = cfg["seed"]
    if method == "kfold":
        if n_clients not in (0, folds - 1):
            raise ConfigError(f"partition.clients: kfold uses the {folds - 1} training folds as clients")
        clients = [dataset.subset(p) for p in rest]
    elif method in ("dirichlet", "quantity"):
        pool = dataset.subset(np.concatenate(rest))
        if method == "dirichlet":
            if n_clients < 2:
                raise ConfigError("partition.clients: dirichlet needs at least 2 clients")
            clients = partition_dirichlet(pool, n_clients, cfg["partition.concentration"], seed)
        else:
            props = _floats(cfg, "partition.proportions")
            if not props:
                raise ConfigError("partition.proportions: required for the quantity method")
            if n_clients not in (0, len(props)):
                raise ConfigError(f"partition.clients: {n_clients} clients but {len(props)} proportions")
            clients = partition_quantity(pool, props, seed)
    else:
        raise ConfigError(f"partition.method: expected one of {PARTITION_METHODS}, got {method!r}")
    shifts = _shifts(cfg, len(clients))
    if shifts is not None:
        clients = apply_feature_shift(clients, shifts, seed)
    return clients, test


def init_model(cfg, dataset: Dataset, fold: int):
    arch = cfg["model.arch"]
    width = tuple(_ints(cfg, "model.width"))
    if len(width) != 2:
        raise ConfigError(f"model.width: expected two integers, got {cfg['model.width']!r}")
    key = "hidden" if arch == "mlp" else "channels"
    try:
        return build_model(arch, dataset.image_shape, dataset.class_count, stream(cfg["seed"], "init", fold),
                           **{key: width})
    except ConfigError as exc:
        raise ConfigError(f"model.arch: {exc}") from None


def experiment_record(cfg) -> dict:
    """The config as echoed into manifests; the output location is not part of a run."""
    return {k: v for k, v in cfg.items() if k != "out"}


# -- commands -----------------------------------------------------------------------

def run_dir(root, strategy: str, fold: int) -> Path:
    return Path(root) / strategy / f"fold{fold}"


def cmd_run(cfg, out: Path) -> int:
    names = strategy_names(cfg)
    folds = fold_list(cfg)
    # validate every strategy before spending compute
    for name in names:
        make_strategy(cfg, name)
    dataset = load_source(cfg)
    failures = []
    for fold in folds:
        clients, test = build_fold(cfg, dataset, fold)
        fed = federation_config(cfg, len(clients))
        model = init_model(cfg, dataset, fold)
        for name in names:
            target = run_dir(out, name, fold)
            target.mkdir(parents=True, exist_ok=True)
            marker = target / FAILED_MARKER
            try:
                report = run_federation(fed, make_strategy(cfg, name), clients, test, model)
            except FedBenchError as exc:
                if isinstance(exc, ConfigError):
                    raise
                failures.append(f"{name}/fold{fold}: {exc}")
                atomic_write(marker, f"{exc}\n")
                continue
            report.manifest["fold"] = fold
            report.manifest["experiment"] = experiment_record(cfg)
            report.manifest["test_size"] = len(test)
            report.write(target)
            if marker.exists():
                marker.unlink()
            print(f"{name} fold{fold}: final {report.primary_metric} accuracy {100 * report.final_accuracy:.3f}%")
    for line in failures:
        print(f"error: {line}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


@dataclass
class FoldRun:
    strategy: str
    fold: int
    path: Path
    report: object


def collect_runs(roots) -> tuple[list[FoldRun], list[str]]:
    """Complete runs under ``roots`` plus a list of incomplete run directories."""
    runs, incomplete = [], []
    seen = set()
    for root in roots:
        root = Path(root)
        for sub in sorted(root.glob("*/fold*")):
            if not sub.is_dir() or sub in seen:
                continue
            seen.add(sub)
            try:
                fold = int(sub.name[len("fold"):])
            except ValueError:
                continue
            if (sub / FAILED_MARKER).exists():
                incomplete.append(f"{sub}: run failed")
                continue
            try:
                report = read_report(sub)
            except (OSError, ValueError, KeyError) as exc:
                incomplete.append(f"{sub}: {exc}")
                continue
            if not report.records:
                incomplete.append(f"{sub}: no rounds recorded")
                continue
            runs.append(FoldRun(sub.parent.name, fold, sub, report))
    return runs, incomplete


def warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _warn_incomplete(incomplete):
    for line in incomplete:
        warn(f"excluding incomplete run {line}")


def _pct(x: float) -> str:
    return f"{100 * x:.3f}"


def summarize_runs(runs: list[FoldRun], baseline: str = "fedavg") -> tuple[list[dict], list[dict]]:
    """Per-strategy summary rows and per-(strategy, fold) rows with optimal/below marks."""
    acc = {(r.strategy, r.fold): r.report.final_accuracy for r in runs}
    strategies = sorted({r.strategy for r in runs})
    folds = sorted({r.fold for r in runs})
    best = {f: max(v for (s, ff), v in acc.items() if ff == f) for f in folds}
    fold_rows = []
    for (s, f), v in sorted(acc.items()):
        base = acc.get((baseline, f))
        fold_rows.append({
            "strategy": s, "fold": f, "accuracy": _pct(v),
            "optimal": int(v == best[f]),
            "below_baseline": "" if base is None or s == baseline else int(v < base),
        })
    rows = []
    for s in strategies:
        mine = [r for r in fold_rows if r["strategy"] == s]
        values = np.array([acc[(s, r["fold"])] for r in mine])
        below = [r["below_baseline"] for r in mine if r["below_baseline"] != ""]
        mean, std = float(values.mean()), float(values.std())
        rows.append({
            "strategy": s, "folds": len(values), "mean_acc": _pct(mean), "std_acc": _pct(std),
            "acc": f"{_pct(mean)} ± {_pct(std)}",
            "optimal_count": sum(r["optimal"] for r in mine),
            "below_baseline_count": 0 if s == baseline else (sum(below) if below else ""),
        })
    return rows, fold_rows


def _csv(rows: list[dict], delimiter=",") -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), delimiter=delimiter, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def _run_roots(args, cfg) -> list[Path]:
    return [Path(p) for p in args.runs] if args.runs else [Path(args.out or cfg["out"])]


def cmd_summarize(cfg, out: Path, roots) -> int:
    runs, incomplete = collect_runs(roots)
    _warn_incomplete(incomplete)
    if not runs:
        raise FedBenchError(f"no complete runs under {', '.join(map(str, roots))}")
    if "fedavg" not in {r.strategy for r in runs}:
        warn("no fedavg runs found; below-baseline counts are left empty")
    rows, fold_rows = summarize_runs(runs)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "summary.csv", _csv(rows))
    atomic_write(out / "summary_folds.csv", _csv(fold_rows))
    sys.stdout.write(_csv(rows))
    return EXIT_OK


def cost_rows(runs: list[FoldRun]) -> tuple[list[dict], dict[str, list[tuple[float, float]]]]:
    """Cost-at-convergence rows, re-derived from the CSV series, and per-strategy plot series."""
    rows = []
    per_strategy: dict[str, list[FoldRun]] = {}
    for r in sorted(runs, key=lambda r: (r.strategy, r.fold)):
        rep = r.report
        policy = rep.manifest.get("convergence_policy", {})
        conv = detect_convergence(rep.accuracy_series(),
                                  ConvergencePolicy(policy.get("window", 5), policy.get("delta", 0.001)))
        record = rep.records[conv - 1] if conv is not None else rep.records[-1]
        rows.append({
            "strategy": r.strategy, "fold": r.fold,
            "convergence_round": conv if conv is not None else "",
            "round": record.round,
            "params_at_convergence": record.cum_params,
            "bytes_at_convergence": record.cum_bytes,
            "mbytes_at_convergence": f"{record.cum_bytes / 1e6:.6f}",
            "bytes_final": rep.records[-1].cum_bytes,
            "final_accuracy": _pct(rep.final_accuracy),
            "non_converged": int(conv is None),
        })
        per_strategy.setdefault(r.strategy, []).append(r)
    series = {}
    for s, fold_runs in per_strategy.items():
        length = min(len(r.report.records) for r in fold_runs)
        points = []
        for i in range(length):
            mb = np.mean([r.report.records[i].cum_bytes for r in fold_runs]) / 1e6
            a = np.mean([r.report.accuracy_series()[i] for r in fold_runs])
            points.append((float(mb), float(a)))
        series[s] = points
    return rows, series


def cmd_costs(cfg, out: Path, roots) -> int:
    runs, incomplete = collect_runs(roots)
    _warn_incomplete(incomplete)
    if not runs:
        raise FedBenchError(f"no complete runs under {', '.join(map(str, roots))}")
    rows, series = cost_rows(runs)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "costs.csv", _csv(rows))
    (out / "series").mkdir(exist_ok=True)
    for s, points in series.items():
        body = "mbytes\taccuracy\n" + "".join(f"{mb:.6f}\t{_pct(a)}\n" for mb, a in points)
        atomic_write(out / "series" / f"{s}.tsv", body)
    for row in rows:
        if row["non_converged"]:
            warn(f"{row['strategy']}/fold{row['fold']} did not converge; cost taken at the final round")
    sys.stdout.write(_csv(rows))
    return EXIT_OK


def histogram_tsv(clients: list[Dataset]) -> str:
    lines = ["client\t" + "\t".join(f"b{i}" for i in range(256))]
    for k, c in enumerate(clients):
        lines.append(f"{k}\t" + "\t".join(repr(float(v)) for v in pixel_stats(c).histogram))
    return "\n".join(lines) + "\n"


def stats_row(stage: str, clients: list[Dataset]) -> dict:
    """Per-client pixel means on the 0..255 scale and their population std."""
    means = [pixel_stats(c).mean_8bit for c in clients]
    row = {"stage": stage}
    row.update({f"client{k}": f"{m:.3f}" for k, m in enumerate(means)})
    row["std"] = f"{float(np.std(means)):.3f}"
    return row


def cmd_stats(cfg, out: Path, paths) -> int:
    if paths:
        clients = [load_dataset(p) for p in paths]
        augmented = None
    else:
        dataset = load_source(cfg)
        fold = cfg["stats.fold"]
        if not 0 <= fold < cfg["partition.folds"]:
            raise ConfigError(f"stats.fold: fold {fold} outside [0, {cfg['partition.folds']})")
        clients, test = build_fold(cfg, dataset, fold)
        augmented = None
        if cfg["stats.augment"]:
            ours = make_strategy(cfg, "ours")
            ctx = RunContext(federation_config(cfg, len(clients)), clients, test,
                             init_model(cfg, dataset, fold))
            augmented = ours.prepare_clients(ctx)
    out.mkdir(parents=True, exist_ok=True)
    rows = [stats_row("before", clients)]
    atomic_write(out / "hist_before.tsv", histogram_tsv(clients))
    if augmented is not None:
        rows.append(stats_row("after", augmented))
        atomic_write(out / "hist_after.tsv", histogram_tsv(augmented))
    text = _csv(rows, delimiter="\t")
    atomic_write(out / "pixel_means.tsv", text)
    sys.stdout.write(text)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedbench", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", help="output directory (default: the config's out key)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        return p

    common(sub.add_parser("run", help="execute every (strategy, fold) run"))
    p = common(sub.add_parser("summarize", help="accuracy summary table across folds"))
    p.add_argument("runs", nargs="*", help="run roots (default: --out)")
    p = common(sub.add_parser("costs", help="communication cost at convergence"))
    p.add_argument("runs", nargs="*", help="run roots (default: --out)")
    p = common(sub.add_parser("stats", help="per-client pixel statistics"))
    p.add_argument("datasets", nargs="*", help="FDS1 files, one per client (default: the configured partition)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed)
        out = Path(args.out or cfg["out"])
        if args.command == "run":
            return cmd_run(cfg, out)
        if args.command == "summarize":
            return cmd_summarize(cfg, out, _run_roots(args, cfg))
        if args.command == "costs":
            return cmd_costs(cfg, out, _run_roots(args, cfg))
        return cmd_stats(cfg, out / "stats", args.datasets)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedBenchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
