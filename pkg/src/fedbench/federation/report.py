"""report_v1: one CSV of per-round metrics plus a JSON manifest."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

REPORT_FORMAT = "report_v1"
CSV_COLUMNS = ("round", "global_acc", "pers_acc", "cum_params", "cum_bytes", "cum_flops")


@dataclass
class RoundRecord:
    round: int
    global_accuracy: float
    personalized_accuracy: float
    cum_params: int
    cum_bytes: int
    cum_flops: int
    client_drift: float = math.nan


@dataclass
class RunReport:
    records: list[RoundRecord]
    convergence_round: int | None
    manifest: dict = field(default_factory=dict)
    # in-memory only, never serialised
    ledger: object = field(default=None, repr=False, compare=False)
    global_model: object = field(default=None, repr=False, compare=False)

    @property
    def primary_metric(self) -> str:
        return self.manifest.get("primary_metric", "global")

    def accuracy_series(self, metric: str | None = None) -> list[float]:
        metric = metric or self.primary_metric
        attr = "personalized_accuracy" if metric == "personalized" else "global_accuracy"
        return [getattr(r, attr) for r in self.records]

    @property
    def final_accuracy(self) -> float:
        return self.accuracy_series()[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            writer.writerow([r.round, repr(r.global_accuracy), repr(r.personalized_accuracy),
                             r.cum_params, r.cum_bytes, r.cum_flops])
        return buf.getvalue()

    def to_manifest_json(self) -> str:
        body = dict(self.manifest)
        body["format"] = REPORT_FORMAT
        body["convergence_round"] = self.convergence_round
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        atomic_write(directory / "report.csv", self.to_csv())
        atomic_write(directory / "manifest.json", self.to_manifest_json())


def atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def read_report(directory) -> RunReport:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != REPORT_FORMAT:
        raise ValueError(f"{directory}: unsupported report format {manifest.get('format')!r}")
    records = []
    with open(directory / "report.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{directory}: unexpected columns {reader.fieldnames}")
        for row in reader:
            records.append(RoundRecord(int(row["round"]), float(row["global_acc"]), float(row["pers_acc"]),
                                       int(row["cum_params"]), int(row["cum_bytes"]), int(row["cum_flops"])))
    return RunReport(records, manifest.get("convergence_round"), manifest)
