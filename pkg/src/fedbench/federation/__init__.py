"""Round loop, weighted aggregation, cost ledger, evaluation and reports."""
from .aggregation import (
    AggregationWeights,
    aggregate_weighted,
    elastic_aggregate,
    elastic_coefficients,
    fedavg_mask,
    fedbn_mask,
    fednova_aggregate,
    fednova_direction,
    weighted_mean,
)
from .config import FederationConfig
from .evaluation import ConvergencePolicy, accuracy, detect_convergence, evaluate_global, evaluate_personalized
from .ledger import BYTES_PER_PARAM, CostLedger, Direction, closed_form_total, ledger_totals
from .loop import RunContext, client_drift, run_federation
from .report import CSV_COLUMNS, REPORT_FORMAT, RoundRecord, RunReport, read_report

__all__ = [name for name in dir() if not name.startswith("_")]
