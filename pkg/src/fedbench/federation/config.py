from __future__ import annotations

from dataclasses import asdict, dataclass, field

from ..engine import AdamHyper
from ..errors import ConfigError
from .evaluation import ConvergencePolicy

EVAL_MODES = ("global", "personalized", "both")


@dataclass(frozen=True)
class FederationConfig:
    clients: int
    global_rounds: int
    local_epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    eval_mode: str = "both"
    optimizer: AdamHyper = field(default_factory=AdamHyper)
    convergence: ConvergencePolicy = field(default_factory=ConvergencePolicy)

    def __post_init__(self):
        if self.clients < 1:
            raise ConfigError("federation.clients must be >= 1")
        if self.global_rounds < 1:
            raise ConfigError("federation.rounds must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("federation.local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("federation.batch_size must be >= 1")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"federation.eval_mode must be one of {EVAL_MODES}, got {self.eval_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)
