"""Append-only communication and FLOP accounting."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

BYTES_PER_PARAM = 4


class Direction(str, Enum):
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class CommEvent:
    round: int
    client: int
    direction: Direction
    param_count: int
    extra_scalars: int = 0


@dataclass(frozen=True)
class FlopEvent:
    round: int
    client: int
    flops: int
    steps: int = 0
    kind: str = "train"


@dataclass
class CostLedger:
    events: list[CommEvent] = field(default_factory=list)
    flop_events: list[FlopEvent] = field(default_factory=list)

    def send(self, round: int, client: int, direction: Direction, param_count: int, extra_scalars: int = 0):
        if param_count < 0 or extra_scalars < 0:
            raise ValueError("counts must be non-negative")
        self.events.append(CommEvent(round, client, Direction(direction), int(param_count), int(extra_scalars)))

    def spend(self, round: int, client: int, flops: int, steps: int = 0, kind: str = "train"):
        self.flop_events.append(FlopEvent(round, client, int(flops), int(steps), kind))

    # totals are folds over the event lists
    def params_transmitted(self, up_to_round: int | None = None) -> int:
        return sum(e.param_count for e in self.events if up_to_round is None or e.round <= up_to_round)

    def scalars_transmitted(self, up_to_round: int | None = None) -> int:
        return sum(e.extra_scalars for e in self.events if up_to_round is None or e.round <= up_to_round)

    def total_transmitted(self, up_to_round: int | None = None) -> int:
        return self.params_transmitted(up_to_round) + self.scalars_transmitted(up_to_round)

    def bytes_transmitted(self, up_to_round: int | None = None) -> int:
        return BYTES_PER_PARAM * self.total_transmitted(up_to_round)

    def total_flops(self, up_to_round: int | None = None, kind: str | None = None) -> int:
        return sum(
            e.flops for e in self.flop_events
            if (up_to_round is None or e.round <= up_to_round) and (kind is None or e.kind == kind)
        )

    def train_steps(self, kind: str = "train") -> int:
        return sum(e.steps for e in self.flop_events if e.kind == kind)

    def count(self, direction: Direction, with_params: bool = True) -> int:
        return sum(1 for e in self.events if e.direction == direction and (e.param_count > 0 or not with_params))


def ledger_totals(ledger: CostLedger) -> dict[str, int]:
    return {
        "params": ledger.params_transmitted(),
        "extra_scalars": ledger.scalars_transmitted(),
        "total": ledger.total_transmitted(),
        "bytes": ledger.bytes_transmitted(),
        "flops": ledger.total_flops(),
    }


def closed_form_total(strategy: str, P: int, P_bn: int, layers: int, rounds: int, clients: int) -> int:
    """Parameters communicated over a whole run, per strategy family.

    ``P`` is the model size, ``P_bn`` the batch-norm share FedBN keeps local and
    ``layers`` the number of layers with trainable parameters.
    """
    E, K = rounds, clients
    base = P * E * K * 2
    forms = {
        "fedavg": base,
        "prr": base,
        "ours": base,
        "fedprox": base + K,
        "moon": base + K,
        "fedrs": base + K,
        "fednova": base + K + E * K,
        "elastic": base + K + layers * E * K,
        "fedbn": (P - P_bn) * E * K * 2,
        "dense": P * K,
    }
    try:
        return forms[strategy]
    except KeyError:
        raise ValueError(f"no closed form for strategy {strategy!r}") from None
