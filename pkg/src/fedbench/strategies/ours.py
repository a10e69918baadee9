"""Per-client diffusion augmentation with smoothed synthetic labels, then FedAvg."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from ..diffusion import (
    DDPM,
    DDPMConfig,
    DiffusionSchedule,
    augment_partition,
    ddpm_epochs,
    load_ddpm,
    save_ddpm,
    train_ddpm,
)
from ..errors import ConfigError
from ..rng import derive_seed
from .base import Strategy


class Ours(Strategy):
    name = "ours"

    @dataclass(frozen=True)
    class Hyper:
        augment: bool = True
        smoothing_alpha: float = 0.1
        target_count: int = 0  # 0 means the largest client's size
        ddpm_epochs: int = 0  # 0 means the epoch rule capped at ddpm_max_epochs
        ddpm_max_epochs: int = 2000
        ddpm_batch: int = 64
        ddpm_hidden: int = 128
        timesteps: int = 200
        ddpm_cache: str = ""

    def __init__(self, **hyper):
        super().__init__(**hyper)
        hp = self.hp
        if not 0.0 <= hp.smoothing_alpha < 1.0:
            raise ConfigError("ours.smoothing_alpha must lie in [0, 1)")
        if hp.target_count < 0 or hp.ddpm_epochs < 0 or hp.ddpm_max_epochs < 1:
            raise ConfigError("ours: counts must be non-negative")
        self.ddpms: dict[int, DDPM] = {}
        self.epochs_used: dict[int, dict] = {}

    def _epochs(self, data) -> tuple[int, int]:
        raw = ddpm_epochs(data.class_count, len(data), None)
        if self.hp.ddpm_epochs:
            return self.hp.ddpm_epochs, raw
        return min(raw, self.hp.ddpm_max_epochs), raw

    def client_ddpm(self, ctx, k: int) -> DDPM:
        if k in self.ddpms:
            return self.ddpms[k]
        data = ctx.clients[k]
        epochs, raw = self._epochs(data)
        self.epochs_used[k] = {"epochs": epochs, "epoch_rule": raw}
        seed = derive_seed(ctx.fed.seed, "ddpm", k)
        cache = Path(self.hp.ddpm_cache) / f"client{k}_seed{seed}_e{epochs}.ddpm" if self.hp.ddpm_cache else None
        if cache is not None and cache.exists():
            model = load_ddpm(cache)
        else:
            config = DDPMConfig(epochs=epochs, batch_size=self.hp.ddpm_batch, hidden=self.hp.ddpm_hidden)
            model = train_ddpm(data, DiffusionSchedule(T=self.hp.timesteps), config, seed)
            if cache is not None:
                cache.parent.mkdir(parents=True, exist_ok=True)
                save_ddpm(model, cache)
        self.ddpms[k] = model
        return model

    def prepare_clients(self, ctx):
        clients = list(ctx.clients)
        if not self.hp.augment:
            return clients
        target = self.hp.target_count or max(len(c) for c in clients)
        if target < max(len(c) for c in clients):
            raise ConfigError(f"ours.target_count {target} is below the largest client")
        out = []
        for k, client in enumerate(clients):
            ddpm = self.client_ddpm(ctx, k) if len(client) < target else None
            out.append(augment_partition(client, ddpm, target, self.hp.smoothing_alpha,
                                         derive_seed(ctx.fed.seed, "augment", k)))
        if self.epochs_used:
            self.notes.append(f"ours: diffusion epochs per client {self.epochs_used}")
        return out
