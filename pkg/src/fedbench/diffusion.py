"""Conditional denoising diffusion at desk scale, label smoothing and client augmentation.

The noise network is a small MLP on flattened pixels; time enters through a
sinusoidal embedding and the class through a one-hot vector feeding the first
dense layer (equivalent to a learned label embedding).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, Provenance
from .engine import AdamHyper, AdamState, ModelState, activation, adam_step, backward, dense, forward, mse_with_grad
from .errors import ConfigError, TrainingError
from .rng import stream

DDPM_MAGIC = b"DDPM1"


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule with cached alpha-bar."""

    T: int = 200
    beta_1: float = 1e-4
    beta_T: float = 0.05
    beta: np.ndarray = field(init=False, repr=False, compare=False)
    alpha: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("schedule needs T >= 1")
        if not 0.0 < self.beta_1 <= self.beta_T < 1.0:
            raise ConfigError("schedule needs 0 < beta_1 <= beta_T < 1")
        beta = np.linspace(self.beta_1, self.beta_T, self.T)
        alpha = 1.0 - beta
        # unit variance is preserved by every step: (1 - beta) + beta == 1
        assert np.allclose(alpha + beta, 1.0)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", np.cumprod(alpha))

    def beta_at(self, t: int) -> float:
        """beta_t for 1-based t."""
        return float(self.beta[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def _check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ConfigError(f"time step must lie in [1, {self.T}]")


def forward_noise_step(x_prev: np.ndarray, beta_t: float, eps: np.ndarray) -> np.ndarray:
    """One noising step: sqrt(1 - beta) * x + sqrt(beta) * eps."""
    if not 0.0 < beta_t < 1.0:
        raise ConfigError(f"beta must lie in (0, 1), got {beta_t}")
    return math.sqrt(1.0 - beta_t) * np.asarray(x_prev) + math.sqrt(beta_t) * np.asarray(eps)


def forward_noise_closed(x0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Marginal x_t given x0.  ``t`` may be a scalar or one step per sample."""
    schedule._check_t(t)
    ab = schedule.alpha_bar[np.asarray(t) - 1]
    x0 = np.asarray(x0, dtype=np.float64)
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)


def ddpm_epochs(num_classes: int, num_samples: int, max_epochs: int | None = 2000) -> int:
    """round(1e6 * K / N), optionally capped."""
    if num_samples < 1:
        raise ConfigError("ddpm_epochs needs at least one sample")
    epochs = max(1, int(round(1e6 * num_classes / num_samples)))
    return epochs if max_epochs is None else min(epochs, max_epochs)


def smooth_labels(y, alpha: float, num_classes: int | None = None) -> np.ndarray:
    """(1 - alpha) * y + alpha / K, with alpha strictly inside (0, 1)."""
    y = np.asarray(y, dtype=np.float64)
    k = y.shape[-1] if num_classes is None else num_classes
    if y.shape[-1] != k:
        raise ConfigError(f"label vector length {y.shape[-1]} != class count {k}")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"smoothing alpha must lie in (0, 1), got {alpha}")
    # same as (1 - alpha) * y + alpha / K, but exact for the fixture values
    return y + alpha * (1.0 / k - y)


# -- noise network ------------------------------------------------------------

def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def build_noise_net(data_dim: int, num_classes: int, rng: np.random.Generator,
                    hidden: int = 128, t_dim: int = 16) -> ModelState:
    layers = [
        dense("n1", data_dim + t_dim + num_classes, hidden, rng),
        activation("n_act1", "silu"),
        dense("n2", hidden, hidden, rng),
        activation("n_act2", "silu"),
        dense("n_out", hidden, data_dim, rng, gain=1.0),
    ]
    return ModelState(layers, (data_dim + t_dim + num_classes,), rep_layer="n_act2")


@dataclass(frozen=True)
class DDPMConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    ema_decay: float = 0.995
    hidden: int = 128
    t_dim: int = 16

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("ddpm epochs and batch_size must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.t_dim < 2 or self.t_dim % 2:
            raise ConfigError("t_dim must be an even number >= 2")


@dataclass
class DDPM:
    net: ModelState
    ema: ModelState
    schedule: DiffusionSchedule
    num_classes: int
    image_shape: tuple[int, ...]
    config: DDPMConfig = field(default_factory=DDPMConfig)
    loss_history: list[float] = field(default_factory=list)

    @property
    def data_dim(self) -> int:
        return int(np.prod(self.image_shape))

    def net_input(self, x_flat: np.ndarray, t: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [x_flat, time_embedding(t, self.config.t_dim), np.eye(self.num_classes)[labels]], axis=1
        )

    def predict_noise(self, x_flat, t, labels, use_ema: bool = True) -> np.ndarray:
        net = self.ema if use_ema else self.net
        return forward(net, self.net_input(x_flat, t, labels), "eval").logits

    def denoising_loss(self, x0_flat, labels, rng, use_ema: bool = False) -> float:
        """Noise-prediction MSE at uniformly drawn t (no parameter update)."""
        t = rng.integers(1, self.schedule.T + 1, size=len(x0_flat))
        eps = rng.standard_normal(x0_flat.shape)
        xt = forward_noise_closed(x0_flat, t, eps, self.schedule)
        return mse_with_grad(self.predict_noise(xt, t, labels, use_ema), eps)[0]


def new_ddpm(num_classes: int, image_shape, schedule: DiffusionSchedule, config: DDPMConfig, seed: int) -> DDPM:
    dim = int(np.prod(image_shape))
    net = build_noise_net(dim, num_classes, stream(seed, "ddpm", "init"), config.hidden, config.t_dim)
    return DDPM(net, net.copy(), schedule, num_classes, tuple(image_shape), config)


def train_ddpm(dataset: Dataset, schedule: DiffusionSchedule, config: DDPMConfig, seed: int) -> DDPM:
    """Minimise the noise-prediction MSE; the EMA shadow is updated after every step."""
    if len(dataset) == 0:
        raise ConfigError("cannot train a diffusion model on an empty dataset")
    model = new_ddpm(dataset.class_count, dataset.image_shape, schedule, config, seed)
    x0 = dataset.images.reshape(len(dataset), -1).astype(np.float64)
    labels = dataset.labels
    hyper = AdamHyper(lr=config.lr, weight_decay=0.0)
    opt = AdamState()
    d = config.ema_decay
    names = model.net.trainable_names()
    step = 0
    for epoch in range(config.epochs):
        rng = stream(seed, "ddpm", "epoch", epoch)
        perm = rng.permutation(len(dataset))
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i:i + config.batch_size]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.standard_normal((len(idx), x0.shape[1]))
            xt = forward_noise_closed(x0[idx], t, eps, schedule)
            trace = forward(model.net, model.net_input(xt, t, labels[idx]), "train")
            loss, grad = mse_with_grad(trace.logits, eps)
            if not np.isfinite(loss):
                raise TrainingError(f"diffusion training diverged at step {step} (loss {loss})")
            adam_step(model.net, backward(model.net, trace, grad), opt, hyper)
            for name in names:
                model.ema.set(name, d * model.ema.get(name) + (1.0 - d) * model.net.get(name))
            model.loss_history.append(loss)
            step += 1
    return model


def sample(ddpm: DDPM, label: int, count: int, seed: int, clip: bool = True) -> np.ndarray:
    """Ancestral sampling with the EMA network; returns [count, *image_shape]."""
    if not 0 <= label < ddpm.num_classes:
        raise ConfigError(f"label {label} outside [0, {ddpm.num_classes})")
    shape = (count,) + ddpm.image_shape
    if count == 0:
        return np.zeros(shape)
    sch = ddpm.schedule
    rng = stream(seed, "ddpm-sample", label)
    x = rng.standard_normal((count, ddpm.data_dim))
    labels = np.full(count, label)
    for t in range(sch.T, 0, -1):
        beta, ab = sch.beta[t - 1], sch.alpha_bar[t - 1]
        eps_hat = ddpm.predict_noise(x, np.full(count, t), labels)
        x = (x - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - beta)
        if t > 1:
            x = x + math.sqrt(beta) * rng.standard_normal(x.shape)
    if clip:
        x = np.clip(x, -1.0, 1.0)
    return x.reshape(shape)


def augment_partition(client: Dataset, ddpm: DDPM | None, target_count: int, alpha: float, seed: int) -> Dataset:
    """Top ``client`` up to ``target_count`` samples with labelled DDPM output.

    Synthetic labels cycle over the client's present classes; they carry
    smoothed targets when ``alpha > 0``, real samples keep one-hot targets.
    """
    n = len(client)
    if target_count < n:
        raise ConfigError(f"target_count {target_count} is below the client's {n} samples")
    if target_count == n:
        return client
    if ddpm is None:
        raise ConfigError("augmentation requested without a diffusion model")
    present = np.flatnonzero(client.class_present())
    if present.size == 0:
        raise ConfigError("cannot augment a client with no samples")
    extra = target_count - n
    labels = present[np.arange(extra) % present.size]
    images = np.zeros((extra,) + client.image_shape)
    for c in present:
        rows = np.flatnonzero(labels == c)
        out = sample(ddpm, int(c), len(rows), seed)
        if len(out) != len(rows):
            raise TrainingError(f"diffusion model produced {len(out)} of {len(rows)} samples for class {c}")
        images[rows] = out
    onehot = np.eye(client.class_count)[labels]
    soft = smooth_labels(onehot, alpha, client.class_count) if alpha > 0 else onehot
    synthetic = Dataset(images, labels, client.class_count,
                        np.full(extra, Provenance.SYNTHETIC, dtype=np.uint8), soft)
    real = Dataset(client.images, client.labels, client.class_count, client.provenance, client.targets())
    return Dataset.concat([real, synthetic])


# -- DDPM1 checkpoint ------------------------------------------------------------

def save_ddpm(ddpm: DDPM, path) -> None:
    """magic, uint32 header length, JSON header, then float64 LE net and EMA parameters."""
    names = ddpm.net.trainable_names()
    header = {
        "schedule": {"T": ddpm.schedule.T, "beta_1": ddpm.schedule.beta_1, "beta_T": ddpm.schedule.beta_T},
        "config": asdict(ddpm.config),
        "num_classes": ddpm.num_classes,
        "image_shape": list(ddpm.image_shape),
        "schema": [[n, list(ddpm.net.get(n).shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(m.get(n), dtype="<f8").tobytes() for m in (ddpm.net, ddpm.ema) for n in names)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(DDPM_MAGIC + struct.pack("<I", len(blob)) + blob + body)
    tmp.replace(path)


def load_ddpm(path) -> DDPM:
    raw = Path(path).read_bytes()
    if raw[:5] != DDPM_MAGIC:
        raise ConfigError(f"{path}: not a DDPM1 checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 5)
    header = json.loads(raw[9:9 + hlen])
    sch = DiffusionSchedule(**header["schedule"])
    cfg = DDPMConfig(**header["config"])
    model = new_ddpm(header["num_classes"], tuple(header["image_shape"]), sch, cfg, 0)
    schema = [(n, tuple(s)) for n, s in header["schema"]]
    if schema != [(n, model.net.get(n).shape) for n in model.net.trainable_names()]:
        raise ConfigError(f"{path}: checkpoint schema does not match the noise network")
    offset = 9 + hlen
    for m in (model.net, model.ema):
        for name, shape in schema:
            size = int(np.prod(shape))
            m.set(name, np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape).copy())
            offset += 8 * size
    return model
