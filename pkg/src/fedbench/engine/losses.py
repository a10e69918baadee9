"""Loss terms used by the local objectives.

Each ``*_with_grad`` function returns ``(value, gradient)``; the plain
``loss_*`` functions return the value only.
"""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DegenerateInputError, SchemaError
from .model import ModelState, Role


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_pair(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def ce_soft_with_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    _check_pair(logits, labels, "cross-entropy")
    n = logits.shape[0]
    logp = log_softmax(logits)
    # 0 * log(0) contributes nothing (restricted softmax produces -inf entries)
    terms = np.where(labels > 0, labels * logp, 0.0)
    value = -terms.sum() / n
    grad = (np.exp(logp) * labels.sum(axis=1, keepdims=True) - labels) / n
    return float(value), grad


def loss_ce_soft(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy between label distributions and softmax(logits)."""
    return ce_soft_with_grad(logits, labels)[0]


def prox_with_grad(params: ModelState, anchor: ModelState, mu: float) -> tuple[float, dict]:
    if mu < 0:
        raise ConfigError(f"mu must be >= 0, got {mu}")
    names = params.names({Role.TRAINABLE})
    if names != anchor.names({Role.TRAINABLE}):
        raise SchemaError("proximal term: parameter schemas differ")
    value = 0.0
    grads = {}
    for name in names:
        a, b = params.get(name), anchor.get(name)
        if a.shape != b.shape:
            raise SchemaError(f"proximal term: {name} shape {a.shape} vs {b.shape}")
        diff = a - b
        value += float(np.dot(diff.ravel(), diff.ravel()))
        grads[name] = 2.0 * mu * diff
    return mu * value, grads


def loss_prox(params: ModelState, anchor: ModelState, mu: float) -> float:
    """mu * ||w - w_anchor||^2 over trainable parameters (no 1/2 factor)."""
    return prox_with_grad(params, anchor, mu)[0]


def _cosine_with_grad(z: np.ndarray, y: np.ndarray):
    nz = np.linalg.norm(z, axis=1)
    ny = np.linalg.norm(y, axis=1)
    if np.any(nz == 0) or np.any(ny == 0):
        raise DegenerateInputError("cosine similarity of a zero-norm representation")
    dot = (z * y).sum(axis=1)
    cos = dot / (nz * ny)
    dcos = y / (nz * ny)[:, None] - (cos / nz**2)[:, None] * z
    return cos, dcos


def contrastive_with_grad(z, z_glob, z_prev, tau: float, mu: float) -> tuple[float, np.ndarray]:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    z_glob = np.atleast_2d(np.asarray(z_glob, dtype=np.float64))
    z_prev = np.atleast_2d(np.asarray(z_prev, dtype=np.float64))
    _check_pair(z, z_glob, "contrastive loss")
    _check_pair(z, z_prev, "contrastive loss")
    if tau <= 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    n = z.shape[0]
    cos_g, dcos_g = _cosine_with_grad(z, z_glob)
    cos_p, dcos_p = _cosine_with_grad(z, z_prev)
    d = (cos_p - cos_g) / tau
    # -log(e^a / (e^a + e^b)) == softplus(b - a)
    per_sample = np.logaddexp(0.0, d)
    s = 0.5 * (1.0 + np.tanh(0.5 * d))
    grad = (mu / n) * (s / tau)[:, None] * (dcos_p - dcos_g)
    return float(mu * per_sample.mean()), grad


def loss_contrastive(z, z_glob, z_prev, tau: float, mu: float) -> float:
    """Model-contrastive loss, batch mean, scaled by ``mu``."""
    return contrastive_with_grad(z, z_glob, z_prev, tau, mu)[0]


def restricted_log_weights(class_present, alpha: float) -> np.ndarray:
    """log s_i with s_i = 1 for present classes and ``alpha`` otherwise."""
    present = np.asarray(class_present, dtype=bool)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if not present.any():
        raise DegenerateInputError("client holds no classes; it must not train")
    with np.errstate(divide="ignore"):
        return np.where(present, 0.0, np.log(alpha))


def restricted_softmax(logits, class_present, alpha: float) -> np.ndarray:
    """softmax with absent-class exponentials scaled by ``alpha``."""
    return softmax(np.asarray(logits, dtype=np.float64) + restricted_log_weights(class_present, alpha))


def kd_with_grad(student_logits, teacher_logits, temperature: float = 1.0) -> tuple[float, np.ndarray]:
    s = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    _check_pair(s, t, "distillation loss")
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    n = s.shape[0]
    log_ps = log_softmax(s / temperature)
    log_pt = log_softmax(t / temperature)
    pt = np.exp(log_pt)
    value = (pt * (log_pt - log_ps)).sum() / n
    grad = (np.exp(log_ps) - pt) / (temperature * n)
    return float(max(value, 0.0)), grad


def loss_kd(student_logits, teacher_logits, temperature: float = 1.0) -> float:
    """KL(teacher || student) of temperature-softened distributions, batch mean."""
    return kd_with_grad(student_logits, teacher_logits, temperature)[0]


def mse_with_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    _check_pair(pred, target, "mean squared error")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size
