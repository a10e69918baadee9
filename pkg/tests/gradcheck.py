"""Central finite differences, used as the independent gradient oracle."""
import numpy as np

STEP = 1e-5


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g


def roundoff_bound(f_value: float, step: float = STEP) -> float:
    """Absolute error central differences can incur from float rounding alone."""
    return 16 * np.finfo(np.float64).eps * max(abs(f_value), 1.0) / step


def rel_error(a: np.ndarray, b: np.ndarray, atol: float = 0.0) -> float:
    """Max elementwise relative error with an absolute floor for near-zero entries.

    Entries that differ by at most ``atol`` count as exact.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not a.size:
        return 0.0
    diff = np.abs(a - b)
    diff = np.where(diff <= atol, 0.0, diff)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(diff / scale))
