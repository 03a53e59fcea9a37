"""Small numerical toolkit: Xavier init, heavy-ball SGD and a finite-difference oracle.

Dense matrices are plain ``numpy.ndarray`` objects in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np


class NumericError(ArithmeticError):
    """Raised when a loss or gradient stops being finite."""


def xavier_init(fan_in: int, fan_out: int, rng_seed: int) -> np.ndarray:
    """Return a ``fan_out x fan_in`` matrix drawn from the Xavier uniform law.

    :param fan_in: number of inputs of the layer (>= 1)
    :param fan_out: number of outputs of the layer (>= 1)
    :param rng_seed: seed; the same seed always gives the same matrix
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan dimensions must be positive, got ({fan_in}, {fan_out})")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


@dataclass
class OptimizerState:
    """Momentum buffers for one parameter group.

    ``learning_rate`` and ``momentum`` are fixed for the lifetime of the state.
    """

    learning_rate: float = 0.01
    momentum: float = 0.95
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def forget(self, key: str) -> None:
        """Drop the buffer of a parameter whose shape changed."""
        self.velocity.pop(key, None)

    def resize_rows(self, key: str, n_rows: int) -> None:
        """Pad (with zeros) or truncate the leading axis of a buffer."""
        v = self.velocity.get(key)
        if v is None or v.shape[0] == n_rows:
            return
        if v.shape[0] > n_rows:
            self.velocity[key] = v[:n_rows].copy()
        else:
            pad = np.zeros((n_rows - v.shape[0],) + v.shape[1:])
            self.velocity[key] = np.concatenate([v, pad], axis=0)


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, state: OptimizerState,
                      key: str = "param") -> np.ndarray:
    """One heavy-ball step, applied to ``param`` in place.

    ``v <- momentum * v + grad``; ``param <- param - lr * v``.
    """
    param_arr = np.asarray(param)
    grad = np.asarray(grad, dtype=float)
    if param_arr.shape != grad.shape:
        raise ValueError(f"shape mismatch for {key}: param {param_arr.shape} vs grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for {key}")
    v = state.velocity.get(key)
    if v is None:
        v = np.zeros_like(grad)
    elif v.shape != grad.shape:
        raise ValueError(f"shape mismatch for {key}: velocity {v.shape} vs grad {grad.shape}")
    v = state.momentum * v + grad
    state.velocity[key] = v
    if isinstance(param, np.ndarray):
        param -= state.learning_rate * v
        return param
    return param_arr - state.learning_rate * v


def finite_diff_gradient(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                         step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    ``loss_fn`` receives a perturbed copy of ``params`` and must return a scalar.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    w = np.array(params, dtype=float)
    grad = np.zeros_like(w)
    flat_w = w.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_w.size):
        orig = flat_w[i]
        flat_w[i] = orig + step
        f_plus = float(loss_fn(w))
        flat_w[i] = orig - step
        f_minus = float(loss_fn(w))
        flat_w[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite loss while probing coordinate {i}")
        flat_g[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, oracle: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error ``||a - o|| / max(||o||, floor)``."""
    a = np.asarray(analytic, dtype=float)
    o = np.asarray(oracle, dtype=float)
    return float(np.linalg.norm(a - o) / max(np.linalg.norm(o), floor))


def sigmoid(x):
    # split on sign so exp never overflows
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)
