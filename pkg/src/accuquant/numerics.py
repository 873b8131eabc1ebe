"""Low-level numerics: deterministic RNG, Adam, and finite-difference oracles.

Everything here works on plain float64 numpy arrays. Gradients used elsewhere
in the package are hand-derived; the central-difference helpers in this module
are the independent oracle they are checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class Rng:
    """Counter-based random stream keyed by (seed, stream).

    Built on Philox, so two Rng objects with the same key produce bit-identical
    output streams, and `substream(i)` yields statistically independent streams
    without any shared mutable state between them.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)
        key = (self.seed << 64) | (self.stream & 0xFFFFFFFFFFFFFFFF)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def substream(self, index: int) -> "Rng":
        """Independent stream derived from (seed, index); self is untouched."""
        return Rng(self.seed, self.stream * 1_000_003 + 1 + int(index))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def gaussian_sample(rng: Rng, shape: Sequence[int]) -> np.ndarray:
    """Draw i.i.d. standard-normal float64 samples, advancing the stream."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError("empty shape")
    return rng.generator.standard_normal(size=shape, dtype=np.float64)


@dataclass
class AdamState:
    """First/second moment estimates plus hyperparameters for one parameter vector."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new params and advanced state."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if state.m.shape != params.shape:
        raise ValueError("Adam moment shape does not match parameter shape")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                          eps=state.eps, step=t, m=m, v=v)
    return new_params, new_state


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + eps
        f_plus = float(f(probe.reshape(x.shape)))
        probe[i] = flat[i] - eps
        f_minus = float(f(probe.reshape(x.shape)))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(x.shape)


def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector function, shape (out_dim, in_dim)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    cols = []
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + eps
        f_plus = np.asarray(f(probe.reshape(x.shape)), dtype=np.float64)
        probe[i] = flat[i] - eps
        f_minus = np.asarray(f(probe.reshape(x.shape)), dtype=np.float64)
        if not (np.all(np.isfinite(f_plus)) and np.all(np.isfinite(f_minus))):
            raise ValueError(f"non-finite function value at coordinate {i}")
        cols.append((f_plus.ravel() - f_minus.ravel()) / (2.0 * eps))
    return np.stack(cols, axis=1)
