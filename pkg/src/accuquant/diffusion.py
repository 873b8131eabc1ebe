"""Noise schedules and the deterministic denoising sampler.

The one-step update is kept in its affine form

    x_{t-1} = d_t * x_t + c_t * eps_pred

with d_t = sqrt(alpha_{t-1} / alpha_t) and
c_t = -sqrt(alpha_{t-1}) * sqrt(1 - alpha_t) / sqrt(alpha_t) + sqrt(1 - alpha_{t-1}),

because (c_t, d_t) are exactly the coefficients through which per-step and
accumulated quantization errors propagate. Since d_t > 1 on any strictly
decreasing schedule, state perturbations are amplified at every step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class NoiseSchedule:
    """Cumulative signal-retention coefficients alpha_t, t = 0..T.

    alpha[0] is the least-noisy end; values are strictly decreasing and in
    (0, 1], which makes every amplification factor d_t exceed one.
    """

    T: int
    alpha: np.ndarray
    kind: str = "linear"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.alpha.shape != (self.T + 1,):
            raise ValueError(f"alpha must have length T+1={self.T + 1}, got {self.alpha.shape}")
        if not np.all(self.alpha > 0) or not np.all(self.alpha <= 1.0):
            raise ValueError("alpha values must lie in (0, 1]")
        if not np.all(np.diff(self.alpha) < 0):
            raise ValueError("alpha must be strictly decreasing in t")

    def to_json(self) -> str:
        doc = {"kind": self.kind, "T": self.T, "params": self.params,
               "alpha": self.alpha.tolist()}
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        doc = json.loads(text)
        return cls(T=doc["T"], alpha=np.array(doc["alpha"]), kind=doc["kind"],
                   params=doc.get("params", {}))


def make_schedule(kind: str = "linear", T: int = 100, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    """Build a noise schedule.

    "linear": beta_0..beta_T with beta_0..beta_{T-1} linearly spaced from
    beta_start to beta_end and the final step reusing beta_end, then
    alpha_t = prod_{i<=t} (1 - beta_i). So alpha_0 = 1 - beta_start.

    "cosine": squared-cosine cumulative coefficients with per-step beta
    clipped to keep alpha strictly decreasing.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if kind == "linear":
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        base = np.linspace(beta_start, beta_end, T)
        betas = np.concatenate([base, base[-1:]])
        alpha = np.cumprod(1.0 - betas)
        return NoiseSchedule(T=T, alpha=alpha, kind=kind,
                             params={"beta_start": beta_start, "beta_end": beta_end})
    if kind == "cosine":
        s = 0.008
        grid = (np.arange(T + 1) / T + s) / (1.0 + s) * np.pi / 2.0
        raw = np.cos(grid) ** 2
        ratios = raw[1:] / raw[:-1]
        betas = np.clip(1.0 - ratios, 1e-8, 0.999)
        alpha = np.concatenate([[1.0 - 1e-8], (1.0 - 1e-8) * np.cumprod(1.0 - betas)])
        return NoiseSchedule(T=T, alpha=alpha, kind=kind, params={"s": s})
    raise ValueError(f"unknown schedule kind {kind!r}")


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Noising map: sqrt(alpha_t) * x0 + sqrt(1 - alpha_t) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if not (0 <= t <= schedule.T):
        raise ValueError(f"step {t} out of range 0..{schedule.T}")
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    a = schedule.alpha[t]
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


@dataclass(frozen=True)
class StepCoeffs:
    """Error-propagation coefficients of the one-step denoising map at step t."""

    c: float
    d: float
    t: int


def step_coeffs(t: int, schedule: NoiseSchedule) -> StepCoeffs:
    """(c_t, d_t) for the transition t -> t-1."""
    if not (1 <= t <= schedule.T):
        raise ValueError(f"step {t} out of range 1..{schedule.T}")
    a_prev = schedule.alpha[t - 1]
    a_cur = schedule.alpha[t]
    d = np.sqrt(a_prev / a_cur)
    c = -np.sqrt(a_prev) * np.sqrt(1.0 - a_cur) / np.sqrt(a_cur) + np.sqrt(1.0 - a_prev)
    return StepCoeffs(c=float(c), d=float(d), t=t)


def ddim_step(x_t: np.ndarray, eps_pred: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic denoising step t -> t-1 in the affine (c_t, d_t) form."""
    if t == 0:
        raise ValueError("no step below 0")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if x_t.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: x {x_t.shape} vs eps_pred {eps_pred.shape}")
    k = step_coeffs(t, schedule)
    return k.d * x_t + k.c * eps_pred


@dataclass
class Trajectory:
    """States and predicted noises of one denoising run, most-noisy end first.

    steps[i] is the index of states[i]; steps decrease by one per entry.
    eps_preds[i] is the prediction used on the transition steps[i] -> steps[i]-1.
    """

    steps: list[int]
    states: list[np.ndarray]
    eps_preds: list[np.ndarray]

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def start_state(self) -> np.ndarray:
        return self.states[0]


def rollout(model, x_start: np.ndarray, t_start: int, n_steps: int,
            schedule: NoiseSchedule) -> Trajectory:
    """Apply the denoising step n_steps times, recording every intermediate.

    `model` is anything with predict(x, t) -> eps of the same shape as x;
    x_start may be a single state (d,) or a batch (n, d).
    """
    if n_steps > t_start:
        raise ValueError(f"cannot take {n_steps} steps from t={t_start}")
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    x = np.asarray(x_start, dtype=np.float64)
    steps = [t_start]
    states = [x]
    eps_preds = []
    for i in range(n_steps):
        t = t_start - i
        eps = model.predict(x, t)
        x = ddim_step(x, eps, t, schedule)
        eps_preds.append(eps)
        steps.append(t - 1)
        states.append(x)
    return Trajectory(steps=steps, states=states, eps_preds=eps_preds)
