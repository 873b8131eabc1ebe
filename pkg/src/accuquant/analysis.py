"""Diagnostics: error-accumulation traces, gradient dominance, Fréchet
discrepancy, and activation-memory instrumentation.

The error recursion treats the quantized sampler's state discrepancy Delta_t
and prediction discrepancy delta_t through the affine one-step map: starting
from Delta_T = 0,

    Delta_{t-1} = c_t * delta_t + d_t * Delta_t.

Because every d_t exceeds one, the accumulated term grows along the sampling
run while the per-step term stays roughly constant.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .calibration import MemoryCounter, accuquant_group_pass, full_gradient_bptt
from .diffusion import NoiseSchedule, rollout, step_coeffs
from .numerics import Rng, finite_diff_jacobian, gaussian_sample


def worker_count() -> int:
    """Parallelism cap: ACCUQUANT_THREADS if set, else hardware concurrency."""
    env = os.environ.get("ACCUQUANT_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError as e:
            raise ValueError(f"ACCUQUANT_THREADS must be an integer, got {env!r}") from e
        if n < 1:
            raise ValueError("ACCUQUANT_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Error accumulation
# ---------------------------------------------------------------------------

@dataclass
class ErrorTrace:
    """Per-step error magnitudes over t = T..1, averaged over trials."""

    steps: np.ndarray
    step_err_mean: np.ndarray
    step_err_std: np.ndarray
    accum_err_mean: np.ndarray
    accum_err_std: np.ndarray
    trials: int
    seed: int


def error_recursion(schedule: NoiseSchedule, deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run the recursion with given per-step prediction errors.

    deltas has shape (T, dim) holding delta_t for t = T..1 in row order.
    Returns (||c_t delta_t||, ||d_t Delta_t||) per row.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape[0] != schedule.T:
        raise ValueError(f"need {schedule.T} delta rows, got {deltas.shape[0]}")
    Delta = np.zeros(deltas.shape[1])
    step_mags = np.zeros(schedule.T)
    accum_mags = np.zeros(schedule.T)
    for i, t in enumerate(range(schedule.T, 0, -1)):
        k = step_coeffs(t, schedule)
        step_term = k.c * deltas[i]
        accum_term = k.d * Delta
        step_mags[i] = np.linalg.norm(step_term)
        accum_mags[i] = np.linalg.norm(accum_term)
        Delta = step_term + accum_term
    return step_mags, accum_mags


def simulate_error_accumulation(schedule: NoiseSchedule, trials: int, rng: Rng,
                                delta_sigma: float = 1.0, dim: int = 16) -> ErrorTrace:
    """Monte-Carlo trace of step vs accumulated error magnitudes.

    Each trial draws i.i.d. delta_t ~ N(0, delta_sigma^2 I_dim) per step from
    its own counter-based substream, so results are reproducible regardless of
    how trials are scheduled across workers.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if delta_sigma <= 0:
        raise ValueError("delta_sigma must be positive")

    def one_trial(i):
        deltas = delta_sigma * gaussian_sample(rng.substream(i), (schedule.T, dim))
        return error_recursion(schedule, deltas)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(one_trial, range(trials)))
    step = np.stack([r[0] for r in results])
    accum = np.stack([r[1] for r in results])
    return ErrorTrace(steps=np.arange(schedule.T, 0, -1),
                      step_err_mean=step.mean(axis=0), step_err_std=step.std(axis=0),
                      accum_err_mean=accum.mean(axis=0), accum_err_std=accum.std(axis=0),
                      trials=trials, seed=rng.seed)


# ---------------------------------------------------------------------------
# Gradient dominance
# ---------------------------------------------------------------------------

@dataclass
class GradDominanceReport:
    """Per probed step: the scalar coefficient d_t, the direction-averaged
    network-Jacobian contribution c_t * u^T J u, and their sum."""

    steps: list[int]
    scalar: list[float]
    jac_mean: list[float]
    jac_std: list[float]
    full_mean: list[float]
    full_std: list[float]
    probes_per_step: int


def measure_grad_dominance(model, probes: list[tuple[np.ndarray, int]],
                           schedule: NoiseSchedule, rng: Rng,
                           params: dict | None = None, n_directions: int = 16,
                           jacobian_mode: str = "auto") -> GradDominanceReport:
    """Compare the two terms of the one-step input-output gradient
    d_t * I + c_t * d eps~/d x at the given probe states.

    The Jacobian is summarized along random unit directions u as c_t * u^T J u,
    so the reported full term is exactly scalar + jacobian per sample.
    jacobian_mode: "exact" (linear tier), "ste" (straight-through chain rule of
    the quantized forward), or "fd" (central differences; only meaningful on
    smooth full-precision forwards).
    """
    from .denoiser import LinearDenoiser, ste_jacobian
    if not probes:
        raise ValueError("probes must be non-empty")
    if jacobian_mode == "auto":
        jacobian_mode = "exact" if isinstance(model, LinearDenoiser) else (
            "ste" if params is not None else "fd")

    by_step: dict[int, tuple[list[float], list[float]]] = {}
    for x, t in probes:
        x = np.asarray(x, dtype=np.float64)
        k = step_coeffs(t, schedule)
        if jacobian_mode == "exact":
            J = model.jacobian(t)
        elif jacobian_mode == "ste":
            if params is None:
                raise ValueError("ste mode needs quantizer params")
            J = ste_jacobian(model, params, x, t)
        elif jacobian_mode == "fd":
            J = finite_diff_jacobian(lambda v: model.predict(v, t), x)
        else:
            raise ValueError(f"unknown jacobian_mode {jacobian_mode!r}")
        if not np.all(np.isfinite(J)):
            raise ValueError(f"non-finite Jacobian at probe t={t}")
        dirs = gaussian_sample(rng, (n_directions, x.shape[0]))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        jac_samples = k.c * np.einsum("nd,dk,nk->n", dirs, J, dirs)
        jac_list, full_list = by_step.setdefault(t, ([], []))
        jac_list.extend(jac_samples.tolist())
        full_list.extend((k.d + jac_samples).tolist())

    report = GradDominanceReport(steps=[], scalar=[], jac_mean=[], jac_std=[],
                                 full_mean=[], full_std=[],
                                 probes_per_step=n_directions)
    for t in sorted(by_step, reverse=True):
        jac, full = np.array(by_step[t][0]), np.array(by_step[t][1])
        report.steps.append(t)
        report.scalar.append(step_coeffs(t, schedule).d)
        report.jac_mean.append(float(jac.mean()))
        report.jac_std.append(float(jac.std()))
        report.full_mean.append(float(full.mean()))
        report.full_std.append(float(full.std()))
    return report


# ---------------------------------------------------------------------------
# Frechet discrepancy
# ---------------------------------------------------------------------------

def _psd_sqrt(mat: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    if np.any(vals < -tol * max(1.0, float(np.abs(vals).max()))):
        raise ValueError("covariance not PSD after symmetrization")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Frechet (2-Wasserstein between Gaussians) distance of two sample sets:

        ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})

    with the product square root evaluated through the symmetric PSD form
    sqrt(S_a)^T S_b sqrt(S_a).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("sample sets must be 2-D with equal dimension")
    d = a.shape[1]
    if a.shape[0] < d + 1 or b.shape[0] < d + 1:
        raise ValueError(f"need at least {d + 1} samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False).reshape(d, d)
    cov_b = np.cov(b, rowvar=False).reshape(d, d)
    root_a = _psd_sqrt(cov_a)
    inner = _psd_sqrt(root_a @ cov_b @ root_a)
    val = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b) - 2.0 * np.trace(inner))
    return max(val, 0.0)


# ---------------------------------------------------------------------------
# Memory instrumentation
# ---------------------------------------------------------------------------

@dataclass
class MemoryReport:
    """Peak retained-activation tensor counts per group size and mode."""

    mode: str
    group_sizes: list[int]
    peak_counts: list[int]


def measure_memory(model, store_factory, schedule: NoiseSchedule,
                   group_sizes: list[int], mode: str, rng: Rng) -> MemoryReport:
    """Peak simultaneously retained activation tensors for one group's pass.

    store_factory(plan) must return an initialized GroupQuantizerStore for the
    given plan; for each M the first group is rolled once in the requested
    gradient mode with an instrumented counter.
    """
    if mode not in ("approx", "exact"):
        raise ValueError(f"unknown mode {mode!r}")
    from .calibration import partition_groups
    peaks = []
    for M in group_sizes:
        plan = partition_groups(schedule.T, M)
        store = store_factory(plan)
        x = gaussian_sample(rng.substream(M), (4, model.dim))
        fp_traj = rollout(model, x, plan.starts[0], plan.sizes[0], schedule)
        counter = MemoryCounter()
        fn = accuquant_group_pass if mode == "approx" else full_gradient_bptt
        fn(fp_traj, model, store, 0, plan, schedule, counter=counter)
        peaks.append(counter.peak)
    return MemoryReport(mode=mode, group_sizes=list(group_sizes), peak_counts=peaks)


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def write_csv(path, header: list[str], rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_json(path, doc: dict):
    doc = {"schema_version": 1, **doc}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def error_trace_rows(trace: ErrorTrace):
    for i, t in enumerate(trace.steps):
        yield (int(t), float(trace.step_err_mean[i]), float(trace.step_err_std[i]),
               float(trace.accum_err_mean[i]), float(trace.accum_err_std[i]))


def grad_dominance_rows(report: GradDominanceReport):
    for i, t in enumerate(report.steps):
        yield (t, float(report.scalar[i]), float(report.jac_mean[i]),
               float(report.jac_std[i]), float(report.full_mean[i]),
               float(report.full_std[i]))
