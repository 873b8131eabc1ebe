"""Group-wise calibration of activation quantizer step sizes.

The calibration objective aligns the outputs of the full-precision and
quantized samplers over a whole group of M consecutive denoising steps, so the
optimized step sizes account for error accumulated across steps rather than
single-step discrepancies.

Two gradient paths are provided:

* `accuquant_group_pass` - the O(1)-memory path. A stop-gradient cache of the
  quantized sub-trajectory is rolled first; each step is then recomputed in
  isolation and its contribution scaled by the schedule ratio
  g_m = sqrt(alpha_{t-M} / alpha_{t-m}), which is what the cross-step Jacobian
  chain collapses to when the network-Jacobian term of the one-step gradient
  is dropped.
* `full_gradient_bptt` - the exact chain rule through all M steps, retaining
  O(M) per-step activations. Per-step Jacobians are closed-form for the linear
  model and finite-differenced for the MLP (2*d extra forwards per step; cheap
  at toy dimensions, prohibitive beyond).

A per-step baseline (each step calibrated on error-free inputs, M = 1) stands
in for single-step calibration methods.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, Trajectory, rollout, step_coeffs
from .denoiser import QuantizedModel, quantized_predict
from .numerics import AdamState, Rng, adam_step, finite_diff_jacobian, gaussian_sample
from .quantizer import GroupQuantizerStore, SiteKind, minmax_init

S_FLOOR = 1e-8


@dataclass(frozen=True)
class GroupPlan:
    """Contiguous partition of steps T..1 into groups of size M (last may be short).

    Group l (0-based) starts at step T - M*l and covers `sizes[l]` steps
    downward; groups are disjoint and cover every step.
    """

    T: int
    M: int
    starts: tuple[int, ...]
    sizes: tuple[int, ...]

    @property
    def n_groups(self) -> int:
        return len(self.starts)

    def group_steps(self, l: int) -> list[int]:
        return list(range(self.starts[l], self.starts[l] - self.sizes[l], -1))


def partition_groups(T: int, M: int) -> GroupPlan:
    """Split T steps into ceil(T/M) groups; the remainder group is the last."""
    if not (1 <= M <= T):
        raise ValueError(f"group size {M} outside 1..{T}")
    starts, sizes = [], []
    t = T
    while t > 0:
        size = min(M, t)
        starts.append(t)
        sizes.append(size)
        t -= size
    return GroupPlan(T=T, M=M, starts=tuple(starts), sizes=tuple(sizes))


def g_factor(t: int, m: int, M: int, schedule: NoiseSchedule) -> float:
    """Gradient scale sqrt(alpha_{t-M} / alpha_{t-m}) for the m-th step of a
    group starting at t; exactly 1 for m = M."""
    if not (1 <= m <= M):
        raise ValueError(f"inner index {m} outside 1..{M}")
    if not (M <= t <= schedule.T):
        raise ValueError(f"group start {t} incompatible with M={M}, T={schedule.T}")
    if m == M:
        return 1.0
    return float(np.sqrt(schedule.alpha[t - M] / schedule.alpha[t - m]))


def endpoint_mse(fp_endpoint: np.ndarray, q_endpoint: np.ndarray) -> float:
    """Squared L2 distance summed over state dims, averaged over the batch."""
    a = np.asarray(fp_endpoint, dtype=np.float64)
    b = np.asarray(q_endpoint, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    if diff.ndim == 1:
        return float(np.sum(diff**2))
    return float(np.mean(np.sum(diff**2, axis=1)))


class MemoryCounter:
    """Tracks simultaneously retained activation tensors; reports the peak."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def alloc(self, n: int):
        self.current += n
        self.peak = max(self.peak, self.current)

    def free(self, n: int):
        self.current -= n


def _check_group_traj(fp_traj: Trajectory, plan_start: int, size: int):
    if fp_traj.steps[0] != plan_start or len(fp_traj.steps) < size + 1:
        raise ValueError(
            f"trajectory (start {fp_traj.steps[0]}, {len(fp_traj.steps) - 1} steps) "
            f"does not cover group start {plan_start} size {size}")


def _quantized_cache(model, params, x_start, t_start, size, schedule) -> list[np.ndarray]:
    """No-grad quantized sub-trajectory from the group-start state (stop-gradient cache)."""
    qm = QuantizedModel(model, params)
    return rollout(qm, x_start, t_start, size, schedule).states


def accuquant_group_pass(fp_traj: Trajectory, model, store: GroupQuantizerStore,
                         group: int, plan: GroupPlan, schedule: NoiseSchedule,
                         counter: MemoryCounter | None = None):
    """Surrogate loss and its step-size gradients for one group; O(1) memory in M.

    Returns (loss, grads) with grads a site_id -> float map. The loss is
    sum_m g_m * ||x~_{t-M} - x_{t-M}||^2 (batch-averaged) and the gradient of
    each summand flows through the m-th recomputed step only:

        grad = sum_m g_m * 2 (x~_{t-M} - x_{t-M})^T  d x~_{t-m} / d s

    which is the gradient the multi-step chain rule yields once every
    cross-step Jacobian is approximated by its schedule-ratio scalar.
    """
    t_start = plan.starts[group]
    size = plan.sizes[group]
    _check_group_traj(fp_traj, t_start, size)
    params = store.group_params(group)
    cache = _quantized_cache(model, params, fp_traj.start_state, t_start, size, schedule)
    fp_end = np.asarray(fp_traj.states[size], dtype=np.float64)
    resid = cache[size] - fp_end  # value of the stop-gradient surrogate residual
    batched = resid.ndim == 2
    n = resid.shape[0] if batched else 1
    sq = float(np.sum(resid**2)) / n

    loss = 0.0
    grads = {site.id: 0.0 for site in store.sites}
    for m in range(1, size + 1):
        g_m = g_factor(t_start, m, size, schedule)
        t_m = t_start - m + 1
        rec = quantized_predict(model, params, cache[m - 1], t_m)
        if counter is not None:
            counter.alloc(rec.activations_stored)
        c_m = step_coeffs(t_m, schedule).c
        for sid, deps_ds in rec.ds_grads.items():
            # d x~_{t-m} / d s = c_{t-m+1} * d eps~ / d s through the single step
            grads[sid] += g_m * 2.0 * float(np.sum(resid * (c_m * deps_ds))) / n
        if counter is not None:
            counter.free(rec.activations_stored)
        loss += g_m * sq
    return loss, grads


def full_gradient_bptt(fp_traj: Trajectory, model, store: GroupQuantizerStore,
                       group: int, plan: GroupPlan, schedule: NoiseSchedule,
                       counter: MemoryCounter | None = None,
                       fd_eps: float = 1e-6):
    """Endpoint MSE and its exact gradient via the full M-step chain rule.

    All M per-step records stay retained until the backward sweep finishes,
    so peak activation memory grows linearly with the group size.
    """
    t_start = plan.starts[group]
    size = plan.sizes[group]
    _check_group_traj(fp_traj, t_start, size)
    params = store.group_params(group)
    cache = _quantized_cache(model, params, fp_traj.start_state, t_start, size, schedule)
    fp_end = np.asarray(fp_traj.states[size], dtype=np.float64)
    resid = cache[size] - fp_end
    batched = resid.ndim == 2
    n = resid.shape[0] if batched else 1
    loss = float(np.sum(resid**2)) / n

    records = []
    jacobians = []
    for m in range(1, size + 1):
        t_m = t_start - m + 1
        rec = quantized_predict(model, params, cache[m - 1], t_m)
        if counter is not None:
            counter.alloc(rec.activations_stored)
        records.append(rec)
        jacobians.append(_step_jacobian(model, params, cache[m - 1], t_m, fd_eps))

    grads = {site.id: 0.0 for site in store.sites}
    # Backward sweep: row holds dL/dx~_{t-m} for the m currently visited.
    row = 2.0 * resid / n
    for m in range(size, 0, -1):
        t_m = t_start - m + 1
        k = step_coeffs(t_m, schedule)
        rec = records[m - 1]
        for sid, deps_ds in rec.ds_grads.items():
            grads[sid] += float(np.sum(row * (k.c * deps_ds)))
        J = jacobians[m - 1]
        if J.ndim == 3:  # per-sample Jacobians (batched MLP)
            row = k.d * row + k.c * np.einsum("nd,ndk->nk", row, J)
        else:
            row = k.d * row + k.c * (row @ J)
    for rec in records:
        if counter is not None:
            counter.free(rec.activations_stored)
    return loss, grads


def _step_jacobian(model, params, x, t, fd_eps):
    """d eps~ / d x for the exact-gradient path: shape (d, d), or (n, d, d) when
    the state is batched and Jacobians vary per sample."""
    from .denoiser import LinearDenoiser
    if isinstance(model, LinearDenoiser):
        from .quantizer import fake_quant
        W, _ = model._wt(t)
        return fake_quant(W, params["weight"])[0]
    # Finite differences on the quantized forward: O(dim) extra passes per step.
    x = np.asarray(x, dtype=np.float64)
    qm = QuantizedModel(model, params)
    if x.ndim == 1:
        return finite_diff_jacobian(lambda v: qm.predict(v, t), x, eps=fd_eps)
    return np.stack([finite_diff_jacobian(lambda v: qm.predict(v, t), xi, eps=fd_eps)
                     for xi in x])


@dataclass
class CalibrationConfig:
    """Hyperparameters of a full calibration run."""

    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 8
    samples_per_group: int = 64
    seed: int = 0
    mode: str = "approx"  # approx | exact-bptt | per-step-baseline
    optimize_weight_sites: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.samples_per_group < self.batch_size:
            raise ValueError("samples_per_group must be >= batch_size")
        if self.mode not in ("approx", "exact-bptt", "per-step-baseline"):
            raise ValueError(f"unknown gradient mode {self.mode!r}")


@dataclass
class CalibrationReport:
    """Everything a calibration run produced, per group."""

    loss_traces: list[list[float]] = field(default_factory=list)
    endpoint_mses: list[float] = field(default_factory=list)
    peak_memory: list[int] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    store: GroupQuantizerStore | None = None

    def to_doc(self) -> dict:
        """Deterministic JSON payload; wall-clock timings are reported separately."""
        return {"schema_version": 1,
                "loss_traces": self.loss_traces,
                "endpoint_mses": self.endpoint_mses,
                "peak_memory": self.peak_memory}


def initialize_store(model, schedule: NoiseSchedule, plan: GroupPlan,
                     x_start: np.ndarray, bits_weight: int, bits_activation: int
                     ) -> GroupQuantizerStore:
    """Min-max quantizer initialization from full-precision rollout statistics.

    Weight sites see the weight tensors themselves; activation sites see the
    values observed at that site over the group's steps and the whole batch.
    """
    store = GroupQuantizerStore(sites=model.sites(), n_groups=plan.n_groups)
    for site in store.weight_sites():
        vals = model.site_values(np.atleast_2d(np.asarray(x_start))[0:1], schedule.T)[site.id]
        store.set_params(site.id, minmax_init(vals, bits_weight))
    act_sites = store.activation_sites()
    if act_sites:
        x = np.asarray(x_start, dtype=np.float64)
        for l in range(plan.n_groups):
            observed = {s.id: [] for s in act_sites}
            for t in plan.group_steps(l):
                vals = model.site_values(x, t)
                for s in act_sites:
                    observed[s.id].append(np.asarray(vals[s.id]).ravel())
                x = rollout(model, x, t, 1, schedule).final_state
            for s in act_sites:
                store.set_params(s.id, minmax_init(np.concatenate(observed[s.id]),
                                                   bits_activation), group=l)
    return store


def _group_objective(mode):
    return accuquant_group_pass if mode in ("approx", "per-step-baseline") else full_gradient_bptt


def calibrate_group(fp_traj: Trajectory, model, store: GroupQuantizerStore,
                    group: int, plan: GroupPlan, schedule: NoiseSchedule,
                    config: CalibrationConfig,
                    counter: MemoryCounter | None = None) -> list[float]:
    """Adam over the group's step sizes; returns the per-epoch mean loss trace.

    The stop-gradient cache is re-rolled at the current step sizes for every
    minibatch of every epoch. Step sizes are floored at 1e-8 after each update.
    """
    objective = _group_objective(config.mode)
    site_ids = [s.id for s in store.trainable_sites(config.optimize_weight_sites)]
    if not site_ids:
        return []
    batch = np.asarray(fp_traj.start_state, dtype=np.float64)
    if batch.ndim != 2:
        raise ValueError("calibrate_group expects a batched trajectory")
    n = batch.shape[0]
    size = plan.sizes[group]
    state = AdamState(lr=config.lr)
    s_vec = store.get_step_sizes(group, site_ids)
    trace = []
    for epoch in range(config.epochs):
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = slice(start, min(start + config.batch_size, n))
            sub = Trajectory(steps=fp_traj.steps[: size + 1],
                             states=[st[idx] for st in fp_traj.states[: size + 1]],
                             eps_preds=[])
            loss, grads = objective(sub, model, store, group, plan, schedule,
                                    counter=counter)
            if not np.isfinite(loss):
                raise FloatingPointError(f"calibration loss became non-finite at epoch {epoch}")
            g_vec = np.array([grads[sid] for sid in site_ids])
            s_vec, state = adam_step(s_vec, g_vec, state)
            s_vec = np.maximum(s_vec, S_FLOOR)
            store.set_step_sizes(group, site_ids, s_vec)
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
    return trace


def calibrate_all(model, store: GroupQuantizerStore, plan: GroupPlan,
                  schedule: NoiseSchedule, config: CalibrationConfig,
                  rng: Rng) -> CalibrationReport:
    """Sequential group-by-group calibration over FP-chained start states.

    Group l+1's start states are always the full-precision model's outputs at
    the group boundary, never the quantized model's: the quantized trajectory
    within each group starts from an error-free state, and the objective alone
    accounts for the drift accumulated inside the group.
    """
    report = CalibrationReport()
    x = gaussian_sample(rng, (config.samples_per_group, model.dim))
    for l in range(plan.n_groups):
        t0 = time.perf_counter()
        counter = MemoryCounter()
        fp_traj = rollout(model, x, plan.starts[l], plan.sizes[l], schedule)
        trace = calibrate_group(fp_traj, model, store, l, plan, schedule, config,
                                counter=counter)
        q_end = _quantized_cache(model, store.group_params(l), fp_traj.start_state,
                                 plan.starts[l], plan.sizes[l], schedule)[-1]
        report.loss_traces.append(trace)
        report.endpoint_mses.append(endpoint_mse(fp_traj.final_state, q_end))
        report.peak_memory.append(counter.peak)
        report.wall_clock.append(time.perf_counter() - t0)
        x = fp_traj.final_state
    report.store = store
    return report


def quantized_rollout_all(model, store: GroupQuantizerStore, plan: GroupPlan,
                          schedule: NoiseSchedule, x_start: np.ndarray) -> np.ndarray:
    """Full quantized sampling run: each group's steps use that group's
    quantizers, and quantized states chain forward (inference, not calibration)."""
    x = np.asarray(x_start, dtype=np.float64)
    for l in range(plan.n_groups):
        qm = QuantizedModel(model, store.group_params(l))
        x = rollout(qm, x, plan.starts[l], plan.sizes[l], schedule).final_state
    return x


def calibrate_per_step_baseline(model, store: GroupQuantizerStore, plan: GroupPlan,
                                schedule: NoiseSchedule, config: CalibrationConfig,
                                rng: Rng) -> CalibrationReport:
    """Single-step calibration control: every step gets error-free FP inputs.

    This is exactly calibrate_all with group size 1 (the two coincide by
    construction), representing methods that ignore accumulated error.
    """
    one_step = partition_groups(plan.T, 1)
    if store.n_groups != one_step.n_groups:
        raise ValueError("store must be initialized for the M=1 plan")
    cfg = CalibrationConfig(epochs=config.epochs, lr=config.lr,
                            batch_size=config.batch_size,
                            samples_per_group=config.samples_per_group,
                            seed=config.seed, mode="approx",
                            optimize_weight_sites=config.optimize_weight_sites)
    return calibrate_all(model, store, one_step, schedule, cfg, rng)
