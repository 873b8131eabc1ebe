"""Experiment runner: every pipeline as a subcommand driven by a JSON config.

    accuquant {error-accum | calibrate | grad-dominance | sweep | train-denoiser}
              --config <path> [--seed N] [--out <dir>]

Each subcommand is a pure function of (config, seed) to output files. Exit
codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error. The
ACCUQUANT_THREADS environment variable caps worker parallelism.

Timing information goes to timing.txt; all CSV/JSON outputs are byte-identical
across reruns with the same config and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .analysis import (error_trace_rows, frechet_distance, grad_dominance_rows,
                       measure_grad_dominance, simulate_error_accumulation,
                       write_csv, write_json)
from .calibration import (CalibrationConfig, calibrate_all, initialize_store,
                          partition_groups, quantized_rollout_all)
from .denoiser import LinearDenoiser, MlpDenoiser, TrainConfig, make_dataset, train_toy_denoiser
from .diffusion import make_schedule, rollout
from .numerics import Rng, gaussian_sample

# Fixed substream ids so each pipeline stage draws from its own counter stream.
STREAM_DATA, STREAM_TRAIN, STREAM_MODEL = 1, 2, 3
STREAM_CALIB, STREAM_EVAL, STREAM_TRIALS, STREAM_DIRS = 4, 5, 6, 7


class ConfigError(Exception):
    pass


def _get(doc: dict, path: str, typ, default=None, required=True):
    node = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if required and default is None:
                raise ConfigError(f"missing config field: {path}")
            return default
        node = node[part]
    if typ is float and isinstance(node, int):
        node = float(node)
    if not isinstance(node, typ) or isinstance(node, bool) and typ in (int, float):
        raise ConfigError(f"config field {path} must be {typ.__name__}")
    return node


def load_config(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e


def build_schedule(doc: dict):
    kind = _get(doc, "schedule.kind", str, default="linear")
    T = _get(doc, "schedule.T", int)
    try:
        if kind == "linear":
            return make_schedule(kind, T, _get(doc, "schedule.beta_start", float, default=1e-4),
                                 _get(doc, "schedule.beta_end", float, default=0.02))
        return make_schedule(kind, T)
    except ValueError as e:
        raise ConfigError(f"invalid schedule: {e}") from e


def build_model(doc: dict, schedule, seed: int):
    kind = _get(doc, "model.kind", str)
    dim = _get(doc, "model.dim", int, default=2)
    if kind == "linear":
        scale = _get(doc, "model.scale", float, default=0.5)
        return LinearDenoiser.random(schedule.T, dim, Rng(seed, STREAM_MODEL), scale=scale)
    if kind == "mlp":
        path = _get(doc, "model.path", str, required=False)
        if path is not None:
            with open(path) as f:
                return MlpDenoiser.from_json(f.read())
        model, _ = _train_mlp(doc, schedule, seed)
        return model
    raise ConfigError(f"config field model.kind must be 'linear' or 'mlp', got {kind!r}")


def _train_mlp(doc: dict, schedule, seed: int):
    name = _get(doc, "model.train.dataset", str, default="ring")
    n = _get(doc, "model.train.n", int, default=2048)
    cfg = TrainConfig(epochs=_get(doc, "model.train.epochs", int, default=80),
                      batch_size=_get(doc, "model.train.batch_size", int, default=128),
                      lr=_get(doc, "model.train.lr", float, default=1e-3),
                      hidden=_get(doc, "model.hidden", int, default=64),
                      n_time_features=_get(doc, "model.time_features", int, default=16))
    data = make_dataset(name, n, Rng(seed, STREAM_DATA))
    return train_toy_denoiser(data, schedule, cfg, Rng(seed, STREAM_TRAIN))


def build_calibration_config(doc: dict, seed: int) -> CalibrationConfig:
    try:
        return CalibrationConfig(
            epochs=_get(doc, "calibration.epochs", int, default=50),
            lr=_get(doc, "calibration.lr", float, default=1e-3),
            batch_size=_get(doc, "calibration.batch_size", int, default=8),
            samples_per_group=_get(doc, "calibration.samples_per_group", int, default=64),
            seed=seed,
            mode=_get(doc, "calibration.mode", str, default="approx"))
    except ValueError as e:
        raise ConfigError(f"invalid calibration config: {e}") from e


def cmd_error_accum(doc: dict, seed: int, out: str) -> int:
    schedule = build_schedule(doc)
    trials = _get(doc, "error_accum.trials", int, default=512)
    sigma = _get(doc, "error_accum.delta_sigma", float, default=1.0)
    dim = _get(doc, "error_accum.dim", int, default=16)
    trace = simulate_error_accumulation(schedule, trials, Rng(seed, STREAM_TRIALS),
                                        delta_sigma=sigma, dim=dim)
    os.makedirs(out, exist_ok=True)
    write_csv(os.path.join(out, "error_trace.csv"),
              ["t", "step_err_mean", "step_err_std", "accum_err_mean", "accum_err_std"],
              error_trace_rows(trace))
    ratio = float(trace.accum_err_mean[-1] / trace.step_err_mean[-1])
    write_json(os.path.join(out, "summary.json"),
               {"T": schedule.T, "trials": trials, "delta_sigma": sigma, "dim": dim,
                "final_step_ratio_accum_over_step": ratio,
                "final_accum_err_mean": float(trace.accum_err_mean[-1]),
                "final_step_err_mean": float(trace.step_err_mean[-1])})
    return 0


def run_calibration(doc: dict, seed: int):
    """Shared pipeline behind `calibrate` and each sweep point."""
    schedule = build_schedule(doc)
    model = build_model(doc, schedule, seed)
    cfg = build_calibration_config(doc, seed)
    M = _get(doc, "plan.M", int)
    if cfg.mode == "per-step-baseline":
        M = 1
    try:
        plan = partition_groups(schedule.T, M)
    except ValueError as e:
        raise ConfigError(f"invalid plan: {e}") from e
    bits_w = _get(doc, "quantization.bits_weight", int, default=4)
    bits_a = _get(doc, "quantization.bits_activation", int, default=8)

    init_batch = gaussian_sample(Rng(seed, STREAM_CALIB), (cfg.samples_per_group, model.dim))
    store = initialize_store(model, schedule, plan, init_batch, bits_w, bits_a)
    report = calibrate_all(model, store, plan, schedule, cfg, Rng(seed, STREAM_CALIB))

    n_eval = _get(doc, "eval.n_samples", int, default=512)
    x_eval = gaussian_sample(Rng(seed, STREAM_EVAL), (n_eval, model.dim))
    fp_out = rollout(model, x_eval, schedule.T, schedule.T, schedule).final_state
    q_out = quantized_rollout_all(model, store, plan, schedule, x_eval)
    metrics = {"frechet_to_fp": frechet_distance(q_out, fp_out),
               "mean_endpoint_mse": float(np.mean(report.endpoint_mses)),
               "final_group_endpoint_mse": report.endpoint_mses[-1],
               "mode": cfg.mode, "M": M,
               "bits_weight": bits_w, "bits_activation": bits_a}
    return report, store, metrics


def cmd_calibrate(doc: dict, seed: int, out: str) -> int:
    report, store, metrics = run_calibration(doc, seed)
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "report.json"), report.to_doc())
    write_csv(os.path.join(out, "losses.csv"), ["group", "epoch", "loss"],
              ((l, e, v) for l, tr in enumerate(report.loss_traces) for e, v in enumerate(tr)))
    with open(os.path.join(out, "store.json"), "w") as f:
        f.write(store.to_json())
    write_json(os.path.join(out, "metrics.json"), metrics)
    write_json(os.path.join(out, "memory.json"),
               {"mode": metrics["mode"], "per_group_peak": report.peak_memory,
                "max_peak": max(report.peak_memory)})
    with open(os.path.join(out, "timing.txt"), "w") as f:
        for l, w in enumerate(report.wall_clock):
            f.write(f"group {l}: {w:.3f}s\n")
    return 0


def cmd_grad_dominance(doc: dict, seed: int, out: str) -> int:
    schedule = build_schedule(doc)
    model = build_model(doc, schedule, seed)
    steps = _get(doc, "grad_dominance.probe_steps", list,
                 default=[t for t in range(schedule.T, 0, -max(1, schedule.T // 10))])
    n_probes = _get(doc, "grad_dominance.probes_per_step", int, default=8)
    n_dirs = _get(doc, "grad_dominance.n_directions", int, default=16)
    for t in steps:
        if not isinstance(t, int) or not (1 <= t <= schedule.T):
            raise ConfigError(f"config field grad_dominance.probe_steps has invalid step {t!r}")
    x = gaussian_sample(Rng(seed, STREAM_EVAL), (n_probes, model.dim))
    traj = rollout(model, x, schedule.T, schedule.T, schedule)
    probes = [(traj.states[schedule.T - t][i], t) for t in steps for i in range(n_probes)]
    report = measure_grad_dominance(model, probes, schedule, Rng(seed, STREAM_DIRS),
                                    n_directions=n_dirs)
    os.makedirs(out, exist_ok=True)
    write_csv(os.path.join(out, "grad_dominance.csv"),
              ["t", "scalar", "jac_mean", "jac_std", "full_mean", "full_std"],
              grad_dominance_rows(report))
    return 0


def cmd_sweep(doc: dict, seed: int, out: str) -> int:
    axis = _get(doc, "sweep.axis", str)
    if axis not in ("group_size", "bits"):
        raise ConfigError("config field sweep.axis must be 'group_size' or 'bits'")
    values = _get(doc, "sweep.values", list)
    seeds = _get(doc, "sweep.seeds", list, default=[seed])
    for v in values + seeds:
        if not isinstance(v, int):
            raise ConfigError("config fields sweep.values and sweep.seeds must hold integers")
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "sweep.csv")
    rows_done = []
    with open(path, "w", newline="") as f:
        f.write("axis_value,seed,endpoint_mse,frechet_to_fp,peak_memory\n")
        for v in values:
            for s in seeds:
                point = json.loads(json.dumps(doc))
                if axis == "group_size":
                    point.setdefault("plan", {})["M"] = v
                else:
                    point.setdefault("quantization", {})["bits_activation"] = v
                point_seed = s * 100_003 + v
                report, _, metrics = run_calibration(point, point_seed)
                row = (v, s, metrics["mean_endpoint_mse"], metrics["frechet_to_fp"],
                       max(report.peak_memory))
                rows_done.append(row)
                f.write(",".join(repr(x) if isinstance(x, float) else str(x) for x in row) + "\n")
                f.flush()  # partial results survive a crash at later points
    medians = {}
    for v in values:
        fr = sorted(r[3] for r in rows_done if r[0] == v)
        medians[str(v)] = fr[len(fr) // 2]
    write_json(os.path.join(out, "sweep_summary.json"),
               {"axis": axis, "values": values, "seeds": seeds,
                "median_frechet_to_fp": medians})
    return 0


def cmd_train_denoiser(doc: dict, seed: int, out: str) -> int:
    schedule = build_schedule(doc)
    if _get(doc, "model.kind", str) != "mlp":
        raise ConfigError("config field model.kind must be 'mlp' for train-denoiser")
    model, losses = _train_mlp(doc, schedule, seed)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "model.json"), "w") as f:
        f.write(model.to_json())
    write_csv(os.path.join(out, "train_trace.csv"), ["epoch", "loss"],
              enumerate(float(v) for v in losses))
    write_json(os.path.join(out, "summary.json"),
               {"first_epoch_loss": losses[0], "final_epoch_loss": losses[-1]})
    return 0


COMMANDS = {
    "error-accum": cmd_error_accum,
    "calibrate": cmd_calibrate,
    "grad-dominance": cmd_grad_dominance,
    "sweep": cmd_sweep,
    "train-denoiser": cmd_train_denoiser,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="accuquant", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    try:
        doc = load_config(args.config)
        seed = args.seed if args.seed is not None else _get(doc, "seed", int, default=0)
        out = args.out if args.out is not None else _get(doc, "out_dir", str, default="out")
        code = COMMANDS[args.command](doc, seed, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4
    return code


if __name__ == "__main__":
    sys.exit(main())
