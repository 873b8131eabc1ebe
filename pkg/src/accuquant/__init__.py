"""Multi-step calibration of quantized iterative denoising samplers.

Instead of matching the quantized model to the full-precision one a single
step at a time, calibration here aligns the two samplers' outputs across
groups of consecutive denoising steps, which is what actually controls the
error that accumulates over a sampling run. A schedule-ratio gradient
approximation keeps the memory cost of a group's backward pass constant in
the group size.
"""

from .numerics import AdamState, Rng, adam_step, finite_diff_grad, finite_diff_jacobian, gaussian_sample
from .diffusion import (NoiseSchedule, StepCoeffs, Trajectory, ddim_step,
                        forward_diffuse, make_schedule, rollout, step_coeffs)
from .quantizer import (GroupQuantizerStore, QuantizerParams, Site, SiteKind,
                        dequantize, fake_quant, minmax_init, quantize)
from .denoiser import (LinearDenoiser, MlpDenoiser, QuantizedForwardRecord,
                       QuantizedModel, TrainConfig, linear_jacobian, linear_predict,
                       make_dataset, mlp_predict, quantized_predict, sample_from_model,
                       ste_jacobian, time_embedding, train_toy_denoiser)
from .calibration import (CalibrationConfig, CalibrationReport, GroupPlan,
                          MemoryCounter, accuquant_group_pass, calibrate_all,
                          calibrate_group, calibrate_per_step_baseline, endpoint_mse,
                          full_gradient_bptt, g_factor, initialize_store,
                          partition_groups, quantized_rollout_all)
from .analysis import (ErrorTrace, GradDominanceReport, MemoryReport, error_recursion,
                       frechet_distance, measure_grad_dominance, measure_memory,
                       simulate_error_accumulation, worker_count)

__version__ = "0.1.0"
