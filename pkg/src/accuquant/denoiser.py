"""Noise-prediction models at two fidelity tiers.

LinearDenoiser has a closed-form Jacobian (exactly W_t), which keeps every
gradient identity checkable against finite differences. MlpDenoiser is a small
tanh network with a sinusoidal time embedding, trained on 2-D toy data with
hand-derived backprop; it is the end-to-end calibration target.

Quantized forward passes run entirely in float64 with fake quantization at
registered sites and record the per-site derivative of the prediction with
respect to each site's step size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, forward_diffuse, rollout
from .numerics import AdamState, Rng, adam_step, gaussian_sample
from .quantizer import QuantizerParams, Site, SiteKind, fake_quant, round_half_away


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"state must be 1-D or 2-D, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Linear tier
# ---------------------------------------------------------------------------

@dataclass
class LinearDenoiser:
    """Per-step affine predictor: eps(x, t) = W_t @ x + b_t.

    Quantization applies to the weights only (one shared quantizer across all
    steps), so the quantized forward stays smooth in x and its input-output
    Jacobian is exactly the fake-quantized W_t.
    """

    W: np.ndarray  # (T, d, d)
    b: np.ndarray  # (T, d)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 3 or self.W.shape[1] != self.W.shape[2]:
            raise ValueError("W must have shape (T, d, d)")
        if self.b.shape != self.W.shape[:2]:
            raise ValueError("b must have shape (T, d)")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("parameters must be finite")

    @property
    def T(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def _wt(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        if not (1 <= t <= self.T):
            raise ValueError(f"step {t} out of range 1..{self.T}")
        return self.W[t - 1], self.b[t - 1]

    def predict(self, x: np.ndarray, t: int) -> np.ndarray:
        W, b = self._wt(t)
        xb, squeeze = _as_batch(x)
        if xb.shape[1] != self.dim:
            raise ValueError(f"state dimension {xb.shape[1]} != model dimension {self.dim}")
        out = xb @ W.T + b
        return out[0] if squeeze else out

    def jacobian(self, t: int) -> np.ndarray:
        """d eps / d x at step t; exactly W_t for this model."""
        return self._wt(t)[0].copy()

    def sites(self) -> list[Site]:
        return [Site("weight", SiteKind.WEIGHT)]

    def site_values(self, x: np.ndarray, t: int) -> dict[str, np.ndarray]:
        """Full-precision tensors observed at each quantization site."""
        return {"weight": self.W}

    @classmethod
    def random(cls, T: int, dim: int, rng: Rng, scale: float = 0.5) -> "LinearDenoiser":
        W = scale * gaussian_sample(rng, (T, dim, dim))
        b = scale * gaussian_sample(rng, (T, dim))
        return cls(W=W, b=b)


def linear_predict(m: LinearDenoiser, x: np.ndarray, t: int) -> np.ndarray:
    return m.predict(x, t)


def linear_jacobian(m: LinearDenoiser, t: int) -> np.ndarray:
    return m.jacobian(t)


# ---------------------------------------------------------------------------
# MLP tier
# ---------------------------------------------------------------------------

def time_embedding(t, n_features: int) -> np.ndarray:
    """Sinusoidal features of the step index; t may be a scalar or 1-D array."""
    if n_features % 2 != 0:
        raise ValueError("n_features must be even")
    half = n_features // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = np.multiply.outer(np.asarray(t, dtype=np.float64), freqs)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass
class MlpDenoiser:
    """Two-hidden-layer tanh network on concat(state, time embedding)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    n_time_features: int = 16

    def __post_init__(self):
        for name in PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            setattr(self, name, arr)
        h, inp = self.W1.shape
        if self.W2.shape != (h, h) or self.W3.shape[1] != h:
            raise ValueError("layer shapes do not chain")
        if self.b1.shape != (h,) or self.b2.shape != (h,) or self.b3.shape != (self.W3.shape[0],):
            raise ValueError("bias shapes do not match")
        if inp != self.W3.shape[0] + self.n_time_features:
            raise ValueError("input width must equal dim + n_time_features")

    @property
    def dim(self) -> int:
        return self.W3.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def _forward(self, xb: np.ndarray, t) -> dict[str, np.ndarray]:
        emb = time_embedding(t, self.n_time_features)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (xb.shape[0], emb.shape[0]))
        inp = np.concatenate([xb, emb], axis=1)
        z1 = inp @ self.W1.T + self.b1
        a1 = np.tanh(z1)
        z2 = a1 @ self.W2.T + self.b2
        a2 = np.tanh(z2)
        out = a2 @ self.W3.T + self.b3
        return {"inp": inp, "z1": z1, "a1": a1, "z2": z2, "a2": a2, "out": out}

    def predict(self, x: np.ndarray, t) -> np.ndarray:
        xb, squeeze = _as_batch(x)
        out = self._forward(xb, t)["out"]
        return out[0] if squeeze else out

    def sites(self) -> list[Site]:
        return [Site("w1", SiteKind.WEIGHT), Site("w2", SiteKind.WEIGHT),
                Site("w3", SiteKind.WEIGHT), Site("input", SiteKind.ACTIVATION),
                Site("h1", SiteKind.ACTIVATION), Site("h2", SiteKind.ACTIVATION)]

    def site_values(self, x: np.ndarray, t: int) -> dict[str, np.ndarray]:
        xb, _ = _as_batch(x)
        cache = self._forward(xb, t)
        return {"w1": self.W1, "w2": self.W2, "w3": self.W3,
                "input": cache["inp"], "h1": cache["a1"], "h2": cache["a2"]}

    def pack(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def unpack(self, flat: np.ndarray):
        pos = 0
        for name in PARAM_NAMES:
            arr = getattr(self, name)
            setattr(self, name, flat[pos:pos + arr.size].reshape(arr.shape))
            pos += arr.size

    @classmethod
    def init(cls, dim: int = 2, hidden: int = 64, n_time_features: int = 16,
             rng: Rng | None = None) -> "MlpDenoiser":
        rng = rng or Rng(0)
        inp = dim + n_time_features
        def layer(n_out, n_in):
            return gaussian_sample(rng, (n_out, n_in)) / np.sqrt(n_in)
        return cls(W1=layer(hidden, inp), b1=np.zeros(hidden),
                   W2=layer(hidden, hidden), b2=np.zeros(hidden),
                   W3=layer(dim, hidden), b3=np.zeros(dim),
                   n_time_features=n_time_features)

    def to_json(self) -> str:
        doc = {"kind": "mlp", "dim": self.dim, "hidden": self.hidden,
               "n_time_features": self.n_time_features,
               "params": {n: {"shape": list(getattr(self, n).shape),
                              "data": getattr(self, n).ravel().tolist()}
                          for n in PARAM_NAMES}}
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "MlpDenoiser":
        doc = json.loads(text)
        kwargs = {n: np.array(p["data"]).reshape(p["shape"])
                  for n, p in doc["params"].items()}
        return cls(n_time_features=doc["n_time_features"], **kwargs)


def mlp_predict(m: MlpDenoiser, x: np.ndarray, t) -> np.ndarray:
    return m.predict(x, t)


# ---------------------------------------------------------------------------
# Quantized forward passes
# ---------------------------------------------------------------------------

# Retained-tensor constants used by the memory instrumentation: how many
# intermediate activation tensors one step's backward pass keeps alive.
LINEAR_RETAINED = 1          # the input state
MLP_RETAINED = 5             # inp_q, z1, a1_q, z2, a2_q


@dataclass
class QuantizedForwardRecord:
    """Output of one quantized prediction plus its step-size sensitivities.

    ds_grads[site] holds d eps_tilde / d s_site, same shape as eps. The
    activations_stored count feeds the O(1)-vs-O(M) memory accounting.
    """

    eps: np.ndarray
    ds_grads: dict[str, np.ndarray]
    activations_stored: int


def quantized_predict(model, params: dict[str, QuantizerParams], x: np.ndarray,
                      t: int) -> QuantizedForwardRecord:
    """Fake-quantized forward pass recording d eps / d s for every site.

    `params` maps every registered site id of `model` to its quantizer
    parameters (see GroupQuantizerStore.group_params).
    """
    for site in model.sites():
        if site.id not in params:
            raise KeyError(f"unregistered site {site.id!r}: no quantizer parameters")
    if isinstance(model, LinearDenoiser):
        return _linear_quantized(model, params, x, t)
    if isinstance(model, MlpDenoiser):
        return _mlp_quantized(model, params, x, t)
    raise TypeError(f"unsupported model type {type(model).__name__}")


def _linear_quantized(m: LinearDenoiser, params, x, t) -> QuantizedForwardRecord:
    W, b = m._wt(t)
    xb, squeeze = _as_batch(x)
    W_q, dW_ds = fake_quant(W, params["weight"])
    eps = xb @ W_q.T + b
    ds = {"weight": xb @ dW_ds.T}
    if squeeze:
        eps, ds = eps[0], {k: v[0] for k, v in ds.items()}
    return QuantizedForwardRecord(eps=eps, ds_grads=ds,
                                  activations_stored=LINEAR_RETAINED)


def _mlp_quantized(m: MlpDenoiser, params, x, t) -> QuantizedForwardRecord:
    xb, squeeze = _as_batch(x)
    emb = time_embedding(t, m.n_time_features)
    inp = np.concatenate([xb, np.broadcast_to(emb, (xb.shape[0], emb.shape[0]))], axis=1)

    W1q, dW1 = fake_quant(m.W1, params["w1"])
    W2q, dW2 = fake_quant(m.W2, params["w2"])
    W3q, dW3 = fake_quant(m.W3, params["w3"])
    inp_q, dinp = fake_quant(inp, params["input"])

    z1 = inp_q @ W1q.T + m.b1
    a1 = np.tanh(z1)
    a1q, da1 = fake_quant(a1, params["h1"])
    z2 = a1q @ W2q.T + m.b2
    a2 = np.tanh(z2)
    a2q, da2 = fake_quant(a2, params["h2"])
    eps = a2q @ W3q.T + m.b3

    t1 = 1.0 - a1**2  # tanh'
    t2 = 1.0 - a2**2

    def through_l2(v):  # (n, h) perturbation of a1q -> output
        return ((v @ W2q.T) * t2) @ W3q.T

    def through_l1(v):  # (n, h) perturbation of z1-input -> output
        return through_l2((v * t1))

    ds = {
        "h2": da2 @ W3q.T,
        "h1": through_l2(da1),
        "input": through_l1(dinp @ W1q.T),
        "w3": a2q @ dW3.T,
        "w2": through_l2(a1q @ dW2.T),
        "w1": through_l1(inp_q @ dW1.T),
    }
    if squeeze:
        eps, ds = eps[0], {k: v[0] for k, v in ds.items()}
    return QuantizedForwardRecord(eps=eps, ds_grads=ds,
                                  activations_stored=MLP_RETAINED)


def ste_jacobian(model, params: dict[str, QuantizerParams], x: np.ndarray, t: int) -> np.ndarray:
    """Straight-through d eps_tilde / d x at one state (rounding = identity in range).

    This is the Jacobian an autograd engine would report for the quantized
    forward pass; the true almost-everywhere derivative through activation
    quantizers is zero between levels and is not useful for analysis.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("ste_jacobian expects a single state")
    if isinstance(model, LinearDenoiser):
        W, _ = model._wt(t)
        W_q, _ = fake_quant(W, params["weight"])
        return W_q
    if not isinstance(model, MlpDenoiser):
        raise TypeError(f"unsupported model type {type(model).__name__}")
    m = model
    emb = time_embedding(t, m.n_time_features)
    inp = np.concatenate([x, emb])

    def rail_mask(v, q):
        unclipped = round_half_away(v / q.s) + q.z
        return ((unclipped >= 0) & (unclipped <= q.n_levels - 1)).astype(np.float64)

    W1q, _ = fake_quant(m.W1, params["w1"])
    W2q, _ = fake_quant(m.W2, params["w2"])
    W3q, _ = fake_quant(m.W3, params["w3"])
    inp_q, _ = fake_quant(inp, params["input"])
    z1 = W1q @ inp_q + m.b1
    a1 = np.tanh(z1)
    a1q, _ = fake_quant(a1, params["h1"])
    z2 = W2q @ a1q + m.b2
    a2 = np.tanh(z2)

    m_in = rail_mask(inp, params["input"])[: m.dim]
    m_h1 = rail_mask(a1, params["h1"])
    m_h2 = rail_mask(a2, params["h2"])
    J = W1q[:, : m.dim] * m_in[None, :]
    J = ((1.0 - a1**2) * m_h1)[:, None] * J
    J = W2q @ J
    J = ((1.0 - a2**2) * m_h2)[:, None] * J
    return W3q @ J


@dataclass
class QuantizedModel:
    """Adapter giving a quantized (model, params) pair the predict() interface."""

    model: object
    params: dict[str, QuantizerParams]

    def predict(self, x: np.ndarray, t: int) -> np.ndarray:
        return quantized_predict(self.model, self.params, x, t).eps


# ---------------------------------------------------------------------------
# Toy datasets and training
# ---------------------------------------------------------------------------

def make_dataset(name: str, n: int, rng: Rng) -> np.ndarray:
    """2-D toy datasets: "ring" (8-mode Gaussian mixture) or "moons"."""
    if name == "ring":
        modes = rng.generator.integers(0, 8, size=n)
        angles = 2.0 * np.pi * modes / 8.0
        centers = np.stack([2.0 * np.cos(angles), 2.0 * np.sin(angles)], axis=1)
        return centers + 0.2 * gaussian_sample(rng, (n, 2))
    if name == "moons":
        theta = np.pi * rng.generator.random(n)
        upper = rng.generator.integers(0, 2, size=n).astype(bool)
        x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
        pts = np.stack([x, y], axis=1) + 0.1 * gaussian_sample(rng, (n, 2))
        return 2.0 * (pts - np.array([0.5, 0.25]))
    raise ValueError(f"unknown dataset {name!r}")


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 128
    lr: float = 1e-3
    hidden: int = 64
    n_time_features: int = 16


def mlp_backprop(m: MlpDenoiser, xb: np.ndarray, t, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss mean_i sum_d (eps(x_i,t_i) - target_i)^2 and its packed gradient."""
    cache = m._forward(xb, t)
    n = xb.shape[0]
    resid = cache["out"] - target
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    g_out = 2.0 * resid / n
    gW3 = g_out.T @ cache["a2"]
    gb3 = g_out.sum(axis=0)
    g_a2 = g_out @ m.W3
    g_z2 = g_a2 * (1.0 - cache["a2"] ** 2)
    gW2 = g_z2.T @ cache["a1"]
    gb2 = g_z2.sum(axis=0)
    g_a1 = g_z2 @ m.W2
    g_z1 = g_a1 * (1.0 - cache["a1"] ** 2)
    gW1 = g_z1.T @ cache["inp"]
    gb1 = g_z1.sum(axis=0)
    grad = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2, gW3.ravel(), gb3])
    return loss, grad


def train_toy_denoiser(dataset: np.ndarray, schedule: NoiseSchedule,
                       config: TrainConfig, rng: Rng) -> tuple[MlpDenoiser, list[float]]:
    """Fit the MLP to predict the injected noise; returns model and per-epoch loss.

    Steps t are sampled uniformly per example; optimization is Adam on the
    hand-derived backprop gradients.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.size == 0:
        raise ValueError("dataset must be non-empty")
    if config.epochs < 1:
        raise ValueError("epochs must be >= 1")
    model = MlpDenoiser.init(dim=dataset.shape[1], hidden=config.hidden,
                             n_time_features=config.n_time_features,
                             rng=rng.substream(0))
    data_rng = rng.substream(1)
    state = AdamState(lr=config.lr)
    params = model.pack()
    n = dataset.shape[0]
    epoch_losses = []
    for epoch in range(config.epochs):
        perm = data_rng.generator.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            x0 = dataset[idx]
            t = data_rng.generator.integers(1, schedule.T + 1, size=len(idx))
            eps = gaussian_sample(data_rng, x0.shape)
            a = schedule.alpha[t][:, None]
            x_t = np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps
            model.unpack(params)
            loss, grad = mlp_backprop(model, x_t, t, eps)
            if not np.isfinite(loss):
                raise FloatingPointError(f"training diverged at epoch {epoch}")
            params, state = adam_step(params, grad, state)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    model.unpack(params)
    return model, epoch_losses


def sample_from_model(model, schedule: NoiseSchedule, n: int, rng: Rng) -> np.ndarray:
    """Generate n points by denoising pure Gaussian noise over the full schedule."""
    x_start = gaussian_sample(rng, (n, model.dim))
    return rollout(model, x_start, schedule.T, schedule.T, schedule).final_state
