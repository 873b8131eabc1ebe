"""Uniform affine fake quantization with learnable step sizes.

A value v is mapped to an integer level clip(round(v/s) + z, 0, 2^b - 1) and
back to s * (level - z). Rounding ties break away from zero so that the level
function is reproducible bit-for-bit across implementations.

The step-size gradient returned by `fake_quant` is the true almost-everywhere
derivative of the quantize-dequantize map, which is simply level - z (equal to
v_hat / s) on every linear piece, including the clipping rails. It therefore
agrees with central finite differences everywhere except within a vanishing
neighbourhood of rounding/clipping discontinuities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


def round_half_away(x):
    """Round to nearest integer with ties away from zero (as floats)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantizerParams:
    """Step size, zero point, and bit-width of one uniform quantizer."""

    s: float
    z: int
    b: int
    degenerate: bool = False

    def __post_init__(self):
        if self.b < 2:
            raise ValueError("bit-width must be >= 2")
        if self.s <= 0:
            raise ValueError("step size must be positive")
        if not (0 <= self.z <= 2**self.b - 1):
            raise ValueError(f"zero point {self.z} outside [0, {2**self.b - 1}]")

    @property
    def n_levels(self) -> int:
        return 2**self.b


def quantize(v, q: QuantizerParams):
    """Integer level of v: clip(round(v/s) + z, 0, 2^b - 1)."""
    levels = np.clip(round_half_away(np.asarray(v, dtype=np.float64) / q.s) + q.z,
                     0, q.n_levels - 1).astype(np.int64)
    if np.isscalar(v) or np.ndim(v) == 0:
        return int(levels)
    return levels


def dequantize(level, q: QuantizerParams):
    """Real value of an integer level: s * (level - z)."""
    lv = np.asarray(level)
    if np.any(lv < 0) or np.any(lv > q.n_levels - 1):
        raise ValueError(f"level outside [0, {q.n_levels - 1}]")
    out = q.s * (lv.astype(np.float64) - q.z)
    if np.isscalar(level) or np.ndim(level) == 0:
        return float(out)
    return out


def fake_quant(v, q: QuantizerParams) -> tuple[np.ndarray, np.ndarray]:
    """Quantize-dequantize v; also return d(v_hat)/ds per element.

    The gradient is level - z: the slope of the piecewise-linear map s -> v_hat
    at fixed v. At the clipping rails this is -z and 2^b - 1 - z respectively.
    """
    v = np.asarray(v, dtype=np.float64)
    levels = np.clip(round_half_away(v / q.s) + q.z, 0, q.n_levels - 1)
    offset = levels - q.z
    return q.s * offset, offset


def minmax_init(samples, b: int, symmetric: bool = False) -> QuantizerParams:
    """Quantizer parameters covering the observed sample range.

    Asymmetric: s = (max - min) / (2^b - 1), z = round(-min/s) clipped to range.
    Symmetric: range +-max|v| with z pinned to 2^(b-1).
    Constant samples yield s = 1e-8 with the degenerate flag set.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("samples must be non-empty")
    if not np.all(np.isfinite(samples)):
        raise ValueError("samples must be finite")
    lo = float(samples.min())
    hi = float(samples.max())
    n = 2**b - 1
    if symmetric:
        bound = max(abs(lo), abs(hi))
        s = 2.0 * bound / n
        z = 2 ** (b - 1)
    else:
        s = (hi - lo) / n
        z = None
    degenerate = s < 1e-8
    if degenerate:
        s = 1e-8
    if z is None:
        z = int(np.clip(round_half_away(-lo / s), 0, n))
    return QuantizerParams(s=s, z=z, b=b, degenerate=degenerate)


class SiteKind(str, Enum):
    WEIGHT = "weight"
    ACTIVATION = "activation"


@dataclass(frozen=True)
class Site:
    """One quantization point in a model: a weight tensor or an activation."""

    id: str
    kind: SiteKind


@dataclass
class GroupQuantizerStore:
    """Per-group quantizer parameters for a registered set of sites.

    Weight-site parameters are shared by every group (weights do not change
    across denoising steps); activation-site parameters are owned per group.
    """

    sites: list[Site]
    n_groups: int
    weight_params: dict[str, QuantizerParams] = field(default_factory=dict)
    act_params: dict[tuple[int, str], QuantizerParams] = field(default_factory=dict)

    def weight_sites(self) -> list[Site]:
        return [s for s in self.sites if s.kind == SiteKind.WEIGHT]

    def activation_sites(self) -> list[Site]:
        return [s for s in self.sites if s.kind == SiteKind.ACTIVATION]

    def set_params(self, site_id: str, params: QuantizerParams, group: int | None = None):
        site = self._lookup(site_id)
        if site.kind == SiteKind.WEIGHT:
            self.weight_params[site_id] = params
        else:
            if group is None:
                raise ValueError(f"activation site {site_id!r} needs a group index")
            self._check_group(group)
            self.act_params[(group, site_id)] = params

    def params_for(self, site_id: str, group: int) -> QuantizerParams:
        site = self._lookup(site_id)
        self._check_group(group)
        if site.kind == SiteKind.WEIGHT:
            if site_id not in self.weight_params:
                raise KeyError(f"weight site {site_id!r} has no parameters")
            return self.weight_params[site_id]
        key = (group, site_id)
        if key not in self.act_params:
            raise KeyError(f"activation site {site_id!r} has no parameters for group {group}")
        return self.act_params[key]

    def group_params(self, group: int) -> dict[str, QuantizerParams]:
        """site_id -> params map for one group (weights shared, acts per group)."""
        return {s.id: self.params_for(s.id, group) for s in self.sites}

    def trainable_sites(self, include_weights: bool = False) -> list[Site]:
        """Sites whose step size is optimized during a group's calibration."""
        out = self.activation_sites()
        if include_weights:
            out = self.weight_sites() + out
        return out

    def get_step_sizes(self, group: int, site_ids: list[str]) -> np.ndarray:
        return np.array([self.params_for(sid, group).s for sid in site_ids])

    def set_step_sizes(self, group: int, site_ids: list[str], values: np.ndarray):
        for sid, s in zip(site_ids, values):
            old = self.params_for(sid, group)
            site = self._lookup(sid)
            g = None if site.kind == SiteKind.WEIGHT else group
            self.set_params(sid, replace(old, s=float(s)), group=g)

    def _lookup(self, site_id: str) -> Site:
        for s in self.sites:
            if s.id == site_id:
                return s
        raise KeyError(f"unregistered site {site_id!r}")

    def _check_group(self, group: int):
        if not (0 <= group < self.n_groups):
            raise ValueError(f"group {group} outside 0..{self.n_groups - 1}")

    def to_json(self) -> str:
        rows = []
        for sid, p in sorted(self.weight_params.items()):
            rows.append({"l": None, "site_id": sid, "s": p.s, "z": p.z, "b": p.b})
        for (l, sid), p in sorted(self.act_params.items()):
            rows.append({"l": l, "site_id": sid, "s": p.s, "z": p.z, "b": p.b})
        doc = {"sites": [{"id": s.id, "kind": s.kind.value} for s in self.sites],
               "n_groups": self.n_groups, "groups": rows}
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GroupQuantizerStore":
        doc = json.loads(text)
        sites = [Site(id=s["id"], kind=SiteKind(s["kind"])) for s in doc["sites"]]
        store = cls(sites=sites, n_groups=doc["n_groups"])
        for row in doc["groups"]:
            params = QuantizerParams(s=row["s"], z=row["z"], b=row["b"])
            store.set_params(row["site_id"], params, group=row["l"])
        return store
