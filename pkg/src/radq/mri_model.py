"""Diffusion-MRI signal maths: mono-exponential DWI, ADC fitting, computed
high-b DWI and correlated diffusion imaging (CDI)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .volume_io import Volume

CDI_METHOD = "cdi-product-v1"


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionParams:
    s0: float
    d: float  # mm^2/s

    def __post_init__(self):
        if not (self.s0 >= 0 and self.d >= 0):
            raise ValueError(f"DiffusionParams need s0 >= 0 and d >= 0, got {self}")


@dataclass(frozen=True)
class BValueSchedule:
    b_values: tuple[float, ...]

    def __post_init__(self):
        bs = tuple(float(b) for b in self.b_values)
        object.__setattr__(self, "b_values", bs)
        if len(bs) < 2:
            raise ValueError("a b-value schedule needs at least two entries")
        if bs[0] != 0.0:
            raise ValueError(f"first b-value must be 0, got {bs[0]}")
        if any(b1 <= b0 for b0, b1 in zip(bs, bs[1:])):
            raise ValueError(f"b-values must be strictly increasing, got {bs}")


@dataclass(frozen=True)
class CDIConfig:
    window_radius: int = 1
    normalize_inputs: bool = True

    def __post_init__(self):
        if not 0 <= int(self.window_radius) <= 3:
            raise ValueError(f"window_radius must lie in [0, 3], got {self.window_radius}")


def dwi_signal(p: DiffusionParams, b: float) -> float:
    return p.s0 * math.exp(-b * p.d)


def _ols_log_fit(b: np.ndarray, log_s: np.ndarray):
    """Least squares of log_s (n_b, ...) against b; returns (intercept, slope)."""
    b = np.asarray(b, dtype=np.float64)
    bc = b - b.mean()
    sbb = float(bc @ bc)
    y_mean = log_s.mean(axis=0)
    slope = np.tensordot(bc, log_s - y_mean, axes=(0, 0)) / sbb
    intercept = y_mean - slope * b.mean()
    return intercept, slope


def fit_adc(signals: Sequence[tuple[float, float]]) -> DiffusionParams:
    """Fit ``S = S0 exp(-b D)`` by ordinary least squares on ``ln S``.

    Negative slopes (D < 0) are clamped to zero.
    """
    if len(signals) < 2:
        raise FitError("fit_adc needs at least two (b, S) pairs")
    b = np.array([float(s[0]) for s in signals])
    s = np.array([float(s[1]) for s in signals])
    if np.unique(b).size < 2:
        raise FitError("fit_adc is degenerate: fewer than two distinct b-values")
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise FitError("fit_adc needs strictly positive finite signals")
    intercept, slope = _ols_log_fit(b, np.log(s))
    return DiffusionParams(s0=float(np.exp(intercept)), d=max(0.0, float(-slope)))


@dataclass(frozen=True)
class AdcFit:
    adc: Volume
    s0: Volume
    qa_nonpositive: int
    qa_clamped: int


def _stack(dwi_by_b: Mapping[float, Volume]):
    items = sorted(dwi_by_b.items())
    if len(items) < 2:
        raise ValueError("need at least two b-value volumes")
    ref = items[0][1]
    for b, v in items:
        if v.dims != ref.dims:
            raise ValueError(f"dims mismatch: b={b} has {v.dims}, b={items[0][0]} has {ref.dims}")
    bs = np.array([b for b, _ in items], dtype=np.float64)
    return bs, np.stack([v.data.astype(np.float64) for _, v in items]), ref


def fit_adc_map(dwi_by_b: Mapping[float, Volume]) -> AdcFit:
    bs, stack, ref = _stack(dwi_by_b)
    if np.unique(bs).size < 2:
        raise FitError("fewer than two distinct b-values")
    bad = np.any(stack <= 0, axis=0)
    log_s = np.log(np.where(bad, 1.0, stack))
    intercept, slope = _ols_log_fit(bs, log_s)
    d = -slope
    clamped = (~bad) & (d < 0)
    d = np.where(bad | clamped, 0.0, d)
    s0 = np.where(bad, np.maximum(stack[0], 0.0), np.exp(intercept))
    qa = {"qa_nonpositive": int(bad.sum()), "qa_clamped": int(clamped.sum())}
    return AdcFit(
        adc=ref.with_data(d, "adc", meta=qa),
        s0=ref.with_data(s0, "s0"),
        qa_nonpositive=qa["qa_nonpositive"],
        qa_clamped=qa["qa_clamped"],
    )


def compute_adc_map(dwi_by_b: Mapping[float, Volume]) -> Volume:
    """Voxelwise ADC; the QA counts travel in ``meta``."""
    return fit_adc_map(dwi_by_b).adc


def compute_chb_dwi(adc_map: Volume, s0_map: Volume, b_target: float = 2000.0,
                    max_acquired_b: float | None = None) -> Volume:
    if adc_map.dims != s0_map.dims:
        raise ValueError(f"dims mismatch: adc {adc_map.dims} vs s0 {s0_map.dims}")
    if max_acquired_b is not None and not b_target > max_acquired_b:
        raise ValueError(f"b_target {b_target} must exceed the largest acquired b {max_acquired_b}")
    out = s0_map.data.astype(np.float64) * np.exp(-b_target * adc_map.data.astype(np.float64))
    return adc_map.with_data(out, "chb_dwi", meta={"b_target": float(b_target)})


def _window_mean(x: np.ndarray, r: int) -> np.ndarray:
    """In-plane (last two axes) box mean with windows clipped at the border."""
    if r == 0:
        return x
    ny, nx = x.shape[-2:]
    acc = np.zeros_like(x)
    cnt = np.zeros((ny, nx))
    for dy in range(-r, r + 1):
        ys, yd = slice(max(dy, 0), ny + min(dy, 0)), slice(max(-dy, 0), ny + min(-dy, 0))
        for dx in range(-r, r + 1):
            xs, xd = slice(max(dx, 0), nx + min(dx, 0)), slice(max(-dx, 0), nx + min(-dx, 0))
            acc[..., yd, xd] += x[..., ys, xs]
            cnt[yd, xd] += 1
    return acc / cnt


def compute_cdi(dwi_by_b: Mapping[float, Volume], cfg: CDIConfig = CDIConfig()) -> Volume:
    """Local-window mean of the product of per-b signals.

    Each b-volume is divided by its own maximum first when
    ``cfg.normalize_inputs`` is set, which keeps the product in [0, 1].
    """
    _, stack, ref = _stack(dwi_by_b)
    if cfg.normalize_inputs:
        peaks = stack.reshape(stack.shape[0], -1).max(axis=1)
        peaks[peaks <= 0] = 1.0
        stack = stack / peaks[:, None, None, None]
    prod = np.prod(stack, axis=0)
    out = _window_mean(prod, int(cfg.window_radius))
    meta = {"method": CDI_METHOD, "window_radius": int(cfg.window_radius),
            "normalize_inputs": bool(cfg.normalize_inputs)}
    return ref.with_data(out, "cdi", meta=meta)
