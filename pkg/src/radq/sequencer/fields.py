"""Stochastically realized receptive fields.

A field bank for one layer is fixed standard-normal base noise, smoothed
in-plane by a truncated Gaussian kernel of bandwidth ``psi`` (reflection at
the field border), scaled to unit RMS per field and multiplied by the layer
gain and a fixed ``1/sqrt(fan_in)``.  Only ``psi`` and ``gain`` are learned;
the noise is a pure function of ``(seed, layer, field index)``.
"""
from __future__ import annotations

import numpy as np

PSI_MIN = 1e-3
PSI_MAX = 5.0


class PsiBoundsError(ValueError):
    pass


def check_psi(psi: float) -> None:
    if not (PSI_MIN <= psi <= PSI_MAX):
        raise PsiBoundsError(f"psi={psi!r} outside [{PSI_MIN}, {PSI_MAX}]")


def field_noise(seed: int, layer: int, n_fields: int, shape: tuple[int, ...]) -> np.ndarray:
    """Base noise, one independent stream per (seed, layer, field index)."""
    out = np.empty((n_fields,) + tuple(shape))
    for j in range(n_fields):
        out[j] = np.random.default_rng([int(seed), int(layer), j]).standard_normal(shape)
    return out


def _reflect(i: int, n: int) -> int:
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def smoothing_matrix(psi: float, size: int = 5, radius: int | None = None):
    """1D smoothing operator ``M`` (size x size) and its derivative ``dM/dpsi``.

    ``(M @ v)[i] = sum_t k(t) v[reflect(i + t)]`` with ``k`` a Gaussian of
    standard deviation ``psi`` truncated to ``|t| <= radius`` and renormalized.
    """
    r = size // 2 if radius is None else radius
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-t ** 2 / (2 * psi ** 2))
    dg = g * t ** 2 / psi ** 3
    s, ds = g.sum(), dg.sum()
    k = g / s
    dk = dg / s - g * ds / s ** 2
    M = np.zeros((size, size))
    dM = np.zeros((size, size))
    for i in range(size):
        for ti, off in enumerate(range(-r, r + 1)):
            j = _reflect(i + off, size)
            M[i, j] += k[ti]
            dM[i, j] += dk[ti]
    return M, dM


def smooth(noise: np.ndarray, psi: float, with_grad: bool = False):
    """Smooth the last two (spatial) axes of ``noise`` with the separable kernel."""
    M, dM = smoothing_matrix(psi, noise.shape[-1])
    F = np.einsum("ij,...jk,lk->...il", M, noise, M, optimize=True)
    if not with_grad:
        return F
    dF = (np.einsum("ij,...jk,lk->...il", dM, noise, M, optimize=True)
          + np.einsum("ij,...jk,lk->...il", M, noise, dM, optimize=True))
    return F, dF


def _rms(F: np.ndarray) -> np.ndarray:
    axes = tuple(range(1, F.ndim))
    return np.sqrt(np.mean(F ** 2, axis=axes, keepdims=True))


def realize_fields(noise: np.ndarray, psi: float, gain: float):
    """Weight bank ``(C_out, C_in, k, k)`` plus the pieces backward needs."""
    check_psi(psi)
    F = smooth(noise, psi)
    r = _rms(F)
    U = F / r
    scale = 1.0 / np.sqrt(np.prod(noise.shape[1:]))
    return gain * scale * U, (U, r, scale)


def field_param_grads(dW: np.ndarray, noise: np.ndarray, psi: float, gain: float, cache) -> tuple[float, float]:
    """Chain ``dLoss/dW`` back to ``(dLoss/dpsi, dLoss/dgain)``."""
    U, r, scale = cache
    dgain = scale * float(np.sum(dW * U))
    dU = gain * scale * dW
    axes = tuple(range(1, dW.ndim))
    dF = (dU - U * np.mean(dU * U, axis=axes, keepdims=True)) / r
    _, dFdpsi = smooth(noise, psi, with_grad=True)
    return float(np.sum(dF * dFdpsi)), dgain


def lag1_autocorrelation(fields: np.ndarray) -> tuple[float, float, int]:
    """Pearson correlation between horizontally adjacent weights, its standard error, and pair count."""
    a = fields[..., :, :-1].reshape(-1)
    b = fields[..., :, 1:].reshape(-1)
    n = a.size
    r = float(np.corrcoef(a, b)[0, 1])
    se = (1 - r ** 2) / np.sqrt(n - 1)
    return r, float(se), n
