"""Hand-crafted texture sequencer (``texture-baseline-v1``).

Per channel: six first-order statistics followed by five grey-level
co-occurrence features at each of four offsets, for 4 x (6 + 5 x 4) = 104
values.
"""
from __future__ import annotations

import numpy as np

from .candidates import CHANNELS, Candidate

METHOD = "texture-baseline-v1"
LEVELS = 16
HIST_BINS = 32
OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))  # (dy, dx)
FIRST_ORDER = ("mean", "std", "skewness", "kurtosis", "median", "entropy")
GLCM = ("contrast", "correlation", "energy", "homogeneity", "entropy")


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def first_order(patch: np.ndarray) -> np.ndarray:
    """Mean, population std, skewness, excess kurtosis, median and 32-bin histogram entropy (bits).

    Skewness and kurtosis are 0 for a constant patch.
    """
    x = np.asarray(patch, dtype=np.float64).ravel()
    mu = x.mean()
    d = x - mu
    var = np.mean(d ** 2)
    if var > 0:
        skew = np.mean(d ** 3) / var ** 1.5
        kurt = np.mean(d ** 4) / var ** 2 - 3.0
    else:
        skew = kurt = 0.0
    lo, hi = x.min(), x.max()
    if hi > lo:
        counts, _ = np.histogram(x, bins=HIST_BINS, range=(lo, hi))
        ent = _entropy_bits(counts / x.size)
    else:
        ent = 0.0
    return np.array([mu, np.sqrt(var), skew, kurt, np.median(x), ent])


def quantize(patch: np.ndarray, levels: int = LEVELS) -> np.ndarray:
    """Integer grey levels 0..levels-1 over the patch's own min-max range (all 0 if constant)."""
    x = np.asarray(patch, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.int64)
    q = np.floor((x - lo) / (hi - lo) * levels).astype(np.int64)
    return np.clip(q, 0, levels - 1)


def glcm(q: np.ndarray, offset: tuple[int, int], levels: int = LEVELS) -> np.ndarray:
    """Symmetric, normalised co-occurrence matrix of a quantised 2D patch."""
    dy, dx = offset
    H, W = q.shape
    ys = slice(max(0, -dy), H - max(0, dy))
    xs = slice(max(0, -dx), W - max(0, dx))
    a = q[ys, xs]
    b = q[ys.start + dy:ys.stop + dy, xs.start + dx:xs.stop + dx]
    c = np.bincount((a * levels + b).ravel(), minlength=levels * levels).reshape(levels, levels)
    c = (c + c.T).astype(np.float64)
    return c / c.sum()


def glcm_features(patch: np.ndarray, offset: tuple[int, int], levels: int = LEVELS) -> np.ndarray:
    """Contrast, correlation, energy, homogeneity and entropy (bits) of the patch's GLCM.

    Correlation is 1 when the grey levels have zero variance.
    """
    p = glcm(quantize(patch, levels), offset, levels)
    i, j = np.indices(p.shape)
    mu = float((i * p).sum())  # symmetric matrix: row and column marginals agree
    var = float(((i - mu) ** 2 * p).sum())
    corr = float(((i - mu) * (j - mu) * p).sum() / var) if var > 0 else 1.0
    return np.array([
        float(((i - j) ** 2 * p).sum()),
        corr,
        float((p ** 2).sum()),
        float((p / (1.0 + np.abs(i - j))).sum()),
        _entropy_bits(p),
    ])


def _offset_tag(o):
    return f"{o[0]}_{o[1]}".replace("-", "m")


def feature_names() -> list[str]:
    names = []
    for ch in CHANNELS:
        names += [f"{ch}_{f}" for f in FIRST_ORDER]
        for o in OFFSETS:
            names += [f"{ch}_glcm{_offset_tag(o)}_{f}" for f in GLCM]
    return names


def texture_sequence(candidate: Candidate | np.ndarray) -> np.ndarray:
    """The 104-value texture sequence for one candidate (or a (4, P, P) patch)."""
    patch = candidate.patch if isinstance(candidate, Candidate) else np.asarray(candidate)
    if patch.ndim != 3 or patch.shape[0] != len(CHANNELS):
        raise ValueError(f"expected a ({len(CHANNELS)}, P, P) patch, got {patch.shape}")
    parts = []
    for ch in patch:
        parts.append(first_order(ch))
        parts.extend(glcm_features(ch, o) for o in OFFSETS)
    out = np.concatenate(parts)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite texture feature")
    return out


def texture_batch(cands) -> np.ndarray:
    return np.stack([texture_sequence(c) for c in cands])
