"""Layer primitives on channel-last batches ``(B, H, W, C)``."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def avreu(x: np.ndarray) -> np.ndarray:
    return np.abs(x)


def avreu_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return np.sign(x) * dy


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    B, H, W, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, H, W, C, k, k)
    return win.reshape(B * H * W, C * k * k)


def conv2d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-size cross-correlation with zero padding; ``w`` is ``(C_out, C_in, k, k)``."""
    B, H, W, _ = x.shape
    O = w.shape[0]
    cols = _im2col(x, w.shape[-1])
    return (cols @ w.reshape(O, -1).T).reshape(B, H, W, O)


def conv2d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray, need_dx: bool = True):
    B, H, W, C = x.shape
    O, _, k, _ = w.shape
    p = k // 2
    cols = _im2col(x, k)
    dyf = dy.reshape(B * H * W, O)
    dw = (dyf.T @ cols).reshape(w.shape)
    if not need_dx:
        return None, dw
    dcols = (dyf @ w.reshape(O, -1)).reshape(B, H, W, C, k, k)
    dxp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + H, j:j + W, :] += dcols[..., i, j]
    return dxp[:, p:p + H, p:p + W, :], dw


def _shifts(x: np.ndarray):
    """The nine 3x3-neighbourhood views of a reflect-padded batch, row-major window order."""
    H, W = x.shape[1:3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")
    return [xp[:, dy:dy + H, dx:dx + W, :] for dy in range(3) for dx in range(3)]


_MED9_NETWORK = (
    (1, 2), (4, 5), (7, 8), (0, 1), (3, 4), (6, 7), (1, 2), (4, 5), (7, 8),
    (0, 3), (5, 8), (4, 7), (3, 6), (1, 4), (2, 5), (4, 7), (4, 2), (6, 4), (4, 2),
)


def median_pool(x: np.ndarray) -> np.ndarray:
    """3x3 median, stride 1, reflection padding; output has the input's shape."""
    p = [v.copy() for v in _shifts(x)]
    for a, b in _MED9_NETWORK:
        lo = np.minimum(p[a], p[b])
        np.maximum(p[a], p[b], out=p[b])
        p[a] = lo
    return p[4]


def median_pool_backward(x: np.ndarray, med: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Route each output gradient to the window element holding the median.

    Ties go to the lowest window index (row-major over the 3x3 window).
    """
    views = _shifts(x)
    idx = np.full(x.shape, 8, dtype=np.int8)
    for k in range(8, -1, -1):
        idx[views[k] == med] = k
    B, H, W, C = x.shape
    gp = np.zeros((B, H + 2, W + 2, C), dtype=dy.dtype)
    for k in range(9):
        dyk, dxk = divmod(k, 3)
        gp[:, dyk:dyk + H, dxk:dxk + W, :] += np.where(idx == k, dy, 0.0)
    # fold reflected padding back onto its source rows/columns
    gp[:, 2, :, :] += gp[:, 0, :, :]
    gp[:, H - 1, :, :] += gp[:, H + 1, :, :]
    gp[:, :, 2, :] += gp[:, :, 0, :]
    gp[:, :, W - 1, :] += gp[:, :, W + 1, :]
    return gp[:, 1:H + 1, 1:W + 1, :]

