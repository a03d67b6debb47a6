"""Hot numeric loops with a numba path and a pure-numpy path.

Every kernel exists twice: ``*_jit`` (numba, when importable) and
``*_numpy``. The public name points at the jitted version unless numba is
unavailable or ``METAFACE_DISABLE_NUMBA`` is set. Both versions perform the
same floating-point operations in the same order where the algorithm has a
sequential dependency (low-pass recursion, DTW accumulation), so their
results are bit-identical there; the lip cost matrix may differ in the last
ulp because numpy reduces with pairwise summation.
"""

import math

import numpy as np

from ._accel import NUMBA_ENABLED, njit

__all__ = [
    "NUMBA_ENABLED",
    "lowpass",
    "lip_cost_matrix",
    "dtw_accumulate",
]


# --- first-order low-pass filter -------------------------------------------

def lowpass_numpy(x, coeff):
    """Filter ``x`` [T, C] along time with y_t = c*y_{t-1} + (1-c)*x_t.

    The first frame starts from the stationary distribution, so unit-variance
    white input gives a constant per-frame variance (1-c)/(1+c).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.empty_like(x)
    y[0] = x[0] * math.sqrt((1.0 - coeff) / (1.0 + coeff))
    for t in range(1, x.shape[0]):
        y[t] = coeff * y[t - 1] + (1.0 - coeff) * x[t]
    return y


def _lowpass_loop(x, coeff):
    n, c = x.shape
    y = np.empty((n, c))
    s0 = math.sqrt((1.0 - coeff) / (1.0 + coeff))
    for k in range(c):
        y[0, k] = x[0, k] * s0
    for t in range(1, n):
        for k in range(c):
            y[t, k] = coeff * y[t - 1, k] + (1.0 - coeff) * x[t, k]
    return y


_lowpass_jit = njit(_lowpass_loop)


def lowpass_jit(x, coeff):
    return _lowpass_jit(np.ascontiguousarray(x, dtype=np.float64), float(coeff))


# --- lip cost matrix ---------------------------------------------------------

def lip_cost_matrix_numpy(pred, gt):
    """C[i, j] = mean over vertices of |pred[i, v] - gt[j, v]|_2.

    ``pred`` is [Tp, V, 3], ``gt`` is [Tg, V, 3].
    """
    diff = pred[:, None, :, :] - gt[None, :, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1)).mean(axis=-1)


def _lip_cost_loop(pred, gt):
    tp, nv, nd = pred.shape
    tg = gt.shape[0]
    out = np.empty((tp, tg))
    for i in range(tp):
        for j in range(tg):
            acc = 0.0
            for v in range(nv):
                sq = 0.0
                for d in range(nd):
                    e = pred[i, v, d] - gt[j, v, d]
                    sq += e * e
                acc += math.sqrt(sq)
            out[i, j] = acc / nv
    return out


_lip_cost_jit = njit(_lip_cost_loop)


def lip_cost_matrix_jit(pred, gt):
    return _lip_cost_jit(
        np.ascontiguousarray(pred, dtype=np.float64), np.ascontiguousarray(gt, dtype=np.float64)
    )


# --- DTW accumulation --------------------------------------------------------
#
# Paths start at (0, 0), end at (n-1, m-1) and use steps (1,0), (0,1), (1,1).
# The optimum is lexicographic in (accumulated cost, path length): among
# minimum-cost paths the shortest wins. Both quantities are additive along a
# path, so the order is compatible with the recursion.

def dtw_accumulate_numpy(cost):
    """Return (optimal accumulated cost, length of that path) for ``cost`` [n, m].

    Vectorised over anti-diagonals; cells on diagonal k only read k-1 and k-2.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    ln = np.zeros((n + 1, m + 1))
    acc[0, 0] = 0.0
    for k in range(n + m - 1):
        i = np.arange(max(0, k - m + 1), min(k, n - 1) + 1)
        j = k - i
        ci = np.stack([acc[i, j + 1], acc[i + 1, j], acc[i, j]])
        li = np.stack([ln[i, j + 1], ln[i + 1, j], ln[i, j]])
        best = ci.min(axis=0)
        # up, left, diagonal; equal cost resolved by the shorter path
        blen = np.where(ci == best, li, np.inf).min(axis=0)
        acc[i + 1, j + 1] = cost[i, j] + best
        ln[i + 1, j + 1] = blen + 1.0
    return float(acc[n, m]), int(ln[n, m])


def _dtw_loop(cost):
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    ln = np.zeros((n + 1, m + 1))
    acc[0, 0] = 0.0
    for i in range(n):
        for j in range(m):
            b = acc[i, j + 1]
            bl = ln[i, j + 1]
            c = acc[i + 1, j]
            cl = ln[i + 1, j]
            if c < b or (c == b and cl < bl):
                b = c
                bl = cl
            c = acc[i, j]
            cl = ln[i, j]
            if c < b or (c == b and cl < bl):
                b = c
                bl = cl
            acc[i + 1, j + 1] = cost[i, j] + b
            ln[i + 1, j + 1] = bl + 1.0
    return acc[n, m], ln[n, m]


_dtw_jit = njit(_dtw_loop)


def dtw_accumulate_jit(cost):
    total, length = _dtw_jit(np.ascontiguousarray(cost, dtype=np.float64))
    return float(total), int(length)


if NUMBA_ENABLED:
    lowpass = lowpass_jit
    lip_cost_matrix = lip_cost_matrix_jit
    dtw_accumulate = dtw_accumulate_jit
else:
    lowpass = lowpass_numpy
    lip_cost_matrix = lip_cost_matrix_numpy
    dtw_accumulate = dtw_accumulate_numpy
