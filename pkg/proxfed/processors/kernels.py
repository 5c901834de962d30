"""
Compiled inner loops.

The subgradient kernel runs up to 10^5 steps per prox subproblem, so it is
compiled with numba in nopython mode. nogil lets the engine's thread pool
solve several devices of a round at the same time.
"""
import logging
from typing import Tuple

import numpy as np

try:
    from numba import njit
except ImportError:
    raise ImportError("numba is required. Install with: pip install numba")

logger = logging.getLogger(__name__)

# Must match LossKind.code
KIND_QUADRATIC = 0
KIND_LOGISTIC = 1
KIND_SIGMOID_SQUARED = 2
KIND_ABSOLUTE = 3
KIND_PHASE_RETRIEVAL = 4


@njit(cache=True, nogil=True)
def _expit(x):
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def _slope(kind, u, y):
    if kind == KIND_QUADRATIC:
        return u - y
    if kind == KIND_LOGISTIC:
        return -y * _expit(-y * u)
    if kind == KIND_SIGMOID_SQUARED:
        s = _expit(u)
        return 2.0 * (s - y) * s * (1.0 - s)
    if kind == KIND_ABSOLUTE:
        r = u - y
        if r > 0.0:
            return 1.0
        if r < 0.0:
            return -1.0
        return 0.0
    r = u * u - y
    if r >= 0.0:
        return 2.0 * u
    return -2.0 * u


@njit(cache=True, nogil=True)
def _prox_subgradient(kind, features, labels, weights, center, eta, lam, K):
    n, p = features.shape
    w = center.copy()
    w_avg = np.zeros(p)
    g = np.empty(p)
    g_max = 0.0
    weight_sum = 0.0
    for k in range(1, K + 1):
        for j in range(p):
            g[j] = (w[j] - center[j]) / eta
        for i in range(n):
            u = 0.0
            for j in range(p):
                u += features[i, j] * w[j]
            c = weights[i] * _slope(kind, u, labels[i])
            if c != 0.0:
                for j in range(p):
                    g[j] += c * features[i, j]
        g_norm = 0.0
        for j in range(p):
            g_norm += g[j] * g[j]
        g_norm = np.sqrt(g_norm)
        if g_norm > g_max:
            g_max = g_norm

        # weights proportional to k
        weight_sum += k
        mix = k / weight_sum
        for j in range(p):
            w_avg[j] += mix * (w[j] - w_avg[j])

        step = 2.0 / (lam * (k + 1.0))
        for j in range(p):
            w[j] -= step * g[j]
    return w_avg, g_max


def prox_subgradient_kernel(kind_code: int, features: np.ndarray, labels: np.ndarray,
                            weights: np.ndarray, center: np.ndarray, eta: float,
                            lam: float, K: int) -> Tuple[np.ndarray, float]:
    """
    K subgradient steps on Q with gamma_k = 2/(lam (k+1)) and k-weighted averaging.

    Args:
        kind_code: LossKind.code of the loss
        features: n x p feature matrix
        labels: n labels
        weights: n example weights summing to one
        center: Prox center w0
        eta: Prox step
        lam: Strong convexity modulus of Q
        K: Number of steps (>= 1)

    Returns:
        Tuple of (weighted average iterate, max observed subgradient norm of Q)
    """
    return _prox_subgradient(int(kind_code),
                             np.ascontiguousarray(features, dtype=np.float64),
                             np.ascontiguousarray(labels, dtype=np.float64),
                             np.ascontiguousarray(weights, dtype=np.float64),
                             np.ascontiguousarray(center, dtype=np.float64),
                             float(eta), float(lam), int(K))
