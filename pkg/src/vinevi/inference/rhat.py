"""Split-R-hat over a sliding window of parameter snapshots."""

from __future__ import annotations

import math

import numpy as np

# Returned for scalars whose within-half variance is zero. Compares as
# "not below any threshold", so a frozen trajectory never counts as converged.
NOT_CONVERGED = math.inf


def split_rhat(window) -> np.ndarray:
    """Per-column split-R-hat of a (K, p) snapshot array, K even.

    W is the mean within-half sample variance, B = n * var(half means) and
    V = (n - 1)/n * W + B/n with n = K/2 draws per half.
    """
    x = np.asarray(window, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    K = x.shape[0]
    if K < 4 or K % 2:
        raise ValueError("window length must be even and at least 4")
    n = K // 2
    x = x - x[0]  # constant columns then give exactly zero variance
    halves = np.stack([x[:n], x[n:]])  # (2, n, p)
    W = halves.var(axis=1, ddof=1).mean(axis=0)
    B = n * halves.mean(axis=1).var(axis=0, ddof=1)
    V = (n - 1) / n * W + B / n
    out = np.full(x.shape[1], NOT_CONVERGED)
    ok = W > 0
    out[ok] = np.sqrt(V[ok] / W[ok])
    return out


class RhatMonitor:
    """Ring buffer of the last ``window`` snapshots, one every ``stride`` steps.

    Steps up to ``burn_in`` (default: one full window, ``window * stride``) are
    not recorded, so the first check happens after two windows' worth of steps.
    """

    def __init__(self, window: int = 400, stride: int = 10, threshold: float = 1.1, burn_in: int | None = None):
        if window < 4 or window % 2:
            raise ValueError("window must be even and >= 4")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.window, self.stride, self.threshold = window, stride, threshold
        self.burn_in = window * stride if burn_in is None else burn_in
        self._buf = None
        self._count = 0
        self.last = None

    @property
    def full(self) -> bool:
        return self._count >= self.window

    def record(self, step: int, params) -> bool:
        """Store a snapshot if ``step`` is on the stride; True when one was stored."""
        if step <= self.burn_in or step % self.stride:
            return False
        params = np.asarray(params, dtype=float)
        if self._buf is None:
            self._buf = np.empty((self.window, params.size))
        self._buf[self._count % self.window] = params
        self._count += 1
        return True

    def snapshots(self) -> np.ndarray:
        """Window contents in chronological order."""
        if self._buf is None:
            return np.empty((0, 0))
        if not self.full:
            return self._buf[: self._count].copy()
        i = self._count % self.window
        return np.concatenate([self._buf[i:], self._buf[:i]])

    def check(self) -> bool:
        if not self.full:
            return False
        self.last = split_rhat(self.snapshots())
        return bool(np.all(self.last < self.threshold))
