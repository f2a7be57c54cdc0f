"""Dense small-matrix linear algebra, normal-distribution functions and seeded RNGs."""

from __future__ import annotations

import math

import numpy as np
from scipy import linalg, special

LOG_2PI = math.log(2.0 * math.pi)


class NotSPD(np.linalg.LinAlgError):
    """Raised when a matrix that must be symmetric positive definite is not."""


class DomainError(ValueError):
    """Raised when an argument lies outside a function's domain."""


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator. Accepts an int, a SeedSequence or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(seed: int, n: int) -> list[int]:
    """Derive ``n`` independent 63-bit sub-seeds from a master seed."""
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for s in ss.spawn(n)]


def normal_cdf(x):
    return special.ndtr(x)


def normal_quantile(u):
    u_arr = np.asarray(u, dtype=float)
    if np.any((u_arr <= 0.0) | (u_arr >= 1.0)) or np.any(np.isnan(u_arr)):
        raise DomainError("normal_quantile requires u in (0, 1)")
    return special.ndtri(u)


def normal_pdf(x):
    return np.exp(-0.5 * np.square(x)) / math.sqrt(2.0 * math.pi)


def normal_logpdf(x):
    return -0.5 * np.square(x) - 0.5 * LOG_2PI


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def cholesky(a) -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix."""
    a = _as_matrix(a)
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        raise NotSPD("matrix is not symmetric")
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotSPD(str(exc)) from exc
    if np.any(np.diag(L) <= 0.0):
        raise NotSPD("non-positive pivot")
    return L


def spd_inverse_and_logdet(a) -> tuple[np.ndarray, float]:
    """Inverse and log-determinant of an SPD matrix via its Cholesky factor."""
    L = cholesky(a)
    n = L.shape[0]
    L_inv = linalg.solve_triangular(L, np.eye(n), lower=True)
    inv = L_inv.T @ L_inv
    inv = 0.5 * (inv + inv.T)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return inv, logdet


def correlation_from_covariance(sigma) -> tuple[np.ndarray, np.ndarray]:
    """Split a covariance into its correlation matrix and standard deviations."""
    sigma = _as_matrix(sigma)
    cholesky(sigma)
    stds = np.sqrt(np.diag(sigma))
    R = sigma / np.outer(stds, stds)
    np.fill_diagonal(R, 1.0)
    return R, stds


def partial_correlation(r, i: int, j: int, cond=()) -> float:
    """Partial correlation of variables ``i`` and ``j`` given the index set ``cond``.

    Computed from the inverse of the sub-matrix over ``(i, j) + cond``; with an
    empty conditioning set this is just ``r[i, j]``.
    """
    r = _as_matrix(r)
    cond = [int(k) for k in cond]
    if i == j or i in cond or j in cond:
        raise ValueError("i, j must be distinct and not in the conditioning set")
    if not cond:
        return float(r[i, j])
    idx = [i, j] + cond
    sub = r[np.ix_(idx, idx)]
    try:
        prec, _ = spd_inverse_and_logdet(sub)
    except NotSPD as exc:
        raise NotSPD("singular conditioning block") from exc
    return float(-prec[0, 1] / math.sqrt(prec[0, 0] * prec[1, 1]))


def sample_wishart(nu: float, scale, rng) -> np.ndarray:
    """Draw W ~ Wishart(nu, scale) by the Bartlett decomposition."""
    scale = _as_matrix(scale)
    d = scale.shape[0]
    if nu < d:
        raise ValueError(f"degrees of freedom {nu} < dimension {d}")
    rng = make_rng(rng)
    L = cholesky(scale)
    A = np.zeros((d, d))
    for i in range(d):
        A[i, i] = math.sqrt(rng.chisquare(nu - i))
        A[i, :i] = rng.standard_normal(i)
    LA = L @ A
    W = LA @ LA.T
    return 0.5 * (W + W.T)


def logsumexp(a, axis=None):
    return special.logsumexp(a, axis=axis)


def mvn_logpdf(x, mean, cov) -> np.ndarray:
    """Log-density of N(mean, cov) at the rows of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean = np.asarray(mean, dtype=float)
    prec, logdet = spd_inverse_and_logdet(cov)
    diff = x - mean
    quad = np.einsum("ni,ij,nj->n", diff, prec, diff)
    return -0.5 * (quad + logdet + mean.size * LOG_2PI)
