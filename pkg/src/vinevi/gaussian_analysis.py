"""Closed-form Gaussian divergences, exact stepwise fits and evaluation metrics.

The stepwise fits minimize exact objectives numerically (damped Newton with
finite-difference derivatives) instead of plugging in known optima, so the
recovered parameters can be compared against the closed forms independently.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .dvine import correlation_from_partials, vine_partials
from .models import GaussianDist
from .numerics import NotSPD, spd_inverse_and_logdet


class NonConvergence(RuntimeError):
    pass


def _as_dist(p) -> GaussianDist:
    if isinstance(p, GaussianDist):
        return p
    mean, cov = p
    return GaussianDist(mean, cov)


def kl_gaussians(p, q) -> float:
    """KL(p || q) for Gaussians given as GaussianDist or (mean, cov)."""
    p, q = _as_dist(p), _as_dist(q)
    if p.d != q.d:
        raise ValueError("dimension mismatch")
    diff = p.mean - q.mean
    val = 0.5 * (
        np.trace(q.precision @ p.cov) - p.d - p.logdet + q.logdet + diff @ q.precision @ diff
    )
    return max(float(val), 0.0)


def renyi_gaussians(q, p, alpha: float) -> float:
    """Renyi divergence R_alpha(q || p) of order alpha in (0, 1)."""
    q, p = _as_dist(q), _as_dist(p)
    if q.d != p.d:
        raise ValueError("dimension mismatch")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    mix = alpha * p.cov + (1.0 - alpha) * q.cov
    try:
        mix_inv, mix_logdet = spd_inverse_and_logdet(mix)
    except NotSPD as exc:
        raise NotSPD("mixture covariance is not SPD") from exc
    diff = q.mean - p.mean
    quad = 0.5 * alpha * diff @ mix_inv @ diff
    logratio = mix_logdet - (1.0 - alpha) * q.logdet - alpha * p.logdet
    return max(float(quad - logratio / (2.0 * (alpha - 1.0))), 0.0)


def renyi_fixed_point_residual(psi_diag, sigma, alpha: float) -> np.ndarray:
    """diag(Psi) - diag(Phi^-1) with Phi = alpha Psi^-1 + (1 - alpha) Sigma^-1."""
    psi_diag = np.asarray(psi_diag, dtype=float)
    if np.any(psi_diag <= 0):
        raise ValueError("psi_diag must be positive")
    sigma_inv, _ = spd_inverse_and_logdet(sigma)
    phi = alpha * np.diag(1.0 / psi_diag) + (1.0 - alpha) * sigma_inv
    phi_inv, _ = spd_inverse_and_logdet(phi)
    return psi_diag - np.diag(phi_inv)


# Numerical minimization


def _fd_grad(f, x, h):
    # five-point stencil: O(h^4) truncation lets h stay large against rounding
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        g[i] = (8 * (f(x + e) - f(x - e)) - (f(x + 2 * e) - f(x - 2 * e))) / (12 * h[i])
    return g


def _fd_hess(f, x, h):
    n = x.size
    H = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * h[i] * h[j])
    return H


def _backtrack(f, x, fx, step):
    t = 1.0
    while t > 1e-12:
        xn = x + t * step
        try:
            fn = f(xn)
        except (NotSPD, ValueError, FloatingPointError):
            fn = math.inf
        if fn <= fx:
            return xn, fn
        t *= 0.5
    return None, None


def newton_minimize(f, x0, tol: float = 1e-10, max_iter: int = 200, grad_tol: float = 1e-9):
    """Damped Newton with finite-difference gradient and Hessian.

    Steps are Levenberg-damped until the Hessian is positive definite, then
    backtracked until the objective decreases. Converged when the step shrinks
    below ``tol`` (infinity norm) or stops improving the objective, with the
    gradient below ``grad_tol``.
    """
    x = np.asarray(x0, dtype=float).copy()
    if x.size == 0:
        return x
    fx = f(x)
    for _ in range(max_iter):
        hg = 1e-3 * np.maximum(1.0, np.abs(x))
        g = _fd_grad(f, x, hg)
        H = _fd_hess(f, x, 1e-4 * np.maximum(1.0, np.abs(x)))
        lam = 0.0
        while True:
            try:
                L = np.linalg.cholesky(H + lam * np.eye(x.size))
                break
            except np.linalg.LinAlgError:
                lam = max(1e-8, 10 * lam)
        step = -np.linalg.solve(L.T, np.linalg.solve(L, g))
        # below rounding noise the objective cannot confirm a decrease; trust the model
        if -g @ step < 64 * np.finfo(float).eps * max(1.0, abs(fx)):
            xn = x + step
            fn = f(xn)
        else:
            xn, fn = _backtrack(f, x, fx, step)
            if xn is None:
                if np.max(np.abs(g)) < grad_tol:
                    return x
                raise NonConvergence("line search failed")
        dx = xn - x
        stalled = fx - fn <= 1e-15 * abs(fx)
        x, fx = xn, fn
        if np.max(np.abs(dx)) < tol or stalled:
            if np.max(np.abs(_fd_grad(f, x, hg))) < grad_tol:
                return x
    raise NonConvergence(f"no convergence in {max_iter} Newton iterations")


# Exact stepwise fits


class Direction(str, enum.Enum):
    FORWARD_KL = "forward-kl"
    BACKWARD_KL = "backward-kl"
    RENYI = "renyi"


@dataclass(frozen=True)
class StepwiseObjective:
    direction: Direction
    fix_stds_to_truth: bool = False
    alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.direction is Direction.RENYI and not (self.alpha is not None and 0 < self.alpha < 1):
            raise ValueError("Renyi objective needs alpha in (0, 1)")

    def value(self, target: GaussianDist, q: GaussianDist) -> float:
        if self.direction is Direction.FORWARD_KL:
            return kl_gaussians(target, q)
        if self.direction is Direction.BACKWARD_KL:
            return kl_gaussians(q, target)
        return renyi_gaussians(q, target, self.alpha)


@dataclass
class ExactFit:
    nu: np.ndarray
    stds: np.ndarray
    partials: list
    correlation: np.ndarray
    stage_values: list = field(default_factory=list)

    @property
    def cov(self) -> np.ndarray:
        return self.correlation * np.outer(self.stds, self.stds)

    def dist(self) -> GaussianDist:
        return GaussianDist(self.nu, self.cov)


def stepwise_exact_fit(obj: StepwiseObjective, target, tau: int) -> ExactFit:
    """Stage 0 over (nu, stds) under independence, then one tree at a time."""
    target = _as_dist(target)
    d = target.d
    if not 0 <= tau <= d - 1:
        raise ValueError(f"tau must be in [0, {d - 1}]")
    values = []

    def q_of(nu, stds, partials):
        R = correlation_from_partials(d, partials)
        return GaussianDist(nu, R * np.outer(stds, stds))

    if obj.fix_stds_to_truth:
        stds = target.stds.copy()

        def f0(x):
            return obj.value(target, q_of(x, stds, []))

        nu = newton_minimize(f0, np.zeros(d))
    else:

        def f0(x):
            return obj.value(target, q_of(x[:d], np.exp(x[d:]), []))

        x = newton_minimize(f0, np.zeros(2 * d))
        nu, stds = x[:d], np.exp(x[d:])
    values.append(obj.value(target, q_of(nu, stds, [])))

    partials: list = []
    for t in range(1, tau + 1):

        def ft(x, t=t):
            return obj.value(target, q_of(nu, stds, partials + [np.tanh(x)]))

        x = newton_minimize(ft, np.zeros(d - t))
        partials.append(np.tanh(x))
        values.append(obj.value(target, q_of(nu, stds, partials)))
    return ExactFit(nu, stds, partials, correlation_from_partials(d, partials), values)


def minimize_renyi_diagonal(target, alpha: float):
    """Best diagonal Gaussian under R_alpha(q || target): returns (nu, variances)."""
    fit = stepwise_exact_fit(StepwiseObjective(Direction.RENYI, alpha=alpha), target, 0)
    return fit.nu, fit.stds**2


def forward_kl_tree_derivative(eta, rho):
    """Derivative of the forward KL in a tree parameter, earlier trees at truth."""
    eta = np.asarray(eta, dtype=float)
    return (1 + eta**2) / (1 - eta**2) ** 2 * (eta - np.asarray(rho, dtype=float))


def true_partials(target) -> list:
    return vine_partials(_as_dist(target).correlation)


# Metrics


class RelativeKL(dict):
    """alpha -> relative excess KL; ``degenerate`` marks absolute differences."""

    degenerate: bool = False


def delta_kl_rel(kl_values: dict) -> RelativeKL:
    """(KL_a - KL_min) / |KL_min|; absolute differences when |KL_min| < 1e-12."""
    if not kl_values:
        raise ValueError("need at least one KL value")
    a_min = min(kl_values, key=lambda a: kl_values[a])
    kmin = kl_values[a_min]
    out = RelativeKL()
    out.degenerate = abs(kmin) < 1e-12
    scale = 1.0 if out.degenerate else abs(kmin)
    for a, v in kl_values.items():
        out[a] = (v - kmin) / scale
    return out


def mean_rel_rmse_std(true_stds, est_stds) -> float:
    true_stds = np.asarray(true_stds, dtype=float)
    est_stds = np.asarray(est_stds, dtype=float)
    if true_stds.shape != est_stds.shape:
        raise ValueError("length mismatch")
    if np.any(true_stds <= 0):
        raise ValueError("true stds must be positive")
    return float(np.mean(np.abs(true_stds - est_stds) / true_stds))
