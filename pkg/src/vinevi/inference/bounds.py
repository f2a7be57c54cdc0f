"""VR-IWAE bound estimates and their reparameterized gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .. import autodiff as ad
from ..dvine import DVineFamily, reparam_sample, sample_with_log_density
from ..models import TargetModel
from ..numerics import make_rng

ALPHA_MAX = 0.999


@dataclass(frozen=True)
class VrIwaeConfig:
    alpha: float = 0.1
    n_particles: int = 16
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= ALPHA_MAX or self.alpha == 1.0):
            raise ValueError(f"alpha must be in [0, {ALPHA_MAX}] or exactly 1, got {self.alpha}")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")


def draw_eps(rng, n: int, d: int) -> np.ndarray:
    """Base uniforms strictly inside (0, 1)."""
    u = make_rng(rng).random((n, d))
    return np.clip(u, 1e-300, None)


def log_weights(q: DVineFamily, m: TargetModel, eps) -> np.ndarray:
    """log p(x, z_j) - log q(z_j) for z_j = sample(q, eps_j)."""
    z, logq = sample_with_log_density(q, np.atleast_2d(eps))
    return np.asarray(m.log_joint(z), dtype=float) - logq


def vr_iwae_from_log_weights(logw, alpha: float) -> float:
    logw = np.asarray(logw, dtype=float)
    if alpha == 1.0:
        return float(np.mean(logw))
    a = 1.0 - alpha
    return float((special.logsumexp(a * logw) - math.log(logw.size)) / a)


def normalized_weights(logw, alpha: float) -> np.ndarray:
    logw = np.asarray(logw, dtype=float)
    if alpha == 1.0:
        return np.full(logw.size, 1.0 / logw.size)
    return special.softmax((1.0 - alpha) * logw)


def vr_iwae_estimate(q: DVineFamily, m: TargetModel, cfg: VrIwaeConfig, rng) -> float:
    eps = draw_eps(rng, cfg.n_particles, q.d)
    return vr_iwae_from_log_weights(log_weights(q, m, eps), cfg.alpha)


def vr_iwae_value_and_grad(q: DVineFamily, m: TargetModel, alpha: float, active, eps, tape=None):
    """Bound estimate and its gradient for the blocks in ``active`` on shared ``eps``.

    The gradient is sum_j w~_j grad log w_j with the self-normalized weights
    w~ held constant.
    """
    tape = ad.Tape() if tape is None else tape
    tape.reset()
    rs = reparam_sample(q, eps, tape, active)
    logw = ad.sub(m.log_joint_columns(rs.z), rs.log_q)
    lw = np.asarray(ad.value(ad.stop_gradient(logw)), dtype=float)
    wt = normalized_weights(lw, alpha)
    surrogate = ad.sum(ad.mul(wt, logw))
    grad = ad.gradient(tape, surrogate, rs.leaves)
    return vr_iwae_from_log_weights(lw, alpha), grad


def vr_iwae_gradient(q, m, cfg: VrIwaeConfig, active, rng, tape=None) -> np.ndarray:
    eps = draw_eps(rng, cfg.n_particles, q.d)
    return vr_iwae_value_and_grad(q, m, cfg.alpha, active, eps, tape)[1]
