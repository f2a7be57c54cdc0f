"""Bivariate pair copulas: Gaussian, Clayton and independence.

Kernels are written against the generic functions of :mod:`vinevi.autodiff`, so
the same code evaluates on plain floats/arrays or records onto a tape when the
parameter (or an input) is a :class:`~vinevi.autodiff.Var`.

The Gaussian family is also exposed in normal-score space (``x = Phi^-1(u)``),
which is how the D-vine evaluates all-Gaussian trees without round-tripping
through the normal cdf.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .numerics import DomainError, make_rng

CLAMP = 1e-12
# tanh(raw) rounds to exactly 1.0 for raw >= ~19.1; shrinking by a hair keeps
# eta strictly inside (-1, 1) over the whole float range.
ETA_SCALE = 1.0 - 1e-10


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    CLAYTON = "clayton"
    INDEPENDENCE = "independence"


def natural_param(family: Family, raw):
    if family is Family.GAUSSIAN:
        return ETA_SCALE * ad.tanh(raw)
    if family is Family.CLAYTON:
        return ad.exp(raw)
    return 0.0


def raw_param(family: Family, natural: float) -> float:
    if family is Family.GAUSSIAN:
        if not -ETA_SCALE < natural < ETA_SCALE:
            raise DomainError(f"Gaussian copula parameter must lie in (-1, 1), got {natural}")
        return float(np.arctanh(natural / ETA_SCALE))
    if family is Family.CLAYTON:
        if not natural > 0:
            raise DomainError(f"Clayton parameter must be positive, got {natural}")
        return float(math.log(natural))
    return 0.0


# Gaussian kernels in normal-score space


def gauss_logc_scores(x, y, eta):
    one_m = 1.0 - eta * eta
    num = eta * eta * (x * x + y * y) - 2.0 * eta * x * y
    return -0.5 * ad.log(one_m) - num / (2.0 * one_m)


def gauss_h_scores(x, y, eta):
    """Normal score of h(u | v) given scores x of u and y of v."""
    return (x - eta * y) / ad.sqrt(1.0 - eta * eta)


def gauss_hinv_scores(xw, y, eta):
    return xw * ad.sqrt(1.0 - eta * eta) + eta * y


# Clayton kernels in uniform space


def clayton_logc(u, v, theta):
    lu, lv = ad.log(u), ad.log(v)
    s = ad.exp(-theta * lu) + ad.exp(-theta * lv) - 1.0
    return ad.log(1.0 + theta) + (-theta - 1.0) * (lu + lv) + (-2.0 - 1.0 / theta) * ad.log(s)


def clayton_h(u, v, theta):
    lv = ad.log(v)
    s = ad.exp(-theta * ad.log(u)) + ad.exp(-theta * lv) - 1.0
    return ad.exp((-theta - 1.0) * lv + (-1.0 / theta - 1.0) * ad.log(s))


def clayton_hinv(w, v, theta):
    lv = ad.log(v)
    # solve v^(-t-1) S^(-1/t-1) = w for S, then S = u^-t + v^-t - 1 for u
    s = ad.exp((-theta / (1.0 + theta)) * (ad.log(w) + (theta + 1.0) * lv))
    inner = s + 1.0 - ad.exp(-theta * lv)
    return ad.exp((-1.0 / theta) * ad.log(inner))


def _check_unit(*arrs):
    for a in arrs:
        a = np.asarray(ad.value(a), dtype=float)
        if np.any(~((a > 0.0) & (a < 1.0))):
            raise DomainError("copula arguments must lie strictly inside (0, 1)")


def _clamp(u):
    return ad.clip(u, CLAMP, 1.0 - CLAMP)


@dataclass(frozen=True)
class PairCopula:
    """A family tag plus its unconstrained parameter."""

    family: Family
    raw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.family is Family.INDEPENDENCE:
            object.__setattr__(self, "raw", 0.0)
        if not math.isfinite(self.raw):
            raise ValueError("raw parameter must be finite")

    @classmethod
    def gaussian(cls, eta: float) -> "PairCopula":
        return cls(Family.GAUSSIAN, raw_param(Family.GAUSSIAN, eta))

    @classmethod
    def clayton(cls, theta: float) -> "PairCopula":
        return cls(Family.CLAYTON, raw_param(Family.CLAYTON, theta))

    @classmethod
    def independence(cls) -> "PairCopula":
        return cls(Family.INDEPENDENCE)

    @property
    def param(self) -> float:
        """Natural-scale parameter (eta, theta, or 0 for independence)."""
        return float(natural_param(self.family, self.raw))

    def with_raw(self, raw: float) -> "PairCopula":
        return PairCopula(self.family, float(raw))

    def log_density(self, u, v):
        _check_unit(u, v)
        return log_density_raw(self.family, natural_param(self.family, self.raw), u, v)

    def h(self, u, v):
        """Conditional cdf h(u | v) = dC(u, v)/dv."""
        _check_unit(u, v)
        return h_raw(self.family, natural_param(self.family, self.raw), u, v)

    def h_inverse(self, w, v):
        _check_unit(w, v)
        return h_inverse_raw(self.family, natural_param(self.family, self.raw), w, v)

    def kendall_tau(self) -> float:
        if self.family is Family.GAUSSIAN:
            return 2.0 / math.pi * math.asin(self.param)
        if self.family is Family.CLAYTON:
            theta = self.param
            return theta / (theta + 2.0)
        return 0.0

    def sample(self, rng, size=None):
        """Draw ``(u, v)`` by inverting h on independent uniforms."""
        rng = make_rng(rng)
        w = _clamp(rng.random(size))
        v = _clamp(rng.random(size))
        return h_inverse_raw(self.family, natural_param(self.family, self.raw), w, v), v


# Uniform-space entry points with a natural (possibly taped) parameter. Inputs
# are clamped to [CLAMP, 1 - CLAMP] first.


def log_density_raw(family: Family, param, u, v):
    if family is Family.INDEPENDENCE:
        return np.zeros_like(np.asarray(ad.value(u), dtype=float))
    u, v = _clamp(u), _clamp(v)
    if family is Family.GAUSSIAN:
        return gauss_logc_scores(ad.normal_quantile(u), ad.normal_quantile(v), param)
    return clayton_logc(u, v, param)


def h_raw(family: Family, param, u, v):
    if family is Family.INDEPENDENCE:
        return u
    u, v = _clamp(u), _clamp(v)
    if family is Family.GAUSSIAN:
        return ad.normal_cdf(gauss_h_scores(ad.normal_quantile(u), ad.normal_quantile(v), param))
    return clayton_h(u, v, param)


def h_inverse_raw(family: Family, param, w, v):
    if family is Family.INDEPENDENCE:
        return w
    w, v = _clamp(w), _clamp(v)
    if family is Family.GAUSSIAN:
        return ad.normal_cdf(gauss_hinv_scores(ad.normal_quantile(w), ad.normal_quantile(v), param))
    return clayton_hinv(w, v, param)


def kendall_tau(c: PairCopula) -> float:
    return c.kendall_tau()


def sample_pair(c: PairCopula, rng, size=None):
    return c.sample(rng, size)
