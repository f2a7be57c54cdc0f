"""Target densities, exact Gaussian posteriors and the simulation data generators."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import autodiff as ad
from .copulas import PairCopula
from .dvine import DVineFamily, sample as vine_sample
from .numerics import (
    LOG_2PI,
    NotSPD,
    cholesky,
    correlation_from_covariance,
    make_rng,
    mvn_logpdf,
    sample_wishart,
    spd_inverse_and_logdet,
)

BETA_TRUE = (10.0, -10.0, 5.0, 3.0)

NEEDLE_C = np.array(
    [
        [1.0, 0.9, 0.14, -0.85],
        [0.9, 1.0, -0.2, -0.9],
        [0.14, -0.2, 1.0, -0.1],
        [-0.85, -0.9, -0.1, 1.0],
    ]
)

WISHART_C1 = np.array(
    [
        [1.0, -0.8590, -0.8749, -0.6122],
        [-0.8590, 1.0, 0.9154, 0.8862],
        [-0.8749, 0.9154, 1.0, 0.6948],
        [-0.6122, 0.8862, 0.6948, 1.0],
    ]
)

WISHART_C2 = np.array(
    [
        [1.0, -0.6, -0.0371, 0.5559],
        [-0.6, 1.0, 0.7, 0.9066],
        [-0.0371, 0.7, 1.0, -0.5],
        [0.5559, 0.9066, -0.5, 1.0],
    ]
)


class GaussianDist:
    """N(mean, cov) with cached inverse, log-determinant and correlation split."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float).copy()
        self.cov = np.asarray(cov, dtype=float).copy()
        if self.mean.ndim != 1 or self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("mean must be a vector and cov a matching square matrix")
        self.cov = 0.5 * (self.cov + self.cov.T)
        cholesky(self.cov)
        self.mean.setflags(write=False)
        self.cov.setflags(write=False)

    @property
    def d(self) -> int:
        return self.mean.size

    @cached_property
    def _inv_logdet(self):
        return spd_inverse_and_logdet(self.cov)

    @property
    def precision(self) -> np.ndarray:
        return self._inv_logdet[0]

    @property
    def logdet(self) -> float:
        return self._inv_logdet[1]

    @cached_property
    def _corr_std(self):
        return correlation_from_covariance(self.cov)

    @property
    def correlation(self) -> np.ndarray:
        return self._corr_std[0]

    @property
    def stds(self) -> np.ndarray:
        return self._corr_std[1]

    def logpdf(self, x):
        return mvn_logpdf(x, self.mean, self.cov)

    def sample(self, rng, n: int) -> np.ndarray:
        rng = make_rng(rng)
        L = cholesky(self.cov)
        return self.mean + rng.standard_normal((n, self.d)) @ L.T

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}


def _quadratic_node(cols, mean, precision):
    """-1/2 (z - m)' P (z - m) over columns that may be taped."""
    d = len(cols)
    vals = [np.asarray(ad.value(c), dtype=float) for c in cols]
    diff = np.stack(np.broadcast_arrays(*[v - m for v, m in zip(vals, mean)]))
    pd = precision @ diff  # (d, N)
    value = -0.5 * np.einsum("in,in->n", diff, pd)
    if not any(isinstance(c, ad.Var) for c in cols):
        return value
    tape = next(c.tape for c in cols if isinstance(c, ad.Var))
    parents, partials = [], []
    for i in range(d):
        if isinstance(cols[i], ad.Var):
            parents.append(cols[i].index)
            partials.append(-pd[i])
    return tape._push(value, tuple(parents), tuple(partials), check=True)


class TargetModel:
    """Unnormalized log p(x, z) whose posterior is an exact Gaussian.

    ``log_joint_columns`` takes the d coordinates as separate entries (arrays
    over particles, or tape variables) so it can sit on an autodiff tape.
    """

    d: int

    @property
    def posterior(self) -> GaussianDist:
        raise NotImplementedError

    @property
    def log_evidence(self) -> float:
        raise NotImplementedError

    def log_joint(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self.log_joint_columns([z[:, j] for j in range(self.d)])

    def log_joint_columns(self, cols):
        post = self.posterior
        quad = _quadratic_node(cols, post.mean, post.precision)
        const = self.log_evidence - 0.5 * (self.d * LOG_2PI + post.logdet)
        return ad.add(quad, const)


class GaussianTarget(TargetModel):
    """p(x, z) = exp(log_evidence) * N(z; mean, cov)."""

    def __init__(self, mean, cov, log_evidence: float = 0.0):
        self._post = GaussianDist(mean, cov)
        self._log_ev = float(log_evidence)
        self.d = self._post.d

    @property
    def posterior(self) -> GaussianDist:
        return self._post

    @property
    def log_evidence(self) -> float:
        return self._log_ev


class RegressionTarget(TargetModel):
    """Bayesian linear regression: beta ~ N(0, prior_var I), y_i ~ N(x_i' beta, noise_sd^2)."""

    def __init__(self, design, response, prior_var: float = 1.0, noise_sd: float = 1.0):
        X = np.atleast_2d(np.asarray(design, dtype=float))
        y = np.asarray(response, dtype=float).ravel()
        if X.shape[0] < 1:
            raise ValueError("need at least one observation")
        if X.shape[0] != y.size:
            raise ValueError("design and response lengths differ")
        if not prior_var > 0 or not noise_sd > 0:
            raise ValueError("prior_var and noise_sd must be positive")
        self.X, self.y = X, y
        self.prior_var = float(prior_var)
        self.noise_sd = float(noise_sd)
        self.d = X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def joint_log_density(self, beta) -> float:
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.d,):
            raise ValueError(f"beta must have length {self.d}")
        prior = -0.5 * (self.d * math.log(2 * math.pi * self.prior_var) + beta @ beta / self.prior_var)
        r = (self.y - self.X @ beta) / self.noise_sd
        lik = -0.5 * (self.n * math.log(2 * math.pi * self.noise_sd**2) + r @ r)
        return float(prior + lik)

    def grad_log_joint(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        return -beta / self.prior_var + self.X.T @ (self.y - self.X @ beta) / self.noise_sd**2

    @cached_property
    def posterior(self) -> GaussianDist:
        s2 = self.noise_sd**2
        prec = np.eye(self.d) / self.prior_var + self.X.T @ self.X / s2
        try:
            cov, _ = spd_inverse_and_logdet(prec)
        except NotSPD as exc:
            raise NotSPD("posterior precision is singular") from exc
        mean = cov @ self.X.T @ self.y / s2
        return GaussianDist(mean, cov)

    @cached_property
    def log_evidence(self) -> float:
        cov = self.prior_var * self.X @ self.X.T + self.noise_sd**2 * np.eye(self.n)
        return float(mvn_logpdf(self.y, np.zeros(self.n), cov)[0])


def conjugate_posterior(m: TargetModel) -> GaussianDist:
    return m.posterior


def log_evidence(m: TargetModel) -> float:
    return m.log_evidence


class DatasetKind(str, enum.Enum):
    INDEPENDENCE = "independence"
    NEEDLE = "needle"
    WISHART_GAUSSIAN = "wishart-gaussian"
    VINE_CLAYTON = "vine-clayton"


@dataclass
class DatasetSpec:
    kind: DatasetKind
    n: int
    seed: int
    prior_var: float = 1.0
    beta: tuple = BETA_TRUE
    correlation: list | None = None  # explicit C for Gaussian kinds
    wishart_df: float = 5.0
    wishart_base: str = "C1"  # C1 or C2, or an explicit matrix in ``correlation``
    clayton_prob: float = 0.6
    clayton_theta: tuple = (1.0, 8.0)
    gaussian_eta: tuple = (0.0, 1.0)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = DatasetKind(self.kind)
        if self.n < 1:
            raise ValueError("n must be positive")
        self.beta = tuple(float(b) for b in self.beta)

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetSpec":
        doc = dict(doc)
        known = set(cls.__dataclass_fields__) - {"extra"}
        extra = {k: doc.pop(k) for k in list(doc) if k not in known}
        return cls(**doc, extra=extra)

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind.value,
            "n": self.n,
            "seed": self.seed,
            "prior_var": self.prior_var,
            "beta": list(self.beta),
        }
        if self.kind in (DatasetKind.INDEPENDENCE, DatasetKind.NEEDLE):
            out["correlation"] = self.resolved_correlation().tolist()
        elif self.kind is DatasetKind.WISHART_GAUSSIAN:
            out.update(wishart_df=self.wishart_df, wishart_base=self.wishart_base)
            if self.correlation is not None:
                out["correlation"] = self.correlation
        else:
            out.update(
                clayton_prob=self.clayton_prob,
                clayton_theta=list(self.clayton_theta),
                gaussian_eta=list(self.gaussian_eta),
            )
        return out

    def resolved_correlation(self) -> np.ndarray:
        d = len(self.beta)
        if self.correlation is not None:
            return np.asarray(self.correlation, dtype=float)
        if self.kind is DatasetKind.INDEPENDENCE:
            return np.eye(d)
        if self.kind is DatasetKind.NEEDLE:
            return NEEDLE_C.copy()
        if self.kind is DatasetKind.WISHART_GAUSSIAN:
            return {"C1": WISHART_C1, "C2": WISHART_C2}[self.wishart_base].copy()
        raise ValueError(f"{self.kind.value} has no fixed correlation matrix")


def _check_correlation(C: np.ndarray, d: int):
    if C.shape != (d, d):
        raise ValueError(f"correlation must be {d}x{d}")
    if not np.allclose(np.diag(C), 1.0) or not np.allclose(C, C.T):
        raise ValueError("not a correlation matrix")
    try:
        cholesky(C)
    except NotSPD as exc:
        raise ValueError("correlation matrix is not positive definite") from exc


def wishart_correlation(base: np.ndarray, df: float, rng) -> np.ndarray:
    """Precision P ~ W(df, base^-1); returns the correlation matrix of P^-1."""
    base_inv, _ = spd_inverse_and_logdet(base)
    P = sample_wishart(df, base_inv, rng)
    cov, _ = spd_inverse_and_logdet(P)
    return correlation_from_covariance(cov)[0]


def random_vine_clayton(d: int, rng, prob=0.6, theta=(1.0, 8.0), eta=(0.0, 1.0)) -> DVineFamily:
    """Full D-vine with N(0, 1) marginals and Clayton/Gaussian pair copulas."""
    rng = make_rng(rng)
    trees = []
    for t in range(1, d):
        tree = []
        for _ in range(d - t):
            if rng.random() < prob:
                tree.append(PairCopula.clayton(rng.uniform(*theta)))
            else:
                # keep |eta| a hair inside 1 for the tanh transform
                tree.append(PairCopula.gaussian(min(rng.uniform(*eta), 0.999999)))
        trees.append(tuple(tree))
    base = DVineFamily.standard(d)
    return DVineFamily(base.mu, base.log_sigma, tuple(trees))


def generate_dataset(spec: DatasetSpec, rng=None) -> RegressionTarget:
    """Draw the design matrix of ``spec`` and set y = X beta (noise-free)."""
    rng = make_rng(spec.seed if rng is None else rng)
    beta = np.asarray(spec.beta)
    d = beta.size
    if spec.kind is DatasetKind.VINE_CLAYTON:
        vine = random_vine_clayton(d, rng, spec.clayton_prob, spec.clayton_theta, spec.gaussian_eta)
        eps = np.clip(rng.random((spec.n, d)), 1e-12, 1 - 1e-12)
        X = vine_sample(vine, eps)
    else:
        if spec.kind is DatasetKind.WISHART_GAUSSIAN and spec.correlation is None:
            C = wishart_correlation(spec.resolved_correlation(), spec.wishart_df, rng)
        else:
            C = spec.resolved_correlation()
        _check_correlation(C, d)
        X = rng.standard_normal((spec.n, d)) @ cholesky(C).T
    return RegressionTarget(X, X @ beta, prior_var=spec.prior_var)


def dataset_to_csv(m: RegressionTarget) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{j + 1}" for j in range(m.d)] + ["y"])
    for row, y in zip(m.X, m.y):
        w.writerow([repr(float(v)) for v in row] + [repr(float(y))])
    return buf.getvalue()


def dataset_from_csv(text: str, prior_var: float = 1.0) -> RegressionTarget:
    rows = list(csv.reader(io.StringIO(text)))
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return RegressionTarget(data[:, :-1], data[:, -1], prior_var=prior_var)


def sidecar(spec: DatasetSpec, extra: dict | None = None) -> str:
    doc = {"schema": "vinevi.dataset/1", "spec": spec.to_dict()}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)
