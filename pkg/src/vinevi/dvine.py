"""Truncated D-vine distributions with Gaussian marginals.

Tree ``t`` (1-based) holds ``d - t`` pair copulas; edge ``j`` (0-based) links
variables ``j`` and ``j + t`` given the ones in between. Copula data are kept in
two tables per tree::

    A[t][j] = F(j     | j+1, ..., j+t-1)
    B[t][j] = F(j + t | j+1, ..., j+t-1)

Every datum is carried lazily in either uniform or normal-score form, so runs of
Gaussian pair copulas never leave score space. Conversions clamp the uniform at
``copulas.CLAMP``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import special

from . import autodiff as ad
from .copulas import (
    CLAMP,
    Family,
    PairCopula,
    clayton_h,
    clayton_hinv,
    clayton_logc,
    gauss_h_scores,
    gauss_hinv_scores,
    gauss_logc_scores,
    natural_param,
)
from .numerics import LOG_2PI, spd_inverse_and_logdet

MARGINALS = "marginals"


class _Datum:
    """A copula datum stored as a uniform ``u`` and/or a normal score ``x``."""

    __slots__ = ("_u", "_x")

    def __init__(self, u=None, x=None):
        self._u = u
        self._x = x

    def u(self):
        if self._u is None:
            self._u = ad.clip(ad.normal_cdf(self._x), CLAMP, 1.0 - CLAMP)
        return self._u

    def x(self):
        if self._x is None:
            self._x = ad.normal_quantile(ad.clip(self._u, CLAMP, 1.0 - CLAMP))
        return self._x


def _edge_h(family, param, a: _Datum, b: _Datum) -> _Datum:
    if family is Family.INDEPENDENCE:
        return a
    if family is Family.GAUSSIAN:
        return _Datum(x=gauss_h_scores(a.x(), b.x(), param))
    return _Datum(u=clayton_h(a.u(), b.u(), param))


def _edge_hinv(family, param, w: _Datum, b: _Datum) -> _Datum:
    if family is Family.INDEPENDENCE:
        return w
    if family is Family.GAUSSIAN:
        return _Datum(x=gauss_hinv_scores(w.x(), b.x(), param))
    return _Datum(u=clayton_hinv(w.u(), b.u(), param))


def _edge_logc(family, param, a: _Datum, b: _Datum):
    if family is Family.INDEPENDENCE:
        return 0.0
    if family is Family.GAUSSIAN:
        return gauss_logc_scores(a.x(), b.x(), param)
    return clayton_logc(a.u(), b.u(), param)


@dataclass(frozen=True)
class DVineFamily:
    """Immutable truncated D-vine with Gaussian marginals ``N(mu_j, sigma_j^2)``."""

    mu: tuple
    log_sigma: tuple
    trees: tuple = field(default=())

    def __post_init__(self):
        mu = tuple(float(m) for m in self.mu)
        ls = tuple(float(s) for s in self.log_sigma)
        if len(mu) < 1 or len(mu) != len(ls):
            raise ValueError("mu and log_sigma must be non-empty and of equal length")
        if not all(math.isfinite(v) for v in mu + ls):
            raise ValueError("marginal parameters must be finite")
        d = len(mu)
        trees = tuple(tuple(PairCopula(c.family, c.raw) for c in tree) for tree in self.trees)
        if len(trees) > d - 1:
            raise ValueError(f"at most {d - 1} trees allowed for d={d}")
        for t, tree in enumerate(trees, start=1):
            if len(tree) != d - t:
                raise ValueError(f"tree {t} must have {d - t} pair copulas, got {len(tree)}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "log_sigma", ls)
        object.__setattr__(self, "trees", trees)

    # construction

    @classmethod
    def mean_field(cls, mu, sigma) -> "DVineFamily":
        return cls(tuple(mu), tuple(np.log(np.asarray(sigma, dtype=float))))

    @classmethod
    def standard(cls, d: int) -> "DVineFamily":
        return cls((0.0,) * d, (0.0,) * d)

    @classmethod
    def gaussian(cls, mu, sigma, etas: Sequence[Sequence[float]]) -> "DVineFamily":
        """All-Gaussian vine from natural-scale partial correlations per tree."""
        base = cls.mean_field(mu, sigma)
        trees = tuple(tuple(PairCopula.gaussian(e) for e in tree) for tree in etas)
        return DVineFamily(base.mu, base.log_sigma, trees)

    @property
    def d(self) -> int:
        return len(self.mu)

    @property
    def tau(self) -> int:
        return len(self.trees)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_sigma))

    def etas(self, t: int) -> np.ndarray:
        """Natural-scale parameters of tree ``t``."""
        return np.array([c.param for c in self.trees[t - 1]])

    def is_gaussian(self) -> bool:
        return all(c.family is not Family.CLAYTON for tree in self.trees for c in tree)

    # structural edits

    def extend(self, new_tree: Sequence[PairCopula]) -> "DVineFamily":
        if self.tau + 1 > self.d - 1:
            raise ValueError("vine already has all d-1 trees")
        if len(new_tree) != self.d - self.tau - 1:
            raise ValueError(
                f"tree {self.tau + 1} needs {self.d - self.tau - 1} pair copulas, got {len(new_tree)}"
            )
        return DVineFamily(self.mu, self.log_sigma, self.trees + (tuple(new_tree),))

    def truncate(self, tau_new: int) -> "DVineFamily":
        if not 0 <= tau_new <= self.tau:
            raise ValueError(f"cannot truncate tau={self.tau} vine to {tau_new}")
        return DVineFamily(self.mu, self.log_sigma, self.trees[:tau_new])

    # parameter blocks: "marginals" -> (mu, log_sigma); int t -> raw params of tree t

    def block_names(self) -> list:
        return [MARGINALS] + list(range(1, self.tau + 1))

    def get_block(self, name) -> np.ndarray:
        if name == MARGINALS:
            return np.array(self.mu + self.log_sigma)
        return np.array([c.raw for c in self._tree(name)])

    def with_block(self, name, values) -> "DVineFamily":
        values = np.asarray(values, dtype=float)
        if name == MARGINALS:
            if values.shape != (2 * self.d,):
                raise ValueError("marginal block has length 2d")
            return DVineFamily(tuple(values[: self.d]), tuple(values[self.d :]), self.trees)
        tree = self._tree(name)
        if values.shape != (len(tree),):
            raise ValueError(f"tree {name} block has length {len(tree)}")
        trees = list(self.trees)
        trees[name - 1] = tuple(c.with_raw(r) for c, r in zip(tree, values))
        return DVineFamily(self.mu, self.log_sigma, tuple(trees))

    def _tree(self, t):
        if not isinstance(t, (int, np.integer)) or not 1 <= t <= self.tau:
            raise KeyError(f"no parameter block {t!r}")
        return self.trees[t - 1]

    # serialization

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "tau": self.tau,
            "marginals": [[m, float(s)] for m, s in zip(self.mu, self.sigma)],
            "trees": [[{"family": c.family.value, "param": c.param} for c in tree] for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DVineFamily":
        marg = np.asarray(doc["marginals"], dtype=float).reshape(-1, 2)
        trees = []
        for tree in doc.get("trees", []):
            cs = []
            for e in tree:
                fam = Family(e["family"])
                if fam is Family.GAUSSIAN:
                    cs.append(PairCopula.gaussian(e["param"]))
                elif fam is Family.CLAYTON:
                    cs.append(PairCopula.clayton(e["param"]))
                else:
                    cs.append(PairCopula.independence())
            trees.append(tuple(cs))
        q = cls.mean_field(marg[:, 0], marg[:, 1])
        q = DVineFamily(q.mu, q.log_sigma, tuple(trees))
        if "d" in doc and doc["d"] != q.d or "tau" in doc and doc["tau"] != q.tau:
            raise ValueError("inconsistent d/tau in vine document")
        return q

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DVineFamily":
        return cls.from_dict(json.loads(text))


# Parameter views. ``_params`` returns per-coordinate (mu, log_sigma, sigma) and
# per-edge natural parameters; entries of active blocks become tape leaves.


@dataclass
class _Params:
    mu: list
    log_sigma: list
    sigma: list
    fam: list  # fam[t][j], t 0-based
    nat: list  # nat[t][j]
    leaves: list


def _normalize_active(active) -> list:
    if active is None:
        return []
    if isinstance(active, (str, int, np.integer)):
        return [active]
    return list(active)


def _params(q: DVineFamily, tape: ad.Tape | None = None, active=None) -> _Params:
    active = _normalize_active(active)
    for name in active:
        if name != MARGINALS:
            q._tree(name)
    if active and tape is None:
        raise ValueError("active blocks need a tape")
    leaves = []
    mu, ls = list(q.mu), list(q.log_sigma)
    raws = [[c.raw for c in tree] for tree in q.trees]
    for name in active:
        if name == MARGINALS:
            mu = [tape.variable(m) for m in q.mu]
            ls = [tape.variable(s) for s in q.log_sigma]
            leaves.extend(mu + ls)
        else:
            raws[name - 1] = [tape.variable(r) for r in raws[name - 1]]
            leaves.extend(raws[name - 1])
    sigma = [ad.exp(s) for s in ls]
    fam = [[c.family for c in tree] for tree in q.trees]
    nat = [[natural_param(f, r) for f, r in zip(ft, rt)] for ft, rt in zip(fam, raws)]
    return _Params(mu, ls, sigma, fam, nat, leaves)


def _sample_core(p: _Params, d: int, tau: int, eps_scores):
    """Inverse Rosenblatt in copula space, plus log q of the result.

    ``eps_scores[k]`` is the normal score of the k-th base uniform. Returns the
    per-coordinate normal scores of the vine uniforms and the log-density of the
    sampled point (copula part + marginal part).
    """
    A: dict = {}
    B: dict = {}
    xs = []
    logq = 0.0
    for k in range(d):
        v = _Datum(x=eps_scores[k])
        top = min(tau, k)
        for m in range(top, 0, -1):
            j = k - m
            v = _edge_hinv(p.fam[m - 1][j], p.nat[m - 1][j], v, A[m, j])
            B[m, j] = v
        A[1, k] = v
        xs.append(v.x())
        for m in range(1, top + 1):
            j = k - m
            f, th = p.fam[m - 1][j], p.nat[m - 1][j]
            logq = logq + _edge_logc(f, th, A[m, j], B[m, j])
            if m + 1 <= tau:
                A[m + 1, j] = _edge_h(f, th, A[m, j], B[m, j])
    for k in range(d):
        logq = logq + ad.normal_logpdf(xs[k]) - p.log_sigma[k]
    return xs, logq


def _copula_data(p: _Params, d: int, tau: int, scores):
    """Forward h-recursion from the marginal normal scores; fills A and B."""
    A = {(1, j): _Datum(x=scores[j]) for j in range(d - 1)}
    B = {(1, j): _Datum(x=scores[j + 1]) for j in range(d - 1)}
    for t in range(1, tau):
        for j in range(d - t - 1):
            A[t + 1, j] = _edge_h(p.fam[t - 1][j], p.nat[t - 1][j], A[t, j], B[t, j])
            B[t + 1, j] = _edge_h(p.fam[t - 1][j + 1], p.nat[t - 1][j + 1], B[t, j + 1], A[t, j + 1])
    return A, B


def _as_eps_matrix(eps, d):
    eps = np.asarray(eps, dtype=float)
    single = eps.ndim == 1
    eps = np.atleast_2d(eps)
    if eps.shape[1] != d:
        raise ValueError(f"expected {d} columns, got {eps.shape[1]}")
    if np.any(~((eps > 0.0) & (eps < 1.0))):
        raise ValueError("base uniforms must lie strictly inside (0, 1)")
    return eps, single


def _as_z_matrix(z, d):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != d:
        raise ValueError(f"expected {d} columns, got {z.shape[1]}")
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    return z, single


def log_density(q: DVineFamily, z) -> np.ndarray | float:
    """Log-density at a point (length-d vector) or at the rows of an (n, d) array."""
    z, single = _as_z_matrix(z, q.d)
    p = _params(q)
    scores = [(z[:, j] - p.mu[j]) / p.sigma[j] for j in range(q.d)]
    out = np.zeros(z.shape[0])
    for j in range(q.d):
        out += ad.normal_logpdf(scores[j]) - p.log_sigma[j]
    A, B = _copula_data(p, q.d, q.tau, scores)
    for t in range(1, q.tau + 1):
        for j in range(q.d - t):
            out = out + _edge_logc(p.fam[t - 1][j], p.nat[t - 1][j], A[t, j], B[t, j])
    return float(out[0]) if single else out


def copula_log_terms(q: DVineFamily, z) -> dict:
    """Per-edge log copula densities ``{(t, j): array}`` on the copula data of ``z``."""
    z, _ = _as_z_matrix(z, q.d)
    p = _params(q)
    scores = [(z[:, j] - p.mu[j]) / p.sigma[j] for j in range(q.d)]
    A, B = _copula_data(p, q.d, q.tau, scores)
    return {
        (t, j): np.broadcast_to(
            np.asarray(_edge_logc(p.fam[t - 1][j], p.nat[t - 1][j], A[t, j], B[t, j]), dtype=float),
            (z.shape[0],),
        ).copy()
        for t in range(1, q.tau + 1)
        for j in range(q.d - t)
    }


def sample(q: DVineFamily, eps) -> np.ndarray:
    """Map base uniforms (a vector or rows of an (n, d) array) to vine samples."""
    eps, single = _as_eps_matrix(eps, q.d)
    p = _params(q)
    xs, _ = _sample_core(p, q.d, q.tau, [special.ndtri(eps[:, k]) for k in range(q.d)])
    z = np.column_stack([p.mu[k] + p.sigma[k] * np.asarray(xs[k]) for k in range(q.d)])
    return z[0] if single else z


def sample_with_log_density(q: DVineFamily, eps):
    """Samples and their log-density, sharing the copula data of the sampler."""
    eps, single = _as_eps_matrix(eps, q.d)
    p = _params(q)
    xs, logq = _sample_core(p, q.d, q.tau, [special.ndtri(eps[:, k]) for k in range(q.d)])
    z = np.column_stack([p.mu[k] + p.sigma[k] * np.asarray(xs[k]) for k in range(q.d)])
    logq = np.broadcast_to(np.asarray(logq, dtype=float), (eps.shape[0],)).copy()
    return (z[0], float(logq[0])) if single else (z, logq)


def rosenblatt(q: DVineFamily, z) -> np.ndarray:
    """Forward Rosenblatt transform: the inverse of :func:`sample`."""
    z, single = _as_z_matrix(z, q.d)
    p = _params(q)
    scores = [(z[:, j] - p.mu[j]) / p.sigma[j] for j in range(q.d)]
    A, B = _copula_data(p, q.d, q.tau, scores)
    cols = [special.ndtr(scores[0])]
    for k in range(1, q.d):
        m = min(q.tau, k)
        if m == 0:
            cols.append(special.ndtr(scores[k]))
            continue
        j = k - m
        # F(k | k-m, ..., k-1) = h(B_m[j] | A_m[j])
        e = _edge_h(p.fam[m - 1][j], p.nat[m - 1][j], B[m, j], A[m, j])
        cols.append(np.asarray(e.u(), dtype=float) * np.ones(z.shape[0]))
    out = np.column_stack(cols)
    return out[0] if single else out


@dataclass
class ReparamSample:
    """Taped reparameterized draw: per-coordinate z, log q(z), and the leaves."""

    z: list
    log_q: object
    leaves: list


def reparam_sample(q: DVineFamily, eps, tape: ad.Tape, active=MARGINALS) -> ReparamSample:
    """Reparameterized samples recorded on ``tape``.

    ``active`` names the parameter blocks registered as leaves: ``"marginals"``,
    a tree index, or an iterable of those. Everything else enters as constants.
    Leaves follow the order of ``active`` and, within a block, the order of
    :meth:`DVineFamily.get_block`.
    """
    eps, _ = _as_eps_matrix(eps, q.d)
    p = _params(q, tape, active)
    xs, logq = _sample_core(p, q.d, q.tau, [special.ndtri(eps[:, k]) for k in range(q.d)])
    z = [ad.add(p.mu[k], ad.mul(p.sigma[k], xs[k])) for k in range(q.d)]
    return ReparamSample(z, logq, p.leaves)


def implied_correlation(q: DVineFamily) -> np.ndarray:
    """Correlation matrix of an all-Gaussian vine via the partial-correlation recursion."""
    if not q.is_gaussian():
        raise ValueError("implied correlation needs Gaussian (or independence) pair copulas")
    etas = [q.etas(t) for t in range(1, q.tau + 1)]
    return correlation_from_partials(q.d, etas)


def correlation_from_partials(d: int, etas: Sequence[Sequence[float]]) -> np.ndarray:
    """Assemble a correlation matrix from D-vine partial correlations (missing trees = 0)."""
    R = np.eye(d)
    for t in range(1, d):
        eta_t = np.asarray(etas[t - 1], dtype=float) if t - 1 < len(etas) else np.zeros(d - t)
        for i in range(d - t):
            eta = float(eta_t[i])
            if t == 1:
                R[i, i + 1] = R[i + 1, i] = eta
                continue
            S = list(range(i + 1, i + t))
            inv, _ = spd_inverse_and_logdet(R[np.ix_(S, S)])
            r1, r2 = R[S, i], R[S, i + t]
            a = r1 @ inv @ r2
            b = max(1.0 - r1 @ inv @ r1, 0.0) * max(1.0 - r2 @ inv @ r2, 0.0)
            R[i, i + t] = R[i + t, i] = a + eta * math.sqrt(b)
    return R


def vine_partials(R: np.ndarray) -> list:
    """D-vine partial correlations of a correlation matrix, per tree."""
    from .numerics import partial_correlation

    d = R.shape[0]
    return [
        np.array([partial_correlation(R, i, i + t, range(i + 1, i + t)) for i in range(d - t)])
        for t in range(1, d)
    ]


def implied_covariance(q: DVineFamily) -> np.ndarray:
    s = q.sigma
    return implied_correlation(q) * np.outer(s, s)


def gaussian_entropy(cov) -> float:
    _, logdet = spd_inverse_and_logdet(cov)
    return 0.5 * (np.shape(cov)[0] * (1.0 + LOG_2PI) + logdet)


def block_leaves(q: DVineFamily, active: Iterable) -> int:
    """Number of scalar parameters in the given blocks."""
    return sum(len(q.get_block(b)) for b in _normalize_active(active))
