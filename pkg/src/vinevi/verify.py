"""Verification harness: exact-objective theorem checks and structural property suites.

Each check returns a manifest entry with its residual, tolerance and status.
Status ``expected-pass`` marks checks whose claim is a negative result (a
recovery that must fail); they count as passing when the failure is observed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .copulas import PairCopula
from .dvine import DVineFamily, implied_correlation, log_density, rosenblatt, sample
from .gaussian_analysis import (
    Direction,
    StepwiseObjective,
    forward_kl_tree_derivative,
    minimize_renyi_diagonal,
    renyi_fixed_point_residual,
    stepwise_exact_fit,
    true_partials,
)
from .inference import draw_eps, log_weights, vr_iwae_from_log_weights, vr_iwae_value_and_grad
from .models import DatasetSpec, GaussianDist, GaussianTarget, generate_dataset
from .numerics import make_rng, mvn_logpdf, sample_wishart

DEFAULT_SEED = 20240611
PASS, FAIL, EXPECTED_PASS = "pass", "fail", "expected-pass"


@dataclass
class Check:
    name: str
    claim: str
    residual: float
    tolerance: float
    passed: bool
    negative: bool = False  # the claim is that recovery fails
    seconds: float = 0.0

    @property
    def status(self) -> str:
        if not self.passed:
            return FAIL
        return EXPECTED_PASS if self.negative else PASS

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "claim": self.claim,
            "status": self.status,
            "residual": self.residual,
            "tolerance": self.tolerance,
            "comparison": "residual > tolerance" if self.negative else "residual < tolerance",
            "seconds": round(self.seconds, 3),
        }


def _below(name, claim, residual, tol):
    return Check(name, claim, float(residual), tol, bool(residual < tol))


def _random_gaussian(rng, d):
    prec = sample_wishart(d + 3, np.eye(d), rng)
    return GaussianDist(rng.normal(size=d), np.linalg.inv(prec))


def needle_posterior() -> GaussianDist:
    return generate_dataset(DatasetSpec("needle", 50, seed=1)).posterior


def correlated_target(quick: bool) -> GaussianDist:
    if not quick:
        return needle_posterior()
    R = np.array([[1.0, 0.9, 0.3], [0.9, 1.0, 0.6], [0.3, 0.6, 1.0]])
    s = np.array([0.5, 1.0, 2.0])
    return GaussianDist([1.0, -1.0, 0.5], R * np.outer(s, s))


# Theorem checks


def check_forward_recovery(rng, quick):
    dims = (3,) if quick else (3, 4, 5)
    count = 5 if quick else 20
    worst, stationarity = 0.0, 0.0
    fwd = StepwiseObjective(Direction.FORWARD_KL)
    for k in range(count):
        d = dims[k % len(dims)]
        target = _random_gaussian(rng, d)
        fit = stepwise_exact_fit(fwd, target, d - 1)
        worst = max(worst, np.max(np.abs(fit.nu - target.mean)), np.max(np.abs(fit.stds - target.stds)),
                    np.max(np.abs(fit.correlation - target.correlation)))
        for eta, rho in zip(fit.partials, true_partials(target)):
            stationarity = max(stationarity, np.max(np.abs(forward_kl_tree_derivative(eta, rho))))
    return [
        _below("forward_stepwise.forward_kl_recovery", f"forward-KL stepwise fit recovers (mean, stds, R) on {count} targets",
               worst, 1e-6),
        _below("forward_stepwise.tree_stationarity", "tree-t forward-KL derivative vanishes at the fit", stationarity, 1e-8),
    ]


def check_backward(rng, quick):
    d = 3 if quick else 4
    target = GaussianDist(rng.normal(size=d), np.diag(rng.uniform(0.5, 2.0, d)))
    bwd = StepwiseObjective(Direction.BACKWARD_KL)
    fit = stepwise_exact_fit(bwd, target, d - 1)
    res = max(np.max(np.abs(fit.correlation - np.eye(d))), np.max(np.abs(fit.stds - target.stds)),
              np.max(np.abs(fit.nu - target.mean)))
    out = [_below("backward_stepwise.backward_kl_independent", "backward-KL stepwise fit recovers an R=I target", res, 1e-8)]
    target = correlated_target(quick)
    for fixed, name in ((False, "backward_stepwise.backward_kl_correlated"), (True, "backward_stepwise.true_stds")):
        obj = StepwiseObjective(Direction.BACKWARD_KL, fix_stds_to_truth=fixed)
        fit = stepwise_exact_fit(obj, target, target.d - 1)
        err = float(np.max(np.abs(fit.correlation - target.correlation)))
        claim = "backward-KL stepwise fit does not recover R on a correlated target"
        if fixed:
            claim += " even with stds fixed to truth"
        out.append(Check(name, claim, err, 0.01, err > 0.01, negative=True))
    return out


def check_renyi(rng, quick):
    target = correlated_target(quick)
    out = []
    for alpha in (0.1, 0.5, 0.9):
        nu, var = minimize_renyi_diagonal(target, alpha)
        out.append(_below(f"renyi_diagonal.mean_match[alpha={alpha}]", "Renyi-optimal diagonal q matches the mean",
                           np.max(np.abs(nu - target.mean)), 1e-6))
        inside = bool(np.all((var > 1e-6) & (var < 1e6)))
        out.append(Check(f"renyi_diagonal.variance_bounds[alpha={alpha}]", "optimal variances lie in (1e-6, 1e6)",
                         float(np.max(np.abs(np.log10(var)))), 6.0, inside))
        res = np.max(np.abs(renyi_fixed_point_residual(var, target.cov, alpha)))
        out.append(_below(f"renyi_diagonal.fixed_point[alpha={alpha}]", "optimal variances satisfy the fixed-point equation",
                          res, 1e-6))
    return out


# Structural checks


def _random_gaussian_vine(rng, d, lim=0.9):
    etas = [rng.uniform(-lim, lim, d - t) for t in range(1, d)]
    return DVineFamily.gaussian(rng.normal(size=d), np.exp(rng.normal(scale=0.5, size=d)), etas)


def check_determinant(rng, quick):
    worst = 0.0
    for _ in range(20 if quick else 100):
        d = int(rng.integers(2, 4 if quick else 7))
        q = _random_gaussian_vine(rng, d)
        expect = math.prod(float(np.prod(1 - q.etas(t) ** 2)) for t in range(1, d))
        worst = max(worst, abs(np.linalg.det(implied_correlation(q)) / expect - 1))
    return [_below("vine.determinant_identity", "det R equals the product of (1 - eta^2)", worst, 1e-10)]


def check_vine_density(rng, quick):
    worst = 0.0
    for d in (2, 3):
        for _ in range(10):
            q = _random_gaussian_vine(rng, d)
            cov = implied_correlation(q) * np.outer(q.sigma, q.sigma)
            z = rng.normal(size=(20, d)) * q.sigma + np.asarray(q.mu)
            worst = max(worst, np.max(np.abs(log_density(q, z) - mvn_logpdf(z, np.asarray(q.mu), cov))))
    return [_below("vine.gaussian_density", "d=2/3 Gaussian vine densities match the MVN", worst, 1e-8)]


def check_rosenblatt(rng, quick):
    worst = 0.0
    for _ in range(5 if quick else 20):
        d = int(rng.integers(2, 4 if quick else 6))
        trees = []
        for t in range(1, d):
            trees.append(tuple(PairCopula.clayton(rng.uniform(0.5, 4)) if rng.random() < 0.5
                               else PairCopula.gaussian(rng.uniform(-0.8, 0.8)) for _ in range(d - t)))
        base = DVineFamily.mean_field(rng.normal(size=d), np.exp(rng.normal(scale=0.3, size=d)))
        q = DVineFamily(base.mu, base.log_sigma, tuple(trees))
        u = rng.uniform(0.01, 0.99, size=(50, d))
        worst = max(worst, np.max(np.abs(rosenblatt(q, sample(q, u)) - u)))
    return [_below("vine.rosenblatt_round_trip", "Rosenblatt(sample(u)) = u", worst, 1e-8)]


def check_copula_mass(rng, quick):
    grid = (np.arange(400) + 0.5) / 400
    s, t = (a.ravel() for a in np.meshgrid(grid, grid))
    worst = 0.0
    for c in (PairCopula.gaussian(0.5), PairCopula.gaussian(-0.7), PairCopula.clayton(1.0), PairCopula.clayton(3.0)):
        mass = float((np.exp(c.log_density(s * s, t * t)) * 4 * s * t).mean())
        worst = max(worst, abs(mass - 1))
    return [_below("copula.unit_mass", "pair-copula densities integrate to 1 (graded midpoint rule)", worst, 1e-3)]


_PRIMITIVES = {
    "exp": (ad.exp, (-3, 3)),
    "log": (ad.log, (0.05, 5)),
    "sqrt": (ad.sqrt, (0.05, 5)),
    "tanh": (ad.tanh, (-3, 3)),
    "atanh": (ad.atanh, (-0.95, 0.95)),
    "square": (ad.square, (-3, 3)),
    "neg": (ad.neg, (-3, 3)),
    "normal_cdf": (ad.normal_cdf, (-4, 4)),
    "normal_quantile": (ad.normal_quantile, (0.01, 0.99)),
    "normal_logpdf": (ad.normal_logpdf, (-4, 4)),
    "add": (ad.add, (0.5, 3)),
    "sub": (ad.sub, (0.5, 3)),
    "mul": (ad.mul, (0.5, 3)),
    "div": (ad.div, (0.5, 3)),
}
_BINARY = {"add", "sub", "mul", "div"}


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def check_autodiff(rng, quick):
    worst = 0.0
    for name, (f, (lo, hi)) in _PRIMITIVES.items():
        arity = 2 if name in _BINARY else 1
        for _ in range(10):
            x = rng.uniform(lo, hi, arity)
            tape = ad.Tape()
            vs = [tape.variable(v) for v in x]
            g = ad.gradient(tape, f(*vs), vs)
            for i in range(arity):
                h = 1e-6 * max(1.0, abs(x[i]))
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                fd = (float(f(*xp)) - float(f(*xm))) / (2 * h)
                worst = max(worst, _rel(float(g[i]), fd))
    return [_below("autodiff.primitives", "primitive gradients match central differences", worst, 1e-4)]


def _toy_target():
    return GaussianTarget([0.5, -0.3], [[1.0, 0.6], [0.6, 0.8]], log_evidence=-1.3)


def check_vr_iwae_gradient(rng, quick):
    m = _toy_target()
    worst = 0.0
    blocks = ["marginals", 1]
    for k in range(10):
        q = DVineFamily.gaussian(rng.normal(scale=0.5, size=2), np.exp(rng.normal(scale=0.3, size=2)),
                                 [[rng.uniform(-0.8, 0.8)]])
        alpha = (0.0, 0.1, 0.5, 1.0)[k % 4]
        eps = draw_eps(rng, 8, 2)
        _, g = vr_iwae_value_and_grad(q, m, alpha, blocks, eps)
        x0 = np.concatenate([q.get_block(b) for b in blocks])

        def f(x):
            qq = q.with_block("marginals", x[:4]).with_block(1, x[4:])
            return vr_iwae_from_log_weights(log_weights(qq, m, eps), alpha)

        for i in range(x0.size):
            h = 1e-6 * max(1.0, abs(x0[i]))
            e = np.zeros_like(x0)
            e[i] = h
            worst = max(worst, _rel(float(g[i]), (f(x0 + e) - f(x0 - e)) / (2 * h)))
    return [_below("vr_iwae.gradient", "reparameterized VR-IWAE gradient matches central differences", worst, 1e-4)]


def check_vr_iwae_identities(rng, quick):
    m = _toy_target()
    post = m.posterior
    q = DVineFamily.gaussian([0.3, 0.0], [0.9, 1.1], [[0.3]])
    worst_id = 0.0
    for _ in range(10):
        eps = draw_eps(rng, 1, 2)
        lw = log_weights(q, m, eps)
        worst_id = max(worst_id, abs(vr_iwae_from_log_weights(lw, 1.0) - lw[0]))
        eps = draw_eps(rng, 16, 2)
        lw = log_weights(q, m, eps)
        iwae = math.log(np.mean(np.exp(lw)))
        worst_id = max(worst_id, abs(vr_iwae_from_log_weights(lw, 0.0) - iwae))
    exact = DVineFamily.gaussian(post.mean, post.stds, [[post.correlation[0, 1]]])
    worst_ev = 0.0
    for alpha in (0.0, 0.1, 0.5, 0.9, 1.0):
        for n in (1, 4, 16):
            lw = log_weights(exact, m, draw_eps(rng, n, 2))
            worst_ev = max(worst_ev, abs(vr_iwae_from_log_weights(lw, alpha) - m.log_evidence))
    return [
        _below("vr_iwae.elbo_iwae_identities", "N=1/alpha=1 is the ELBO term and alpha=0 the IWAE bound", worst_id,
               1e-12),
        _below("vr_iwae.exact_posterior", "estimates equal log evidence when q is the posterior", worst_ev, 1e-10),
    ]


CHECKS = (
    check_forward_recovery,
    check_backward,
    check_renyi,
    check_determinant,
    check_vine_density,
    check_rosenblatt,
    check_copula_mass,
    check_autodiff,
    check_vr_iwae_gradient,
    check_vr_iwae_identities,
)


def run_checks(seed: int = DEFAULT_SEED, quick: bool = False, checks=None) -> dict:
    """Run every check with its own generator derived from ``seed``."""
    checks = CHECKS if checks is None else checks
    entries = []
    seeds = np.random.SeedSequence(seed).spawn(len(checks))
    t0 = time.perf_counter()
    for fn, ss in zip(checks, seeds):
        t = time.perf_counter()
        try:
            results = fn(make_rng(ss), quick)
        except Exception as exc:  # a crashing check is a failing check
            results = [Check(fn.__name__, f"raised {type(exc).__name__}: {exc}", math.nan, math.nan, False)]
        dt = time.perf_counter() - t
        for r in results:
            r.seconds = dt / len(results)
            entries.append(r.to_dict())
    failing = [e["name"] for e in entries if e["status"] == FAIL]
    return {"all_passed": not failing, "failing": failing, "checks": entries,
            "wall_clock_s": time.perf_counter() - t0, "quick": quick}
