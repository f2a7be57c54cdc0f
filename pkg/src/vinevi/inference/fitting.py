"""Stepwise vine fitting, the mean-field fit and the GC-VI alternating baseline."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import autodiff as ad
from ..copulas import Family, PairCopula
from ..dvine import MARGINALS, DVineFamily
from ..models import TargetModel
from ..numerics import make_rng
from .bounds import VrIwaeConfig, draw_eps, vr_iwae_value_and_grad
from .optimizers import make_optimizer
from .rhat import RhatMonitor

CONVERGED = "Converged"
MAX_ITERS = "MaxItersExceeded"
GLOBAL_CRITERION = "GlobalCriterion"
MAX_TREE = "MaxTree"


class MaxItersExceeded(RuntimeError):
    """Raised only by callers that ask for strict convergence."""


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr_marginals: float = 0.01
    lr_copulas: float = 0.005

    def make(self, block):
        return make_optimizer(self.kind, self.lr_marginals if block == MARGINALS else self.lr_copulas)


@dataclass(frozen=True)
class StopConfig:
    rhat_threshold: float = 1.1
    window: int = 400
    stride: int = 10
    max_iters: int = 50_000
    eta_threshold: float = 0.1
    tau_cutoff: float = 2.0 / math.pi * math.asin(0.1)
    retain_trigger_tree: bool = False
    max_tree: int | None = None
    average_window: bool = True

    def monitor(self) -> RhatMonitor:
        return RhatMonitor(self.window, self.stride, self.rhat_threshold)


@dataclass
class StageResult:
    block: object
    family: DVineFamily
    iterations: int
    status: str
    bound: float
    rhat: list | None = None

    def summary(self) -> dict:
        return {
            "block": self.block,
            "iterations": self.iterations,
            "status": self.status,
            "bound": self.bound,
            "max_rhat": None if self.rhat is None else float(np.max(self.rhat)),
        }


def _get(q: DVineFamily, active) -> np.ndarray:
    return np.concatenate([q.get_block(b) for b in active])


def _set(q: DVineFamily, active, flat) -> DVineFamily:
    i = 0
    for b in active:
        n = len(q.get_block(b))
        q = q.with_block(b, flat[i : i + n])
        i += n
    return q


def _as_list(active):
    return [active] if isinstance(active, (str, int, np.integer)) else list(active)


def fit_stage(
    q: DVineFamily,
    m: TargetModel,
    cfg: VrIwaeConfig,
    active,
    opt,
    monitor: RhatMonitor,
    max_iters: int,
    rng,
    average: bool = True,
) -> StageResult:
    """Optimize the ``active`` blocks until every split-R-hat is below threshold.

    With ``average`` the returned parameters are the mean of the final R-hat
    window rather than the last iterate.
    """
    active = _as_list(active)
    rng = make_rng(rng)
    tape = ad.Tape()
    params = _get(q, active)
    bounds = []
    status = MAX_ITERS
    it = 0
    for it in range(1, max_iters + 1):
        eps = draw_eps(rng, cfg.n_particles, q.d)
        value, grad = vr_iwae_value_and_grad(q, m, cfg.alpha, active, eps, tape)
        params = opt.step(params, grad)
        q = _set(q, active, params)
        if monitor.record(it, params):
            bounds.append(value)
            if monitor.check():
                status = CONVERGED
                break
    if average and monitor.full:
        snaps = monitor.snapshots()
        # offsets from the first snapshot keep a constant window exact
        q = _set(q, active, snaps[0] + (snaps - snaps[0]).mean(axis=0))
    tail = bounds[-monitor.window :]
    return StageResult(
        block=active[0] if len(active) == 1 else active,
        family=q,
        iterations=it,
        status=status,
        bound=float(np.mean(tail)) if tail else float("nan"),
        rhat=None if monitor.last is None else monitor.last.tolist(),
    )


def tree_is_negligible(tree, stop: StopConfig) -> bool:
    for c in tree:
        if c.family is Family.GAUSSIAN:
            if abs(c.param) >= stop.eta_threshold:
                return False
        elif abs(c.kendall_tau()) >= stop.tau_cutoff:
            return False
    return True


@dataclass
class StepwiseReport:
    family: DVineFamily
    stages: list
    stop_reason: str
    stop_tree: int | None
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def iterations(self) -> list:
        return [s.iterations for s in self.stages]

    @property
    def bounds(self) -> list:
        return [s.bound for s in self.stages]

    def to_dict(self) -> dict:
        return {
            "family": self.family.to_dict(),
            "stages": [s.summary() for s in self.stages],
            "stop_reason": self.stop_reason,
            "stop_tree": self.stop_tree,
            "wall_clock_s": self.wall_clock,
            "config": self.config,
        }


def stepwise_fit(
    m: TargetModel,
    cfg: VrIwaeConfig = VrIwaeConfig(),
    opt: OptimizerConfig = OptimizerConfig(),
    stop: StopConfig = StopConfig(),
    init: DVineFamily | None = None,
    fit_marginals: bool = True,
) -> StepwiseReport:
    """Mean-field stage, then one tree at a time with all earlier blocks frozen.

    After each tree the global criterion is checked on that tree; when it fires
    the tree is dropped (unless ``stop.retain_trigger_tree``) and fitting ends.
    ``fit_marginals=False`` keeps the marginals of ``init`` fixed.
    """
    t0 = time.perf_counter()
    d = m.d
    if d < 2:
        raise ValueError("stepwise fitting needs d >= 2")
    q = DVineFamily.standard(d) if init is None else init.truncate(0)
    rng = make_rng(cfg.seed)
    stages = []
    if fit_marginals:
        res = fit_stage(q, m, cfg, MARGINALS, opt.make(MARGINALS), stop.monitor(), stop.max_iters, rng,
                        stop.average_window)
        stages.append(res)
        q = res.family
    tau_max = d - 1 if stop.max_tree is None else min(d - 1, stop.max_tree)
    reason, stop_tree = MAX_TREE, None
    for t in range(1, tau_max + 1):
        q = q.extend([PairCopula(Family.GAUSSIAN, 0.0)] * (d - t))
        res = fit_stage(q, m, cfg, t, opt.make(t), stop.monitor(), stop.max_iters, rng, stop.average_window)
        stages.append(res)
        q = res.family
        if tree_is_negligible(q.trees[t - 1], stop):
            reason, stop_tree = GLOBAL_CRITERION, t
            if not stop.retain_trigger_tree:
                q = q.truncate(t - 1)
            break
    config = {"vr_iwae": asdict(cfg), "optimizer": asdict(opt), "stop": asdict(stop),
              "fit_marginals": fit_marginals}
    return StepwiseReport(q, stages, reason, stop_tree, time.perf_counter() - t0, config)


def mf_fit(m: TargetModel, cfg=VrIwaeConfig(), opt=OptimizerConfig(), stop=StopConfig()) -> StepwiseReport:
    """Mean-field fit: the stepwise procedure capped at zero trees."""
    s = StopConfig(**{**asdict(stop), "max_tree": 0})
    return stepwise_fit(m, cfg, opt, s)


@dataclass
class GcviReport:
    family: DVineFamily
    blocks: list
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "family": self.family.to_dict(),
            "stages": self.blocks,
            "stop_reason": "Rounds",
            "stop_tree": None,
            "wall_clock_s": self.wall_clock,
            "config": self.config,
        }


def _fit_until_stable(q, m, alpha, n, active, opt, check_every, tol, max_iters, rng):
    """Ascend until block-averaged parameters stop moving.

    Parameters are averaged over consecutive blocks of ``check_every`` steps;
    the loop stops when two consecutive block means differ by less than
    ``tol * (1 + |previous|)`` in every coordinate. Returns the last block mean.
    """
    tape = ad.Tape()
    params = _get(q, active)
    acc = np.zeros_like(params)
    prev = None
    status = MAX_ITERS
    it = 0
    for it in range(1, max_iters + 1):
        eps = draw_eps(rng, n, q.d)
        _, grad = vr_iwae_value_and_grad(q, m, alpha, active, eps, tape)
        params = opt.step(params, grad)
        q = _set(q, active, params)
        acc += params
        if it % check_every == 0:
            mean = acc / check_every
            acc[:] = 0.0
            if prev is not None and np.all(np.abs(mean - prev) < tol * (1.0 + np.abs(prev))):
                q = _set(q, active, mean)
                status = CONVERGED
                break
            prev = mean
    if status != CONVERGED and prev is not None:
        q = _set(q, active, prev)
    return q, it, status


def gcvi_fit(
    m: TargetModel,
    rounds: int = 2,
    param_tol: float = 1e-3,
    mc_samples: int = 10,
    opt: OptimizerConfig = OptimizerConfig(),
    seed: int = 0,
    check_every: int = 500,
    max_iters: int = 10_000,
    return_report: bool = False,
):
    """Gaussian-copula VI: alternate full-block ELBO ascent on marginals and on all trees."""
    t0 = time.perf_counter()
    d = m.d
    if d < 2:
        raise ValueError("GC-VI needs d >= 2")
    q = DVineFamily.standard(d)
    for t in range(1, d):
        q = q.extend([PairCopula(Family.GAUSSIAN, 0.0)] * (d - t))
    rng = make_rng(seed)
    trees = list(range(1, d))
    blocks = []
    for r in range(rounds):
        for active, lr_block in (([MARGINALS], MARGINALS), (trees, 1)):
            q, it, status = _fit_until_stable(q, m, 1.0, mc_samples, active, opt.make(lr_block),
                                              check_every, param_tol, max_iters, rng)
            blocks.append({"round": r, "block": "marginals" if lr_block == MARGINALS else "copulas",
                           "iterations": it, "status": status})
    if not return_report:
        return q
    config = {"rounds": rounds, "param_tol": param_tol, "mc_samples": mc_samples,
              "optimizer": asdict(opt), "seed": seed, "check_every": check_every, "max_iters": max_iters}
    return GcviReport(q, blocks, time.perf_counter() - t0, config)
