"""Experiment specs and the runners behind the command line.

A spec is a JSON object. Missing fields take the defaults of the experiment
kind and every output echoes the fully resolved spec together with the build id
and the master seed, so any file can be regenerated from its own header.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dvine import DVineFamily, implied_correlation, implied_covariance, sample
from .gaussian_analysis import delta_kl_rel, kl_gaussians, mean_rel_rmse_std
from .inference import (
    MAX_ITERS,
    OptimizerConfig,
    StopConfig,
    VrIwaeConfig,
    draw_eps,
    gcvi_fit,
    mf_fit,
    stepwise_fit,
)
from .models import (
    DatasetSpec,
    GaussianDist,
    RegressionTarget,
    dataset_from_csv,
    dataset_to_csv,
    generate_dataset,
    sidecar,
)
from .numerics import make_rng, spawn_seeds

EXPERIMENTS = ("independence", "needle", "alpha-sweep", "verify-theorems", "custom")
METHODS = ("stepwise-vine", "mf", "gcvi")
ALPHA_GRID = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

SAMPLES_SCHEMA = "vinevi.samples/1"
SWEEP_SCHEMA = "vinevi.sweep/1"
DELTA_SCHEMA = "vinevi.delta-kl-rel/1"

PRESETS = {
    "independence": {"dataset": {"kind": "independence", "n": 50}},
    "needle": {"dataset": {"kind": "needle", "n": 50}, "vr_iwae": {"n_particles": 64}},
    "alpha-sweep": {},
    "verify-theorems": {},
    "custom": {},
}


class SpecError(ValueError):
    """Invalid or incomplete experiment spec."""


@functools.lru_cache(maxsize=1)
def build_id() -> str:
    """``git describe`` of the source checkout, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"vinevi-{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"vinevi-{__version__}"


def _only_known(cls, doc: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise SpecError(f"unknown {where} field(s): {sorted(unknown)}")
    return doc


@dataclass(frozen=True)
class GcviSettings:
    rounds: int = 2
    param_tol: float = 1e-3
    mc_samples: int = 10
    check_every: int = 500
    max_iters: int = 10_000


@dataclass(frozen=True)
class SweepSettings:
    alphas: tuple = ALPHA_GRID
    n_examples: int = 3
    dataset_seeds: tuple | None = None
    n: int = 300
    prior_var: float = 1e4
    wishart_base: str = "C1"
    wishart_df: float = 5.0
    jobs: int = 1

    def resolved_seeds(self, master: int) -> list:
        if self.dataset_seeds is not None:
            if len(self.dataset_seeds) != self.n_examples:
                raise SpecError("dataset_seeds must list one seed per example")
            return [int(s) for s in self.dataset_seeds]
        return [s % 2**32 for s in spawn_seeds(master, self.n_examples)]


@dataclass
class ExperimentSpec:
    experiment: str
    seed: int
    method: str = "stepwise-vine"
    dataset: DatasetSpec | None = None
    dataset_path: str | None = None
    vr_iwae: VrIwaeConfig = field(default_factory=VrIwaeConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    stop: StopConfig = field(default_factory=StopConfig)
    gcvi: GcviSettings = field(default_factory=GcviSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    n_samples: int = 10_000
    quick: bool = False

    @classmethod
    def from_dict(cls, doc: dict, seed: int | None = None, quick: bool | None = None) -> "ExperimentSpec":
        """Resolve a spec document. ``seed``/``quick`` override the document."""
        if not isinstance(doc, dict):
            raise SpecError("spec must be a JSON object")
        doc = dict(doc)
        kind = doc.pop("experiment", None)
        if kind not in EXPERIMENTS:
            raise SpecError(f"experiment must be one of {EXPERIMENTS}")
        if seed is not None:
            doc["seed"] = seed
        if "seed" not in doc:
            raise SpecError("seed is mandatory")
        master = doc.pop("seed")
        if not isinstance(master, int) or isinstance(master, bool) or not 0 <= master < 2**64:
            raise SpecError("seed must be an unsigned 64-bit integer")
        preset = PRESETS[kind]
        method = doc.pop("method", "stepwise-vine")
        if method not in METHODS:
            raise SpecError(f"method must be one of {METHODS}")
        try:
            ds_doc = {**preset.get("dataset", {}), **(doc.pop("dataset", None) or {})}
            dataset = None
            if ds_doc:
                ds_doc.setdefault("seed", master % 2**63)
                dataset = DatasetSpec.from_dict(ds_doc)
                if dataset.extra:
                    raise SpecError(f"unknown dataset field(s): {sorted(dataset.extra)}")
            vr_doc = {**preset.get("vr_iwae", {}), **doc.pop("vr_iwae", {})}
            vr_doc.setdefault("seed", master % 2**63)
            vr = VrIwaeConfig(**_only_known(VrIwaeConfig, vr_doc, "vr_iwae"))
            opt = OptimizerConfig(**_only_known(OptimizerConfig, doc.pop("optimizer", {}), "optimizer"))
            stop_doc = _only_known(StopConfig, doc.pop("stop", {}), "stop")
            if "tau_cutoff" not in stop_doc and "eta_threshold" in stop_doc:
                stop_doc["tau_cutoff"] = 2.0 / math.pi * math.asin(stop_doc["eta_threshold"])
            stop = StopConfig(**stop_doc)
            gc = GcviSettings(**_only_known(GcviSettings, doc.pop("gcvi", {}), "gcvi"))
            sw_doc = _only_known(SweepSettings, doc.pop("sweep", {}), "sweep")
            for key in ("alphas", "dataset_seeds"):
                if sw_doc.get(key) is not None:
                    sw_doc[key] = tuple(sw_doc[key])
            sw = SweepSettings(**sw_doc)
            for a in sw.alphas:
                VrIwaeConfig(alpha=a)
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from exc
        dataset_path = doc.pop("dataset_path", None)
        n_samples = int(doc.pop("n_samples", 10_000))
        q = bool(doc.pop("quick", False)) if quick is None else quick
        if doc:
            raise SpecError(f"unknown spec field(s): {sorted(doc)}")
        if n_samples < 1:
            raise SpecError("n_samples must be positive")
        return cls(kind, master, method, dataset, dataset_path, vr, opt, stop, gc, sw, n_samples, q)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "method": self.method,
            "dataset": None if self.dataset is None else self.dataset.to_dict(),
            "dataset_path": self.dataset_path,
            "vr_iwae": asdict(self.vr_iwae),
            "optimizer": asdict(self.optimizer),
            "stop": asdict(self.stop),
            "gcvi": asdict(self.gcvi),
            "sweep": asdict(self.sweep),
            "n_samples": self.n_samples,
            "quick": self.quick,
        }


def load_spec(path, seed=None, quick=None) -> ExperimentSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: {exc}") from exc
    return ExperimentSpec.from_dict(doc, seed=seed, quick=quick)


# Output helpers


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)  # "inf", "-inf", "nan"
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def meta(spec: ExperimentSpec, schema: str) -> dict:
    return {"schema": schema, "build": build_id(), "seed": spec.seed, "config": spec.to_dict()}


def write_json(path: Path, doc: dict):
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: Path, header: list, rows, spec: ExperimentSpec, schema: str):
    """Plain CSV plus a ``<name>.json`` sidecar with schema, columns and provenance."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")
    write_json(path.with_suffix(".json"), {**meta(spec, schema), "columns": header})


# gen-data


def gen_data(spec: ExperimentSpec, out: Path) -> dict:
    if spec.dataset is None:
        raise SpecError(f"experiment {spec.experiment!r} has no dataset")
    out.mkdir(parents=True, exist_ok=True)
    m = generate_dataset(spec.dataset)
    (out / "dataset.csv").write_text(dataset_to_csv(m), encoding="utf-8")
    extra = {"build": build_id(), "seed": spec.seed, "config": spec.to_dict(), "columns": dataset_header(m.d)}
    (out / "dataset.json").write_text(sidecar(spec.dataset, _jsonable(extra)) + "\n", encoding="utf-8")
    return {"dataset": str(out / "dataset.csv"), "sidecar": str(out / "dataset.json")}


def dataset_header(d: int) -> list:
    return [f"x{j + 1}" for j in range(d)] + ["y"]


def load_target(spec: ExperimentSpec) -> RegressionTarget:
    if spec.dataset_path is None:
        if spec.dataset is None:
            raise SpecError("fit needs a dataset spec or dataset_path")
        return generate_dataset(spec.dataset)
    path = Path(spec.dataset_path)
    prior_var = None
    car = path.with_suffix(".json")
    if car.exists():
        prior_var = json.loads(car.read_text(encoding="utf-8"))["spec"]["prior_var"]
    elif spec.dataset is not None:
        prior_var = spec.dataset.prior_var
    return dataset_from_csv(path.read_text(encoding="utf-8"), prior_var=1.0 if prior_var is None else prior_var)


# fit


def run_method(spec: ExperimentSpec, m, init: DVineFamily | None = None, fit_marginals: bool = True):
    """Fit ``m`` with ``spec.method``; returns (family, report dict)."""
    if spec.method == "stepwise-vine":
        rep = stepwise_fit(m, spec.vr_iwae, spec.optimizer, spec.stop, init=init, fit_marginals=fit_marginals)
    elif spec.method == "mf":
        rep = mf_fit(m, spec.vr_iwae, spec.optimizer, spec.stop)
    else:
        g = spec.gcvi
        rep = gcvi_fit(m, g.rounds, g.param_tol, g.mc_samples, spec.optimizer, spec.vr_iwae.seed,
                       g.check_every, g.max_iters, return_report=True)
    return rep.family, rep.to_dict()


def fit_metrics(q: DVineFamily, post: GaussianDist) -> dict:
    """Closed-form comparison of a Gaussian vine with the exact posterior."""
    if not q.is_gaussian:
        raise ValueError("closed-form metrics need Gaussian pair copulas")
    est = GaussianDist(np.asarray(q.mu), implied_covariance(q))
    return {
        "forward_kl": kl_gaussians(post, est),
        "backward_kl": kl_gaussians(est, post),
        "mean_rel_rmse_std": mean_rel_rmse_std(post.stds, q.sigma),
        "est_mean": list(q.mu),
        "true_mean": post.mean,
        "est_stds": q.sigma,
        "true_stds": post.stds,
        "implied_correlation": implied_correlation(q),
        "true_correlation": post.correlation,
        "max_abs_correlation_error": float(np.max(np.abs(implied_correlation(q) - post.correlation))),
    }


def draw_samples(q: DVineFamily, n: int, seed: int) -> np.ndarray:
    rng = make_rng(spawn_seeds(seed, 2)[1])
    return sample(q, draw_eps(rng, n, q.d))


def fit(spec: ExperimentSpec, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    m = load_target(spec)
    q, report = run_method(spec, m)
    stages = report["stages"]
    report["exhausted_stages"] = [i for i, s in enumerate(stages) if s.get("status") == MAX_ITERS]
    write_json(out / "report.json", {**meta(spec, "vinevi.report/1"), "report": report})
    write_json(out / "family.json", {**meta(spec, "vinevi.family/1"), "family": q.to_dict()})
    metrics = fit_metrics(q, m.posterior)
    write_json(out / "metrics.json", {**meta(spec, "vinevi.metrics/1"), "metrics": metrics})
    z = draw_samples(q, spec.n_samples, spec.seed)
    write_csv(out / "samples.csv", [f"z{j + 1}" for j in range(q.d)], z, spec, SAMPLES_SCHEMA)
    return {"report": report, "metrics": metrics, "family": q}


# alpha sweep


def sweep_targets(spec: ExperimentSpec) -> list:
    sw = spec.sweep
    out = []
    for s in sw.resolved_seeds(spec.seed):
        ds = DatasetSpec("wishart-gaussian", sw.n, s, prior_var=sw.prior_var, wishart_df=sw.wishart_df,
                         wishart_base=sw.wishart_base)
        out.append((ds, generate_dataset(ds)))
    return out


def _sweep_cell(args):
    spec, m, alpha, fit_seed = args
    post = m.posterior
    init = DVineFamily.mean_field(post.mean, post.stds)
    cfg = VrIwaeConfig(alpha, spec.vr_iwae.n_particles, fit_seed)
    t0 = time.perf_counter()
    rep = stepwise_fit(m, cfg, spec.optimizer, spec.stop, init=init, fit_marginals=False)
    metrics = fit_metrics(rep.family, post)
    return {
        "alpha": alpha,
        "fit_seed": fit_seed,
        "forward_kl": metrics["forward_kl"],
        "mean_rel_rmse_std": metrics["mean_rel_rmse_std"],
        "stop_reason": rep.stop_reason,
        "tau": rep.family.tau,
        "iterations": int(sum(rep.iterations)),
        "wall_clock_s": time.perf_counter() - t0,
    }


def alpha_sweep(spec: ExperimentSpec, out: Path | None = None) -> dict:
    """Stepwise D-vine fits with oracle marginals over the alpha grid.

    Cells are independent: each (example, alpha) gets its own derived fit seed
    and cells are merged in grid order, so ``jobs`` never changes the output.
    """
    sw = spec.sweep
    targets = sweep_targets(spec)
    cells = [(e, a) for e in range(len(targets)) for a in sw.alphas]
    seeds = spawn_seeds(spec.seed + 1, len(cells))
    args = [(spec, targets[e][1], a, s % 2**63) for (e, a), s in zip(cells, seeds)]
    t0 = time.perf_counter()
    if sw.jobs > 1:
        with ProcessPoolExecutor(sw.jobs) as ex:
            results = list(ex.map(_sweep_cell, args))
    else:
        results = [_sweep_cell(a) for a in args]
    examples = []
    for e, (ds, _) in enumerate(targets):
        rows = [r for (ce, _), r in zip(cells, results) if ce == e]
        kl = {r["alpha"]: r["forward_kl"] for r in rows}
        rel = delta_kl_rel(kl)
        examples.append({
            "example": e,
            "dataset": ds.to_dict(),
            "cells": rows,
            "delta_kl_rel": {str(a): v for a, v in rel.items()},
            "degenerate_scale": rel.degenerate,
            "argmin_alpha": min(kl, key=kl.get),
        })
    summary = {"examples": examples, "wall_clock_s": time.perf_counter() - t0}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        header = ["example", "dataset_seed", "alpha", "forward_kl", "mean_rel_rmse_std", "stop_reason", "tau",
                  "iterations", "fit_seed"]
        rows = [[ex["example"], ex["dataset"]["seed"], c["alpha"], c["forward_kl"], c["mean_rel_rmse_std"],
                 c["stop_reason"], c["tau"], c["iterations"], c["fit_seed"]]
                for ex in examples for c in ex["cells"]]
        write_csv(out / "sweep.csv", header, rows, spec, SWEEP_SCHEMA)
        header = ["alpha"] + [f"example_{ex['example'] + 1}" for ex in examples]
        rows = [[a] + [ex["delta_kl_rel"][str(a)] for ex in examples] for a in sw.alphas]
        write_csv(out / "delta_kl_rel.csv", header, rows, spec, DELTA_SCHEMA)
        write_json(out / "summary.json", {**meta(spec, "vinevi.sweep-summary/1"), "summary": summary})
    return summary


QUICK_STOP = {"window": 50, "stride": 4, "max_iters": 3000}


def quick(spec: ExperimentSpec) -> ExperimentSpec:
    """Smoke-run variant: short R-hat windows, capped GC-VI blocks, one sweep example at three alphas."""
    stop = StopConfig(**{**asdict(spec.stop), **QUICK_STOP})
    gc = GcviSettings(**{**asdict(spec.gcvi), "max_iters": 2000})
    seeds = spec.sweep.dataset_seeds
    sw = SweepSettings(**{**asdict(spec.sweep), "alphas": (0.1, 0.5, 0.9), "n_examples": 1,
                          "dataset_seeds": None if seeds is None else seeds[:1]})
    return ExperimentSpec(**{**spec.__dict__, "stop": stop, "gcvi": gc, "sweep": sw, "quick": True})
