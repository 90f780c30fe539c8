"""End-to-end steps shared by the command line and the experiment scripts."""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import config_hash
from .errors import ConditioningWarning, InputError, NotPositiveDefiniteError
from .inference import compare_reports, fit_map, run_mcmc, sample_covariance
from .laplace import (
    CovarianceReport,
    credible_band,
    invert_full,
    nearest_pd,
    schur_complement,
)
from .posterior import Dataset, original_hessian, original_labels, relaxed_hessian
from .sensitivity import solve_reference

__all__ = [
    "simulate",
    "fit",
    "laplace",
    "mcmc",
    "band",
    "agreement_checks",
    "Manifest",
]


def simulate(config):
    """Noisy observations of the true curve; returns ``(Dataset, truth)``."""
    sim = config.simulate
    if sim is None:
        raise InputError("config has no simulate block")
    model = config.build_model()
    grid = sim.grid()
    truth = solve_reference(model, np.array(sim.x0, float), np.array(sim.theta, float), grid, tol=config.solver_tol)
    rng = np.random.default_rng(sim.seed)
    noise = rng.standard_normal(truth.shape) * np.sqrt(sim.noise_variance)
    Y = truth + noise if sim.noise_variance > 0 else truth.copy()
    info = {
        "model": model.name,
        "theta": list(sim.theta),
        "x0": list(sim.x0),
        "noise_variance": sim.noise_variance,
        "seed": sim.seed,
        "times": grid,
        "states": truth,
    }
    return Dataset(grid, Y), info


def fit(config, data, init=None):
    model = config.build_model()
    mode = fit_map(data, model, config.tau, config.m, config.build_prior(), init=init, settings=config.fit)
    mode.meta["seed"] = config.simulate.seed if config.simulate else None
    return mode


def laplace(config, data, mode, variant=None, reduce=None, repair=None):
    """Laplace covariance over ``(lambda, theta, x0)`` for the chosen variant.

    Without repair a non-PD precision raises ``NotPositiveDefiniteError``.
    With repair the (reduced) precision goes through ``nearest_pd`` first.
    """
    spec = config.laplace
    variant = variant or spec.variant
    reduce = reduce or spec.reduce
    repair = spec.repair if repair is None else repair
    model = config.build_model()
    prior = config.build_prior()
    labels = original_labels(model)
    k = len(labels)
    flags, meta = [], {"variant": variant, "reduce": reduce, "repair": bool(repair)}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConditioningWarning)
        if variant == "relaxed":
            H = relaxed_hessian(model, mode.relaxed(), data, config.tau, prior, config.m)
            method = "laplace-relaxed"
        elif variant == "original":
            H = original_hessian(model, mode.original(), data, prior, tol=config.solver_tol)
            method = "laplace-original"
            reduce = "full"
        else:
            raise InputError(f"unknown variant {variant!r}")
    notes = [str(w.message) for w in caught if issubclass(w.category, ConditioningWarning)]
    if notes:
        flags.append("conditioning-warning")
        meta["warnings"] = notes
    keep = np.arange(k)
    P = schur_complement(H, keep) if reduce == "schur" else H
    try:
        cov = invert_full(P)
    except NotPositiveDefiniteError as exc:
        if not repair:
            raise
        meta["failing_pivot"] = exc.pivot
        flags.append("repaired")
        cov = invert_full(nearest_pd(P))
        cov.pd_status = "repaired"
    if cov.dim != k:
        cov = cov.submatrix(keep)
    meta["precision_dim"] = H.dim
    return CovarianceReport.build(method, labels, cov, flags, meta)


def mcmc(config, data, mode, settings=None, proposal=None):
    """Sampling oracle from the mode.

    ``proposal`` is an optional covariance report over the same coordinates
    (typically the Laplace one) used to shape the initial proposal; the
    target is unaffected.
    """
    model = config.build_model()
    cov = None
    if proposal is not None and proposal.valid and proposal.covariance.pd_status == "verified-PD":
        cov = proposal.covariance.array
    settings = settings or config.mcmc
    tol = settings.solver_tol or config.solver_tol
    chain = run_mcmc(data, model, config.build_prior(), mode, settings, tol=tol, proposal_cov=cov)
    report = sample_covariance(chain)
    report.meta["acceptance_rate"] = chain.acceptance_rate
    return chain, report


def band(config, report, mode=None, grid=None, count=None, seed=None):
    """Credible band from the ``theta``/``x0`` block of a report centred at the mode."""
    model = config.build_model()
    names = original_labels(model)
    if list(report.labels) != names:
        raise InputError("report labels do not match the model")
    idx = np.arange(1, len(names))
    cov = report.covariance.submatrix(idx)
    if mode is not None:
        mean = np.concatenate([mode.theta, mode.X[0]])
    elif "mean" in report.meta:
        mean = np.asarray(report.meta["mean"], float)[idx]
    else:
        raise InputError("need a mode to centre the band")
    if grid is None:
        grid = config.simulate.grid() if config.simulate else None
    return credible_band(
        model, mean, cov, grid,
        count=count or config.band.count,
        seed=config.band.seed if seed is None else seed,
        tol=config.solver_tol,
    )


def agreement_checks(laplace_report, oracle_report, coords=None, ratio=5.0, corr_tol=0.35, corr_floor=0.2,
                     frob_tol=1.0):
    """Compare a Laplace report with the sampling oracle on ``coords``."""
    coords = np.arange(len(laplace_report.labels)) if coords is None else np.asarray(coords)
    v_l = laplace_report.variances[coords]
    v_o = oracle_report.variances[coords]
    ratios = v_l / v_o
    R_l = laplace_report.correlation.array[np.ix_(coords, coords)]
    R_o = oracle_report.correlation.array[np.ix_(coords, coords)]
    mask = (np.abs(R_o) > corr_floor) & ~np.eye(len(coords), dtype=bool)
    diff = np.abs(R_l - R_o)
    max_diff = float(diff[mask].max()) if mask.any() else 0.0
    frob = float(np.sqrt(np.sum((R_l - R_o) ** 2)))
    return {
        "variance_ratios": ratios.tolist(),
        "variance_ok": bool(np.all((ratios <= ratio) & (ratios >= 1 / ratio))),
        "max_correlation_diff": max_diff,
        "correlation_ok": bool(max_diff <= corr_tol),
        "correlation_frobenius": frob,
        "frobenius_ok": bool(frob <= frob_tol),
    }


@dataclass
class Manifest:
    """Record of what a run wrote, kept as ``manifest.json`` in the output directory."""

    directory: Path
    config_hash: str
    seeds: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @classmethod
    def open(cls, directory, config):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        h = config_hash(config)
        path = directory / "manifest.json"
        if path.exists():
            doc = json.loads(path.read_text())
            if doc.get("config_hash") == h:
                return cls(directory, h, doc.get("seeds", {}), doc.get("files", []), doc.get("timings", {}),
                           doc.get("flags", []))
        seeds = {}
        if config.simulate:
            seeds["simulate"] = config.simulate.seed
        seeds["mcmc"] = config.mcmc.seed
        seeds["band"] = config.band.seed
        return cls(directory, h, seeds)

    def add(self, *names):
        for n in names:
            if n not in self.files:
                self.files.append(n)

    def timed(self, step):
        manifest = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                manifest.timings[step] = round(time.perf_counter() - self.t0, 3)
                return False

        return _Timer()

    def save(self):
        io.write_json(
            self.directory / "manifest.json",
            {"seeds": self.seeds, "files": self.files, "timings": self.timings, "flags": sorted(set(self.flags))},
            self.config_hash,
        )


def comparison_tables(reports, names=None):
    """``(comparison, json_doc, csv_rows)`` for a list of reports."""
    cmp = compare_reports(reports, names)
    doc = {
        "labels": cmp.labels,
        "names": cmp.names,
        "valid": cmp.valid,
        "flags": cmp.flags,
        "covariance_frobenius": cmp.covariance_distance,
        "correlation_frobenius": cmp.correlation_distance,
        "relative_variance": cmp.relative_variance,
        "correlations": {n: r.correlation.array for n, r in zip(cmp.names, reports)},
    }
    rows = [[lab, *(cmp.relative_variance[i, j] for i in range(len(reports)))] for j, lab in enumerate(cmp.labels)]
    return cmp, doc, rows
