"""Command line entry point.

Exit codes: 0 success, 2 input error, 3 numerical validity failure,
4 convergence or mixing failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io, pipeline
from .config import load_config
from .errors import ConvergenceError, InputError, NotPositiveDefiniteError, NumericalError, OdeLaplaceError
from .inference import load_mode, save_mode

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CONVERGENCE = 0, 2, 3, 4


def _load_data(args, config):
    path = args.data or config.data_path
    if path is None:
        raise InputError("no dataset given (use --data or set data_path in the config)")
    return io.read_dataset(path, p=config.build_model().p)


def _out(args):
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_simulate(args, config, manifest):
    with manifest.timed("simulate"):
        data, truth = pipeline.simulate(config)
    out = _out(args)
    io.write_dataset(out / "data.csv", data, manifest.config_hash)
    io.write_json(out / "truth.json", truth, manifest.config_hash)
    manifest.add("data.csv", "truth.json")
    print(f"wrote {out / 'data.csv'} ({data.times.size} rows, {data.p} states)")


def cmd_ingest(args, config, manifest):
    out = _out(args)
    try:
        data, report = io.ingest_csv(args.path, args.schema)
    except io.IngestError as exc:
        io.write_json(out / "ingest_report.json", {"ok": False, "problems": exc.problems}, manifest.config_hash)
        manifest.add("ingest_report.json")
        raise
    io.write_dataset(out / "data.csv", data, manifest.config_hash)
    io.write_json(out / "ingest_report.json", report, manifest.config_hash)
    manifest.add("data.csv", "ingest_report.json")
    print(f"ingested {report['rows']} rows from {args.path}")


def cmd_fit(args, config, manifest):
    data = _load_data(args, config)
    out = _out(args)
    try:
        with manifest.timed("fit"):
            mode = pipeline.fit(config, data)
    except ConvergenceError as exc:
        io.write_json(out / "fit_diagnostics.json", {"error": str(exc), **exc.diagnostics}, manifest.config_hash)
        manifest.add("fit_diagnostics.json")
        raise
    save_mode(out / "mode.json", mode, manifest.config_hash)
    log = [[k, h["tau"], h["objective"], h["grad_sup"]] for k, h in enumerate(mode.meta["history"])]
    io.write_table_csv(out / "fit_log.csv", ["sweep", "tau", "objective", "grad_sup"], log, manifest.config_hash)
    manifest.add("mode.json", "fit_log.csv")
    print(f"mode: lambda={mode.lam:.6g} theta={np.array2string(mode.theta, precision=5)}")


def cmd_laplace(args, config, manifest):
    data = _load_data(args, config)
    mode = load_mode(args.mode, config.build_prior())
    out = _out(args)
    repair = {"on": True, "off": False, None: None}[args.repair]
    try:
        with manifest.timed(f"laplace-{args.variant or config.laplace.variant}"):
            report = pipeline.laplace(config, data, mode, args.variant, args.reduce, repair)
    except NotPositiveDefiniteError as exc:
        manifest.flags.append("not-positive-definite")
        print(f"precision matrix is not positive definite (failing pivot {exc.pivot})", file=sys.stderr)
        raise
    report.meta["mean"] = mode.original_vector()
    name = args.name or f"report_{report.method}.json"
    io.write_report(out / name, report, manifest.config_hash)
    stem = Path(name).stem
    io.write_matrix_csv(out / f"{stem}_correlation.csv", report.correlation, report.labels, manifest.config_hash)
    manifest.add(name, f"{stem}_correlation.csv")
    manifest.flags.extend(report.flags)
    print(f"wrote {out / name} flags={report.flags}")
    if not report.valid:
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_mcmc(args, config, manifest):
    data = _load_data(args, config)
    mode = load_mode(args.mode, config.build_prior())
    out = _out(args)
    settings = config.mcmc
    if args.seed is not None:
        from dataclasses import replace

        settings = replace(settings, seed=args.seed)
    with manifest.timed("mcmc"):
        chain, report = pipeline.mcmc(config, data, mode, settings)
    io.write_chain_csv(out / "chain.csv", chain, manifest.config_hash)
    io.write_report(out / "report_mcmc-oracle.json", report, manifest.config_hash)
    io.write_matrix_csv(out / "report_mcmc-oracle_correlation.csv", report.correlation, report.labels,
                        manifest.config_hash)
    manifest.add("chain.csv", "report_mcmc-oracle.json", "report_mcmc-oracle_correlation.csv")
    print(f"{chain.samples.shape[0]} draws, acceptance {chain.acceptance_rate:.3f}")


def cmd_compare(args, config, manifest):
    out = _out(args)
    if args.repeat:
        return _repeat(args, config, manifest)
    if len(args.reports) < 2:
        raise InputError("compare needs at least two reports")
    reports = [io.read_report(p) for p in args.reports]
    if not any(r.valid for r in reports):
        raise InputError("all reports are flagged invalid")
    names = [Path(p).stem for p in args.reports]
    _, doc, rows = pipeline.comparison_tables(reports, names)
    io.write_json(out / "comparison.json", doc, manifest.config_hash)
    io.write_table_csv(out / "relative_variance.csv", ["label", *names], rows, manifest.config_hash)
    manifest.add("comparison.json", "relative_variance.csv")
    print(f"compared {len(reports)} reports")


def _repeat(args, config, manifest):
    from .experiments import repeat_experiment

    out = _out(args)
    rows, summary = repeat_experiment(config, args.repeat, out_dir=out)
    io.write_table_csv(
        out / "repeat_distances.csv",
        ["seed", "correlation_frobenius", "covariance_frobenius", "variance_ok", "correlation_ok"],
        rows,
        manifest.config_hash,
    )
    io.write_table_csv(out / "repeat_histogram.csv", ["bin_low", "bin_high", "count"], summary.pop("histogram"),
                       manifest.config_hash)
    io.write_json(out / "repeat_summary.json", summary, manifest.config_hash)
    manifest.add("repeat_distances.csv", "repeat_histogram.csv", "repeat_summary.json")
    print(f"median correlation Frobenius distance {summary['median_correlation_frobenius']:.4f}")
    return EXIT_OK if summary["failures"] == 0 else EXIT_CONVERGENCE


def cmd_band(args, config, manifest):
    out = _out(args)
    report = io.read_report(args.report)
    mode = load_mode(args.mode, config.build_prior()) if args.mode else None
    with manifest.timed("band"):
        b = pipeline.band(config, report, mode, count=args.count, seed=args.seed)
    io.write_band_csv(out / "band.csv", b, list(config.build_model().state_names), manifest.config_hash)
    manifest.add("band.csv")
    print(f"band from {b.used} curves ({b.dropped} dropped)")


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "fit": cmd_fit,
    "laplace": cmd_laplace,
    "mcmc": cmd_mcmc,
    "compare": cmd_compare,
    "band": cmd_band,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="odelaplace", description="Laplace and MCMC covariances for ODE models")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", default="fn-s3.1", help="preset name or JSON config path")
        p.add_argument("--out", default="out", help="output directory")
        if data:
            p.add_argument("--data", help="dataset CSV (overrides the config)")

    common(sub.add_parser("simulate", help="generate a dataset from the config"), data=False)
    p = sub.add_parser("ingest", help="validate and normalize an external CSV")
    common(p, data=False)
    p.add_argument("path")
    p.add_argument("--schema", choices=("generic", "sir"), default="generic")
    common(sub.add_parser("fit", help="find the posterior mode of the relaxed model"))
    p = sub.add_parser("laplace", help="Laplace covariance at a mode")
    common(p)
    p.add_argument("--mode", required=True)
    p.add_argument("--variant", choices=("relaxed", "original"))
    p.add_argument("--reduce", choices=("full", "schur"))
    p.add_argument("--repair", choices=("on", "off"))
    p.add_argument("--name", help="report file name")
    p = sub.add_parser("mcmc", help="adaptive Metropolis oracle from a mode")
    common(p)
    p.add_argument("--mode", required=True)
    p.add_argument("--seed", type=int)
    p = sub.add_parser("compare", help="compare covariance reports")
    common(p, data=False)
    p.add_argument("reports", nargs="*")
    p.add_argument("--repeat", type=int, help="run the seeded repeat experiment over this many datasets")
    p = sub.add_parser("band", help="credible band for the solution curves")
    common(p, data=False)
    p.add_argument("--report", required=True)
    p.add_argument("--mode")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        manifest = pipeline.Manifest.open(args.out, config)
        try:
            code = COMMANDS[args.command](args, config, manifest) or EXIT_OK
        finally:
            manifest.save()
        return code
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OdeLaplaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
