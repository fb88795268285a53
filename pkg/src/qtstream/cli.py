"""Command line interface.

Subcommands: ``calibrate`` (threshold tables), ``monitor`` (per-sample
verdicts on a CSV stream), ``simulate`` (stream spec to CSV), ``bench``
(experiment config to report files, optionally with figures).

Exit codes: 0 success, 2 usage error (click), 3 missing input file,
4 calibration/metadata mismatch, 1 any other failure.
"""

from __future__ import annotations

import json
import math
import os
import sys

import click
import numpy as np

from . import bench as bench_mod
from . import datagen
from .calibration import ThresholdTable, calibrate as run_calibrate, calibrate_batch_threshold
from .detector import qtewma_init, qtewma_step
from .errors import CalibrationMismatchError, QtStreamError
from .partition import QuantTreePartition

EXIT_MISSING_INPUT = 3
EXIT_META_MISMATCH = 4

CACHE_ENV = "QTSTREAM_CACHE_DIR"


def default_cache_dir() -> str:
    return os.environ.get(CACHE_ENV, os.path.join(os.path.expanduser("~"), ".cache", "qtstream"))


def _require_file(path: str, what: str) -> None:
    if not os.path.exists(path):
        click.echo(f"error: {what} not found: {path}", err=True)
        sys.exit(EXIT_MISSING_INPUT)


@click.group()
def main():
    """Streaming change detection on QuantTree histograms."""


@main.command()
@click.option("--arl0", type=int, required=True, help="Target average run length.")
@click.option("--lambda", "lam", type=float, default=0.03, show_default=True,
              help="EWMA forgetting factor.")
@click.option("--k", type=int, required=True, help="Number of histogram bins.")
@click.option("--n", "n_train", type=int, required=True, help="Training set size.")
@click.option("--beta", type=float, default=None,
              help="Updating-speed divisor (omit for the non-updating detector).")
@click.option("--stop-at", type=int, default=None,
              help="Total sample budget S after which updating freezes.")
@click.option("--replicates", type=int, default=100_000, show_default=True)
@click.option("--length", type=int, default=5000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Output table path (defaults into the cache directory).")
def calibrate(arl0, lam, k, n_train, beta, stop_at, replicates, length, seed, workers, out):
    """Compute a threshold table controlling the target ARL0."""
    table = run_calibrate(
        arl0_target=arl0,
        lam=lam,
        k=k,
        n_train=n_train,
        beta=math.inf if beta is None else beta,
        stop_at=stop_at,
        replicates=replicates,
        length=length,
        seed=seed,
        workers=workers,
    )
    if out is None:
        cache = default_cache_dir()
        os.makedirs(cache, exist_ok=True)
        out = os.path.join(cache, f"thresholds-{table.meta.cache_key()}.json")
    table.save(out)
    click.echo(f"wrote {out} (raw thresholds t=1..{int(table.raw_t[-1])}, "
               f"fit rms {table.fit_rms:.3g})")


@main.command()
@click.option("--table", "table_path", type=click.Path(), required=True)
@click.option("--partition", "partition_path", type=click.Path(), required=True)
@click.option("--input", "input_path", type=click.Path(), default=None,
              help="CSV stream (defaults to stdin).")
@click.option("--trace-out", type=click.Path(), default=None,
              help="Also write the delimited trace to this file.")
def monitor(table_path, partition_path, input_path, trace_out):
    """Monitor a CSV stream, one verdict line per sample.

    Prints "t,T_t,h_t,flag" per sample and stops at detection.
    """
    _require_file(table_path, "threshold table")
    _require_file(partition_path, "partition")
    table = ThresholdTable.load(table_path)
    partition = QuantTreePartition.load(partition_path)
    meta = table.meta
    try:
        state = qtewma_init(partition, meta.lam, table, beta=meta.beta, stop_at=meta.stop_at)
    except CalibrationMismatchError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_META_MISMATCH)

    if input_path is not None:
        _require_file(input_path, "input stream")
        fh = open(input_path)
    else:
        fh = sys.stdin
    trace_fh = open(trace_out, "w") if trace_out else None
    try:
        if trace_fh:
            trace_fh.write("t,statistic,threshold,detected\n")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            x = np.array([float(c) for c in line.split(",")])
            res = qtewma_step(state, partition, x)
            out = f"{state.t},{res.statistic:.10g},{res.threshold:.10g},{int(res.detected)}"
            click.echo(out)
            if trace_fh:
                trace_fh.write(out + "\n")
            if res.detected:
                click.echo(f"DETECTED t*={state.t}")
                break
    finally:
        if input_path is not None:
            fh.close()
        if trace_fh:
            trace_fh.close()


@main.command()
@click.option("--spec", "spec_path", type=click.Path(), required=True,
              help="Stream spec JSON file.")
@click.option("--out", type=click.Path(), required=True, help="Output CSV path.")
def simulate(spec_path, out):
    """Realize a stream spec as a CSV file (one sample per row)."""
    _require_file(spec_path, "stream spec")
    spec = datagen.load_spec(spec_path)
    data = datagen.generate_array(spec)
    np.savetxt(out, data, delimiter=",", fmt="%.17g")
    click.echo(f"wrote {out} ({data.shape[0]} samples, d={data.shape[1]})")


def _detector_from_config(doc: dict) -> bench_mod.DetectorConfig:
    beta = doc.get("beta", "inf")
    return bench_mod.DetectorConfig(
        lam=doc["lam"],
        n_train=doc["n_train"],
        k=doc["k"],
        beta=math.inf if beta == "inf" else float(beta),
        stop_at=doc.get("stop_at"),
        target_probs=tuple(doc["target_probs"]) if doc.get("target_probs") else None,
    )


def _family_from_config(doc: dict) -> bench_mod.StreamFamily:
    change = datagen.change_from_dict(doc["change"]) if doc.get("change") else None
    return bench_mod.StreamFamily(
        phi0=datagen.law_from_dict(doc["phi0"]),
        length=doc["length"],
        change=change,
    )


def _resolve_table(doc: dict) -> ThresholdTable:
    if "table" in doc:
        _require_file(doc["table"], "threshold table")
        return ThresholdTable.load(doc["table"])
    cal = doc["calibration"]
    beta = cal.get("beta", "inf")
    return run_calibrate(
        arl0_target=cal["arl0"],
        lam=cal["lam"],
        k=cal["k"],
        n_train=cal["n_train"],
        beta=math.inf if beta == "inf" else float(beta),
        stop_at=cal.get("stop_at"),
        replicates=cal.get("replicates", 100_000),
        length=cal.get("length", 5000),
        seed=cal.get("seed", 0),
        workers=cal.get("workers", 1),
        cache_dir=default_cache_dir(),
    )


def _deviations(family: bench_mod.StreamFamily) -> list[str]:
    devs = []
    if family.change is not None and isinstance(family.change.transform, datagen.MeanShift):
        devs.append(bench_mod.DEVIATION_MEAN_SHIFT)
    return devs


def _run_bench(doc: dict) -> bench_mod.ExperimentReport:
    kind = doc["experiment"]
    runs = doc["runs"]
    seed = doc.get("seed", 0)
    workers = doc.get("workers", 1)

    if kind == "auc_by_lag":
        cfgs = {name: _detector_from_config(c) for name, c in doc["detectors"].items()}
        stationary = _family_from_config(doc["stationary_stream"])
        changed = _family_from_config(doc["stream"])
        series = bench_mod.auc_by_lag(
            cfgs, stationary, changed, doc["lags"], runs, seed, workers=workers
        )
        return bench_mod.ExperimentReport(
            experiment=kind,
            config={
                "detectors": {n: c.to_dict() for n, c in cfgs.items()},
                "stream": changed.to_dict(),
                "stationary_stream": stationary.to_dict(),
                "lags": list(doc["lags"]),
                "runs": runs,
                "seed": seed,
            },
            aggregates={
                "auc_by_lag": {n: {str(l): v for l, v in s.items()} for n, s in series.items()}
            },
            runs=[],
            deviations=_deviations(changed),
        )

    cfg = _detector_from_config(doc["detector"])
    family = _family_from_config(doc["stream"])
    config = {
        "detector": cfg.to_dict(),
        "stream": family.to_dict(),
        "runs": runs,
        "seed": seed,
    }

    if kind == "arl0":
        table = _resolve_table(doc)
        result = bench_mod.measure_arl0(cfg, table, family, runs, seed, workers=workers)
        config["table_meta"] = table.meta.to_dict()
        aggregates = {
            "empirical_arl0": result.empirical_arl0,
            "ci": [result.ci_low, result.ci_high],
            "n_detected": result.n_detected,
            "n_censored": result.n_censored,
        }
        tau = None
        t_stars = result.t_stars
    elif kind == "delay_far":
        table = _resolve_table(doc)
        result = bench_mod.measure_delay_far(cfg, table, family, runs, seed, workers=workers)
        config["table_meta"] = table.meta.to_dict()
        aggregates = {
            "empirical_arl1": result.arl1,
            "false_alarm_rate": result.false_alarm_rate,
            "n_false_alarms": result.n_false_alarms,
            "n_valid_detections": result.n_valid_detections,
            "n_censored": result.n_censored,
        }
        tau = family.change.tau
        t_stars = result.t_stars
    elif kind == "batch_arl0":
        bcal = doc["batch"]
        batch = calibrate_batch_threshold(
            k=cfg.k,
            target_probs=cfg.probs(),
            n_train=cfg.n_train,
            nu=bcal["nu"],
            alpha=bcal["nu"] / bcal["arl0"],
            replicates=bcal.get("replicates", 500_000),
            seed=bcal.get("seed", 0),
        )
        result = bench_mod.measure_batch_arl0(cfg, batch, family, runs, seed, workers=workers)
        config["batch"] = {"nu": batch.nu, "alpha": batch.alpha, "threshold": batch.threshold}
        aggregates = {
            "empirical_arl0": result.empirical_arl0,
            "ci": [result.ci_low, result.ci_high],
            "n_detected": result.n_detected,
            "n_censored": result.n_censored,
        }
        tau = None
        t_stars = result.t_stars
    else:
        raise click.UsageError(f"unknown experiment kind {kind!r}")

    return bench_mod.ExperimentReport(
        experiment=kind,
        config=config,
        aggregates=aggregates,
        runs=bench_mod.run_records(t_stars, tau),
        deviations=_deviations(family),
    )


@main.command(name="bench")
@click.option("--config", "config_path", type=click.Path(), required=True,
              help="Experiment config JSON.")
@click.option("--out", type=click.Path(), required=True, help="Output report directory.")
@click.option("--figures/--no-figures", default=False, show_default=True,
              help="Render matplotlib figures next to the report.")
def bench_cmd(config_path, out, figures):
    """Run an experiment config and write a machine-readable report."""
    _require_file(config_path, "experiment config")
    with open(config_path) as fh:
        doc = json.load(fh)
    try:
        report = _run_bench(doc)
    except CalibrationMismatchError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_META_MISMATCH)
    except QtStreamError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    written = bench_mod.write_report(report, out, figures=figures)
    for path in written:
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
