"""Benchmark harness: run-length, delay/false-alarm and AUC experiments.

Every experiment runs many independent monitored streams. Each run gets
its own training set, partition and stream from run-indexed RNG
substreams, so results are reproducible and independent of the worker
count (runs are processed in fixed chunks and merged in run order).

Aggregation is split into pure functions operating on detection-time
arrays so they can be validated against synthetic geometric inputs
without any detector in the loop.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .calibration import BatchThreshold, ThresholdTable
from .datagen import ChangeSpec, CsvLaw, IngestedDataset, Law, StreamSpec, generate_array
from .detector import run_batch_streams, run_streams, variant_name
from .partition import build_partition, lookup_array
from .rng import substream

REPORT_SCHEMA_VERSION = "qtstream.report/1"

# fixed chunking keeps results independent of the worker count
RUN_CHUNK = 250

# substitutions relative to the published evaluation protocol, stamped
# into every report that uses the corresponding feature
DEVIATION_MEAN_SHIFT = "mean-shift change generator substituted for CCM roto-translation"


def geometric_false_alarm_rate(alpha: float, t: int) -> float:
    """Cumulative alarm probability by time t for a geometric run length."""
    return 1.0 - (1.0 - alpha) ** t


# ---------------------------------------------------------------------------
# pure aggregators


@dataclass(frozen=True)
class Arl0Result:
    empirical_arl0: float
    ci_low: float
    ci_high: float
    n_detected: int
    n_censored: int
    t_stars: np.ndarray = field(repr=False)


def aggregate_arl0(t_stars: np.ndarray, length: int) -> Arl0Result:
    """Mean detection time on stationary streams.

    Non-detections (t_star == 0) are right-censored: counted and
    reported, excluded from the mean. CI is the normal approximation
    over detected runs.
    """
    t_stars = np.asarray(t_stars)
    detected = t_stars[t_stars > 0]
    censored = int((t_stars == 0).sum())
    if detected.size == 0:
        return Arl0Result(math.nan, math.nan, math.nan, 0, censored, t_stars)
    mean = float(detected.mean())
    half = 1.96 * float(detected.std(ddof=1)) / math.sqrt(detected.size)
    return Arl0Result(mean, mean - half, mean + half, int(detected.size), censored, t_stars)


@dataclass(frozen=True)
class DelayFarResult:
    arl1: Optional[float]
    false_alarm_rate: float
    n_false_alarms: int
    n_valid_detections: int
    n_censored: int
    t_stars: np.ndarray = field(repr=False)
    delays: np.ndarray = field(repr=False)


def aggregate_delay_far(t_stars: np.ndarray, tau: int) -> DelayFarResult:
    """Detection delay and false-alarm rate for streams changed at tau.

    Delay is averaged over runs detecting at t* >= tau; runs with
    t* < tau are false alarms; non-detections are censored and reported.
    """
    t_stars = np.asarray(t_stars)
    n = t_stars.size
    false_alarms = int(((t_stars > 0) & (t_stars < tau)).sum())
    valid = t_stars[t_stars >= tau]
    censored = int((t_stars == 0).sum())
    delays = valid - tau
    arl1 = float(delays.mean()) if delays.size else None
    return DelayFarResult(
        arl1=arl1,
        false_alarm_rate=false_alarms / n,
        n_false_alarms=false_alarms,
        n_valid_detections=int(valid.size),
        n_censored=censored,
        t_stars=t_stars,
        delays=delays,
    )


def rank_auc(positives: np.ndarray, negatives: np.ndarray) -> float:
    """Mann-Whitney AUC with midrank tie handling."""
    pos = np.asarray(positives, dtype=float)
    neg = np.asarray(negatives, dtype=float)
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


# ---------------------------------------------------------------------------
# run machinery


@dataclass(frozen=True)
class DetectorConfig:
    """Identity of the EWMA detector under test."""

    lam: float
    n_train: int
    k: int
    beta: float = math.inf
    stop_at: Optional[int] = None
    target_probs: Optional[tuple[float, ...]] = None

    def probs(self) -> np.ndarray:
        if self.target_probs is None:
            return np.full(self.k, 1.0 / self.k)
        return np.asarray(self.target_probs)

    def to_dict(self) -> dict:
        return {
            "lam": self.lam,
            "n_train": self.n_train,
            "k": self.k,
            "beta": "inf" if math.isinf(self.beta) else self.beta,
            "stop_at": self.stop_at,
            "variant": variant_name(self.beta),
        }


@dataclass(frozen=True)
class StreamFamily:
    """Template for one family of monitored streams."""

    phi0: Law
    length: int
    change: Optional[ChangeSpec] = None

    def to_dict(self) -> dict:
        return {
            "phi0": self.phi0.to_dict(),
            "length": self.length,
            "change": None if self.change is None else self.change.to_dict(),
        }


def _run_seed_int(base_seed: int, run: int, slot: int) -> int:
    return int(
        np.random.SeedSequence(entropy=base_seed, spawn_key=(run, slot)).generate_state(1)[0]
    )


def _prepare_run(
    cfg: DetectorConfig, family: StreamFamily, base_seed: int, run: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-run (bin index sequence, pi_tilde) via fresh training + stream."""
    phi0 = family.phi0
    if isinstance(phi0, CsvLaw):
        dataset = IngestedDataset(data=phi0.data, path=phi0.path)
        train, stream_law = dataset.train_and_stream(
            cfg.n_train, seed=_run_seed_int(base_seed, run, 0)
        )
    else:
        train = phi0.sample(cfg.n_train, substream(base_seed, run, 0))
        stream_law = phi0
    partition = build_partition(
        train, cfg.probs(), np.random.SeedSequence(entropy=base_seed, spawn_key=(run, 1))
    )
    spec = StreamSpec(
        d=partition.dim,
        phi0=stream_law,
        length=family.length,
        seed=_run_seed_int(base_seed, run, 2),
        change=family.change,
    )
    stream = generate_array(spec)
    return lookup_array(partition, stream), partition.pi_tilde


def _run_chunk(args) -> dict:
    (cfg, family, base_seed, run_ids, thresholds, record_at, batch) = args
    bins = np.empty((len(run_ids), family.length), dtype=np.int64)
    pi_tilde = None
    for i, run in enumerate(run_ids):
        bins[i], pi_tilde = _prepare_run(cfg, family, base_seed, run)
    if batch is not None:
        t_star = run_batch_streams(bins, pi_tilde, nu=batch.nu, threshold=batch.threshold)
        return {"run_ids": run_ids, "t_star": t_star}
    out = run_streams(
        bins,
        pi_tilde,
        lam=cfg.lam,
        beta=cfg.beta,
        stop_at=cfg.stop_at,
        n_train=cfg.n_train,
        thresholds=thresholds,
        record_at=record_at,
    )
    out["run_ids"] = run_ids
    return out


def run_monitoring_runs(
    cfg: DetectorConfig,
    family: StreamFamily,
    runs: int,
    base_seed: int,
    table: Optional[ThresholdTable] = None,
    batch: Optional[BatchThreshold] = None,
    record_at: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> dict:
    """Monitor ``runs`` independent streams; merge results in run order.

    Provide ``table`` for the EWMA detector (detection times via its
    fitted thresholds), ``batch`` for the batch-wise baseline, or
    neither plus ``record_at`` for threshold-free statistic traces.
    """
    thresholds = None
    if table is not None:
        thresholds = np.asarray(table.threshold_at(np.arange(1, family.length + 1, dtype=float)))
    record = None if record_at is None else np.asarray(record_at, dtype=np.int64)
    chunks = [
        (cfg, family, base_seed, list(range(s, min(s + RUN_CHUNK, runs))), thresholds, record, batch)
        for s in range(0, runs, RUN_CHUNK)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, chunks))
    else:
        results = [_run_chunk(c) for c in chunks]
    t_star = np.concatenate([r["t_star"] for r in results])
    out = {"t_star": t_star}
    if record is not None:
        out["recorded"] = np.concatenate([r["recorded"] for r in results], axis=1)
    return out


# ---------------------------------------------------------------------------
# experiments


def measure_arl0(
    cfg: DetectorConfig,
    table: ThresholdTable,
    family: StreamFamily,
    runs: int,
    base_seed: int,
    workers: int = 1,
) -> Arl0Result:
    """Empirical average run length on stationary streams."""
    if family.change is not None:
        raise ValueError("ARL0 measurement needs a stationary stream family")
    if runs < 100:
        raise ValueError("need at least 100 runs for a meaningful CI")
    res = run_monitoring_runs(cfg, family, runs, base_seed, table=table, workers=workers)
    return aggregate_arl0(res["t_star"], family.length)


def measure_delay_far(
    cfg: DetectorConfig,
    table: ThresholdTable,
    family: StreamFamily,
    runs: int,
    base_seed: int,
    workers: int = 1,
) -> DelayFarResult:
    """Detection delay and false-alarm rate on changed streams."""
    if family.change is None:
        raise ValueError("delay measurement needs a stream family with a change point")
    res = run_monitoring_runs(cfg, family, runs, base_seed, table=table, workers=workers)
    return aggregate_delay_far(res["t_star"], family.change.tau)


def measure_batch_arl0(
    cfg: DetectorConfig,
    batch: BatchThreshold,
    family: StreamFamily,
    runs: int,
    base_seed: int,
    workers: int = 1,
) -> Arl0Result:
    """Empirical average run length of the batch-wise Pearson baseline."""
    if family.change is not None:
        raise ValueError("ARL0 measurement needs a stationary stream family")
    if runs < 100:
        raise ValueError("need at least 100 runs for a meaningful CI")
    res = run_monitoring_runs(cfg, family, runs, base_seed, batch=batch, workers=workers)
    return aggregate_arl0(res["t_star"], family.length)


def auc_by_lag(
    cfgs: dict[str, DetectorConfig],
    stationary: StreamFamily,
    changed: StreamFamily,
    lags: Sequence[int],
    runs: int,
    base_seed: int,
    workers: int = 1,
) -> dict[str, dict[int, float]]:
    """Detection power of the raw statistic at fixed lags after the change.

    For each lag l, the AUC separates the statistic at time tau + l on
    changed streams from its value at the same time on stationary
    streams (rank estimator, no thresholds involved). Lags beyond the
    stream length are skipped.
    """
    if changed.change is None:
        raise ValueError("auc_by_lag needs a changed stream family")
    tau = changed.change.tau
    usable = [l for l in lags if tau + l <= min(stationary.length, changed.length)]
    times = [tau + l for l in usable]
    out: dict[str, dict[int, float]] = {}
    for name, cfg in cfgs.items():
        res_chg = run_monitoring_runs(
            cfg, changed, runs, base_seed, record_at=times, workers=workers
        )
        res_sta = run_monitoring_runs(
            cfg, stationary, runs, base_seed + 1, record_at=times, workers=workers
        )
        out[name] = {
            lag: rank_auc(res_chg["recorded"][i], res_sta["recorded"][i])
            for i, lag in enumerate(usable)
        }
    return out


# ---------------------------------------------------------------------------
# reports


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "experiment", "config", "aggregates", "runs", "deviations"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "experiment": {"type": "string"},
        "config": {"type": "object"},
        "aggregates": {"type": "object"},
        "deviations": {"type": "array", "items": {"type": "string"}},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["run", "t_star"],
                "properties": {
                    "run": {"type": "integer"},
                    "t_star": {"type": ["integer", "null"]},
                    "tau": {"type": ["integer", "null"]},
                    "false_alarm": {"type": ["boolean", "null"]},
                    "censored": {"type": "boolean"},
                },
            },
        },
    },
}


@dataclass(frozen=True)
class ExperimentReport:
    """Aggregate results plus per-run records and protocol deviations."""

    experiment: str
    config: dict
    aggregates: dict
    runs: list[dict]
    deviations: list[str]

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "experiment": self.experiment,
            "config": self.config,
            "aggregates": self.aggregates,
            "runs": self.runs,
            "deviations": self.deviations,
        }

    def validate(self) -> None:
        import jsonschema

        jsonschema.validate(self.to_dict(), REPORT_SCHEMA)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentReport":
        doc = json.loads(text)
        if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {doc.get('schema_version')!r}")
        return cls(
            experiment=doc["experiment"],
            config=doc["config"],
            aggregates=doc["aggregates"],
            runs=doc["runs"],
            deviations=doc["deviations"],
        )


def run_records(t_stars: np.ndarray, tau: Optional[int]) -> list[dict]:
    records = []
    for run, t in enumerate(np.asarray(t_stars)):
        t_star = int(t) if t > 0 else None
        records.append(
            {
                "run": run,
                "t_star": t_star,
                "tau": tau,
                "false_alarm": None if tau is None or t_star is None else t_star < tau,
                "censored": t_star is None,
            }
        )
    return records


def write_report(report: ExperimentReport, outdir, figures: bool = False) -> list[str]:
    """Write report.json plus the delimited per-run table; optional figures.

    Report bodies contain no timestamps, so identical configurations
    yield byte-identical artifacts.
    """
    report.validate()
    os.makedirs(outdir, exist_ok=True)
    written = []
    json_path = os.path.join(outdir, "report.json")
    with open(json_path, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    written.append(json_path)
    csv_path = os.path.join(outdir, "runs.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "t_star", "tau", "false_alarm", "censored"])
        for rec in report.runs:
            writer.writerow(
                [rec["run"], rec["t_star"], rec["tau"], rec["false_alarm"], rec["censored"]]
            )
    written.append(csv_path)
    if figures:
        from .figures import render_report_figures

        written.extend(render_report_figures(report, outdir))
    return written
