"""Per-sample online monitoring on QuantTree partitions.

Two detector families live here:

* the EWMA detector: an exponentially weighted running proportion of
  samples per bin, compared to reference bin probabilities through a
  Pearson-like statistic and time-varying thresholds. With a finite
  updating-speed divisor ``beta`` the reference probabilities are
  themselves re-estimated online (the "update" variant); ``beta = inf``
  freezes them at their training-set estimates.
* a batch-wise baseline: the Pearson statistic on non-overlapping
  batches of ``nu`` samples against a single per-batch threshold.

A vectorized multi-stream engine (:func:`run_streams`) drives the same
recursions across many pre-binned streams at once; the benchmark harness
and the calibration simulator rely on it being numerically identical to
the per-sample API.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional

import numpy as np

from .errors import CalibrationMismatchError, MonitoringHaltedError
from .partition import QuantTreePartition, lookup

if TYPE_CHECKING:
    from .calibration import ThresholdTable

# guards the statistic denominator when an updated bin probability collapses
DENOM_FLOOR = 1e-9


def variant_name(beta: float) -> str:
    return "qt-ewma" if math.isinf(beta) else "qt-ewma-update"


def update_weight(beta: float, n_train: int, t: int) -> float:
    """Weight of the newest sample in the adaptive probability estimate."""
    return 1.0 / (beta * (n_train + t))


def _updating(beta: float, n_train: int, t: int, stop_at: Optional[int]) -> bool:
    # the update applies strictly while N + t < S; frozen at t >= S - N
    return not math.isinf(beta) and (stop_at is None or n_train + t < stop_at)


@dataclass
class DetectorState:
    """Mutable per-stream monitoring state for the EWMA detector."""

    z: np.ndarray
    p_hat: np.ndarray
    t: int
    lam: float
    beta: float
    stop_at: Optional[int]
    n_train: int
    detected_at: Optional[int] = None
    thresholds: "ThresholdTable" = field(default=None, repr=False)


@dataclass(frozen=True)
class StepResult:
    statistic: float
    threshold: float
    detected: bool


def qtewma_init(
    partition: QuantTreePartition,
    lam: float,
    thresholds: "ThresholdTable",
    beta: float = math.inf,
    stop_at: Optional[int] = None,
) -> DetectorState:
    """Create fresh monitoring state bound to a calibrated threshold table.

    Refuses to monitor if the table was calibrated for a different
    statistic identity (lambda, K, target probabilities, N, beta, S).
    """
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie in (0, 1)")
    if beta < 1.0:
        raise ValueError("beta must be >= 1 (inf for the non-updating detector)")
    meta = thresholds.meta
    mismatches = []
    if meta.k != partition.n_bins:
        mismatches.append("K")
    if meta.n_train != partition.n_train:
        mismatches.append("N")
    if not np.allclose(meta.target_probs, partition.target_probs, rtol=0, atol=1e-12):
        mismatches.append("target_probs")
    if meta.lam != lam:
        mismatches.append("lambda")
    if meta.beta != beta:
        mismatches.append("beta")
    if meta.stop_at != stop_at:
        mismatches.append("stop_at")
    if meta.variant != variant_name(beta):
        mismatches.append("variant")
    if mismatches:
        raise CalibrationMismatchError(
            f"threshold table does not match detector configuration: {', '.join(mismatches)}"
        )
    return DetectorState(
        z=partition.pi_tilde.copy(),
        p_hat=partition.pi_tilde.copy(),
        t=0,
        lam=lam,
        beta=beta,
        stop_at=stop_at,
        n_train=partition.n_train,
        thresholds=thresholds,
    )


def qtewma_step(state: DetectorState, partition: QuantTreePartition, x) -> StepResult:
    """Consume one sample: update state, return statistic/threshold/flag.

    Monitoring halts at detection; re-arm with :func:`qtewma_init`.
    """
    if state.detected_at is not None:
        raise MonitoringHaltedError(f"detection already reported at t={state.detected_at}")
    j = lookup(partition, x)
    t = state.t + 1
    state.t = t
    if _updating(state.beta, state.n_train, t, state.stop_at):
        w = update_weight(state.beta, state.n_train, t)
        state.p_hat *= 1.0 - w
        state.p_hat[j] += w
    state.z *= 1.0 - state.lam
    state.z[j] += state.lam
    denom = np.maximum(state.p_hat, DENOM_FLOOR)
    statistic = float(((state.z - state.p_hat) ** 2 / denom).sum())
    threshold = float(state.thresholds.threshold_at(t))
    detected = statistic > threshold
    if detected:
        state.detected_at = t
    return StepResult(statistic=statistic, threshold=threshold, detected=detected)


@dataclass(frozen=True)
class RunResult:
    detected: bool
    t_star: Optional[int]
    trace: Optional[list[tuple[int, float, float]]]


def run_stream(
    partition: QuantTreePartition,
    thresholds: "ThresholdTable",
    stream: Iterable,
    lam: float,
    beta: float = math.inf,
    stop_at: Optional[int] = None,
    keep_trace: bool = False,
) -> RunResult:
    """Monitor a stream until detection or exhaustion."""
    state = qtewma_init(partition, lam, thresholds, beta=beta, stop_at=stop_at)
    trace: Optional[list[tuple[int, float, float]]] = [] if keep_trace else None
    for x in stream:
        res = qtewma_step(state, partition, x)
        if keep_trace:
            trace.append((state.t, res.statistic, res.threshold))
        if res.detected:
            return RunResult(detected=True, t_star=state.t, trace=trace)
    return RunResult(detected=False, t_star=None, trace=trace)


# ---------------------------------------------------------------------------
# batch-wise Pearson baseline


@dataclass
class BatchDetectorState:
    """State of the batch-wise Pearson baseline.

    Stores per-bin counts of the current batch (O(K) memory, equivalent
    to buffering the batch itself for this statistic). Detection times
    are reported in samples: nu * batch_index.
    """

    counts: np.ndarray
    n_in_batch: int
    batch_index: int
    nu: int
    threshold: float
    detected_at_sample: Optional[int] = None


@dataclass(frozen=True)
class BatchResult:
    statistic: float
    detected: bool


def batch_init(partition: QuantTreePartition, nu: int, threshold: float) -> BatchDetectorState:
    return BatchDetectorState(
        counts=np.zeros(partition.n_bins, dtype=np.int64),
        n_in_batch=0,
        batch_index=0,
        nu=nu,
        threshold=threshold,
    )


def batch_statistic(counts: np.ndarray, pi_tilde: np.ndarray, nu: int) -> float:
    expected = nu * pi_tilde
    return float(((counts - expected) ** 2 / expected).sum())


def batch_step(
    state: BatchDetectorState, partition: QuantTreePartition, x
) -> Optional[BatchResult]:
    """Buffer one sample; emit a statistic when the batch fills."""
    if state.detected_at_sample is not None:
        raise MonitoringHaltedError(
            f"detection already reported at sample {state.detected_at_sample}"
        )
    j = lookup(partition, x)
    state.counts[j] += 1
    state.n_in_batch += 1
    if state.n_in_batch < state.nu:
        return None
    stat = batch_statistic(state.counts, partition.pi_tilde, state.nu)
    state.batch_index += 1
    state.n_in_batch = 0
    state.counts[:] = 0
    detected = stat > state.threshold
    if detected:
        state.detected_at_sample = state.nu * state.batch_index
    return BatchResult(statistic=stat, detected=detected)


# ---------------------------------------------------------------------------
# vectorized multi-stream engine


def run_streams(
    bin_indices: np.ndarray,
    pi_tilde: np.ndarray,
    lam: float,
    beta: float = math.inf,
    stop_at: Optional[int] = None,
    n_train: int = 0,
    thresholds: Optional[np.ndarray] = None,
    record_at: Optional[np.ndarray] = None,
) -> dict:
    """Run the EWMA recursion over many pre-binned streams at once.

    Parameters
    ----------
    bin_indices : (R, L) int array
        Bin index of each sample of each stream.
    pi_tilde : (K,) or (R, K) array
        Reference bin probabilities, shared or per-stream.
    thresholds : optional (L,) array
        Per-step thresholds; when given, detection times are recorded
        (the recursion continues past detection, later values of a
        detected stream are ignored).
    record_at : optional int array
        1-based times at which to record the statistic for every stream.

    Returns a dict with ``t_star`` ((R,) int array, 0 = no detection)
    and, when requested, ``recorded`` ((len(record_at), R) array).
    """
    bin_indices = np.asarray(bin_indices)
    n_runs, length = bin_indices.shape
    pt = np.asarray(pi_tilde, dtype=float)
    if pt.ndim == 1:
        pt = np.broadcast_to(pt, (n_runs, pt.size))
    z = pt.copy()
    updating_variant = not math.isinf(beta)
    p_hat = pt.copy() if updating_variant else pt
    rows = np.arange(n_runs)
    t_star = np.zeros(n_runs, dtype=np.int64)
    record_at = None if record_at is None else np.asarray(record_at)
    recorded = None if record_at is None else np.empty((record_at.size, n_runs))
    rec_pos = {int(t): i for i, t in enumerate(record_at)} if record_at is not None else {}

    for step in range(length):
        t = step + 1
        idx = bin_indices[:, step]
        if updating_variant and _updating(beta, n_train, t, stop_at):
            w = update_weight(beta, n_train, t)
            p_hat *= 1.0 - w
            p_hat[rows, idx] += w
        z *= 1.0 - lam
        z[rows, idx] += lam
        denom = np.maximum(p_hat, DENOM_FLOOR)
        stat = ((z - p_hat) ** 2 / denom).sum(axis=1)
        if thresholds is not None:
            hit = (stat > thresholds[step]) & (t_star == 0)
            t_star[hit] = t
        if t in rec_pos:
            recorded[rec_pos[t]] = stat

    out = {"t_star": t_star}
    if recorded is not None:
        out["recorded"] = recorded
    return out


def run_batch_streams(
    bin_indices: np.ndarray,
    pi_tilde: np.ndarray,
    nu: int,
    threshold: float,
) -> np.ndarray:
    """Batch-wise Pearson baseline over many pre-binned streams.

    Returns detection times in samples (nu * first exceeding batch),
    0 when no batch exceeds the threshold.
    """
    bin_indices = np.asarray(bin_indices)
    n_runs, length = bin_indices.shape
    pt = np.asarray(pi_tilde, dtype=float)
    if pt.ndim == 1:
        pt = np.broadcast_to(pt, (n_runs, pt.size))
    k = pt.shape[1]
    n_batches = length // nu
    expected = nu * pt
    t_star = np.zeros(n_runs, dtype=np.int64)
    for b in range(n_batches):
        chunk = bin_indices[:, b * nu : (b + 1) * nu]
        counts = np.stack([(chunk == j).sum(axis=1) for j in range(k)], axis=1)
        stat = ((counts - expected) ** 2 / expected).sum(axis=1)
        hit = (stat > threshold) & (t_star == 0)
        t_star[hit] = (b + 1) * nu
    return t_star
