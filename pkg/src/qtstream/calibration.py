"""Monte Carlo threshold calibration controlling the average run length.

The statistic of the EWMA detector, computed on a QuantTree partition,
has a distribution that does not depend on the monitored law or on the
data dimension. Calibration therefore never touches real data: each
replicate draws a bin-probability vector from the Dirichlet law of a
fitted partition, simulates a stationary stream of one-hot bin
indicators from it, and runs the exact detector recursion.

Thresholds are conditional quantiles: h_t is the (1 - alpha)-quantile of
the statistic at time t among the replicates that never exceeded any
earlier threshold, which makes the per-step alarm hazard constant and
the run length geometric with mean 1/alpha. Detectors evaluate the raw
conditional quantile while t is inside the simulated horizon; a
polynomial in powers of 1/t fitted to the raw series extrapolates
thresholds beyond it.

Replicates are simulated in fixed-size chunks, each with its own RNG
substream keyed by the chunk index. Worker threads only parallelize the
per-step chunk work and results are merged in chunk order, so the output
is bitwise identical for any worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .detector import DENOM_FLOOR, _updating, update_weight, variant_name
from .errors import FitError, MemoryBudgetError
from .partition import _check_simplex, dirichlet_parameters, compute_pi_tilde
from .rng import substream

TABLE_FORMAT = "qtstream.thresholds"
TABLE_VERSION = 1

# chunking is part of the determinism contract: results depend on
# (seed, chunk_size) but never on the worker count
DEFAULT_CHUNK_SIZE = 20_000
DEFAULT_FIT_DEGREE = 7
SURVIVOR_FLOOR = 20
DEFAULT_MEMORY_BUDGET = 2 << 30  # bytes of materialized statistic paths

DEFAULT_LENGTH = 5000
FULL_SCALE_REPLICATES = 1_000_000


@dataclass(frozen=True)
class CalibrationMeta:
    """Full identity of a threshold table.

    Two calibrations with equal meta produce bitwise identical tables;
    detectors refuse tables whose identity fields differ from their own
    configuration.
    """

    lam: float
    k: int
    target_probs: tuple[float, ...]
    n_train: int
    beta: float
    stop_at: Optional[int]
    arl0_target: float
    replicates: int
    length: int
    seed: int
    fit_degree: int
    chunk_size: int = DEFAULT_CHUNK_SIZE

    @property
    def alpha(self) -> float:
        return 1.0 / self.arl0_target

    @property
    def variant(self) -> str:
        return variant_name(self.beta)

    def to_dict(self) -> dict:
        return {
            "lam": float.hex(self.lam),
            "k": self.k,
            "target_probs": [float.hex(p) for p in self.target_probs],
            "n_train": self.n_train,
            "beta": "inf" if math.isinf(self.beta) else float.hex(self.beta),
            "stop_at": self.stop_at,
            "arl0_target": self.arl0_target,
            "alpha": self.alpha,
            "replicates": self.replicates,
            "length": self.length,
            "seed": self.seed,
            "fit_degree": self.fit_degree,
            "chunk_size": self.chunk_size,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibrationMeta":
        beta = math.inf if doc["beta"] == "inf" else float.fromhex(doc["beta"])
        return cls(
            lam=float.fromhex(doc["lam"]),
            k=doc["k"],
            target_probs=tuple(float.fromhex(p) for p in doc["target_probs"]),
            n_train=doc["n_train"],
            beta=beta,
            stop_at=doc["stop_at"],
            arl0_target=doc["arl0_target"],
            replicates=doc["replicates"],
            length=doc["length"],
            seed=doc["seed"],
            fit_degree=doc["fit_degree"],
            chunk_size=doc.get("chunk_size", DEFAULT_CHUNK_SIZE),
        )

    def cache_key(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class ThresholdTable:
    """Calibrated thresholds: raw conditional quantiles + 1/t polynomial."""

    raw_t: np.ndarray
    raw_h: np.ndarray
    survivors: np.ndarray
    poly_coeffs: np.ndarray
    meta: CalibrationMeta
    fit_rms: float

    def threshold_at(self, t) -> np.ndarray | float:
        """Threshold h(t): raw conditional quantile inside the simulated
        horizon, fitted polynomial h(t) = sum_m c_m t^(-m) beyond it.

        The raw quantiles are the exact calibrated thresholds (constant
        per-step hazard by construction); the polynomial carries the
        extrapolation past the last step with enough surviving
        replicates.
        """
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        inv = 1.0 / t
        out = np.zeros_like(inv)
        for c in self.poly_coeffs[::-1]:
            out = out * inv + c
        horizon = self.raw_t[-1] if self.raw_t.size else 0
        inside = (t >= 1) & (t <= horizon)
        if np.any(inside):
            idx = np.rint(t[inside]).astype(np.int64) - 1
            out[inside] = self.raw_h[idx]
        return float(out[0]) if scalar else out

    def to_json(self) -> str:
        doc = {
            "format": TABLE_FORMAT,
            "version": TABLE_VERSION,
            "meta": self.meta.to_dict(),
            "fit": {
                "degree": self.meta.fit_degree,
                "coeffs": [float.hex(float(c)) for c in self.poly_coeffs],
                "rms_residual": self.fit_rms,
            },
            "raw": {
                "t": self.raw_t.tolist(),
                "h": [float.hex(float(h)) for h in self.raw_h],
                "survivors": self.survivors.tolist(),
            },
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ThresholdTable":
        doc = json.loads(text)
        if doc.get("format") != TABLE_FORMAT:
            raise ValueError(f"not a threshold table file (format={doc.get('format')!r})")
        if doc.get("version") != TABLE_VERSION:
            raise ValueError(f"unsupported table version {doc.get('version')!r}")
        return cls(
            raw_t=np.asarray(doc["raw"]["t"], dtype=np.int64),
            raw_h=np.array([float.fromhex(h) for h in doc["raw"]["h"]]),
            survivors=np.asarray(doc["raw"]["survivors"], dtype=np.int64),
            poly_coeffs=np.array([float.fromhex(c) for c in doc["fit"]["coeffs"]]),
            meta=CalibrationMeta.from_dict(doc["meta"]),
            fit_rms=doc["fit"]["rms_residual"],
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ThresholdTable":
        with open(path) as fh:
            return cls.from_json(fh.read())


# ---------------------------------------------------------------------------
# simulation core


class _ChunkState:
    """Simulation state of one chunk of replicates.

    Uniform draws are taken for the full chunk every step, dead rows
    included, so the stream of random numbers is identical whether or
    not replicates are being retired (this keeps the streaming and
    materialized code paths bitwise consistent).
    """

    def __init__(self, meta: CalibrationMeta, chunk_index: int, size: int):
        self.rng = substream(meta.seed, chunk_index)
        self.size = size
        tp = np.asarray(meta.target_probs)
        alpha = dirichlet_parameters(tp, meta.n_train)
        gammas = self.rng.gamma(shape=alpha, size=(size, meta.k))
        probs = gammas / gammas.sum(axis=1, keepdims=True)
        self.cum = np.cumsum(probs, axis=1)[:, :-1]
        pi_tilde = compute_pi_tilde(tp, meta.n_train)
        self.z = np.broadcast_to(pi_tilde, (size, meta.k)).copy()
        self.updating_variant = not math.isinf(meta.beta)
        self.p_hat = self.z.copy() if self.updating_variant else self.z
        self.pi_tilde_row = pi_tilde
        self.alive = np.arange(size)
        self.meta = meta

    def step(self, t: int) -> np.ndarray:
        """Advance alive replicates to time t, return their statistics."""
        u = self.rng.random(self.size)
        if self.alive.size == 0:
            return np.empty(0)
        m = self.meta
        u_alive = u[self.alive]
        idx = (self.cum < u_alive[:, None]).sum(axis=1)
        rows = np.arange(self.alive.size)
        if self.updating_variant and _updating(m.beta, m.n_train, t, m.stop_at):
            w = update_weight(m.beta, m.n_train, t)
            self.p_hat *= 1.0 - w
            self.p_hat[rows, idx] += w
        z = self.z
        z *= 1.0 - m.lam
        z[rows, idx] += m.lam
        if self.updating_variant:
            denom = np.maximum(self.p_hat, DENOM_FLOOR)
            return ((z - self.p_hat) ** 2 / denom).sum(axis=1)
        denom = np.maximum(self.pi_tilde_row, DENOM_FLOOR)
        return ((z - self.pi_tilde_row) ** 2 / denom).sum(axis=1)

    def retire(self, keep: np.ndarray) -> None:
        """Compact state down to the surviving rows (boolean mask)."""
        self.alive = self.alive[keep]
        self.cum = self.cum[keep]
        self.z = self.z[keep]
        if self.updating_variant:
            self.p_hat = self.p_hat[keep]


def _chunk_sizes(replicates: int, chunk_size: int) -> list[int]:
    full, rem = divmod(replicates, chunk_size)
    return [chunk_size] * full + ([rem] if rem else [])


def _validate_sim_params(meta: CalibrationMeta) -> None:
    _check_simplex(np.asarray(meta.target_probs))
    if meta.replicates < 10_000:
        raise ValueError("need at least 10^4 replicates for usable quantiles")
    if meta.replicates < 100_000:
        warnings.warn(
            f"replicate count {meta.replicates} below 10^5: threshold noise widens "
            "the achievable ARL0 tolerance",
            stacklevel=3,
        )
    if meta.length < 1:
        raise ValueError("simulation length must be >= 1")


def simulate_statistic_paths(
    k: int,
    target_probs,
    n_train: int,
    lam: float,
    beta: float = math.inf,
    stop_at: Optional[int] = None,
    replicates: int = 100_000,
    length: int = DEFAULT_LENGTH,
    seed: int = 0,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
    workers: int = 1,
) -> np.ndarray:
    """Materialize statistic paths T_1..T_length for every replicate.

    Returns a (replicates, length) array. Refuses to allocate beyond
    ``memory_budget`` bytes; use :func:`calibrate` (streaming) instead.
    """
    meta = CalibrationMeta(
        lam=lam,
        k=k,
        target_probs=tuple(np.asarray(target_probs, dtype=float)),
        n_train=n_train,
        beta=beta,
        stop_at=stop_at,
        arl0_target=2.0,  # unused by the simulator
        replicates=replicates,
        length=length,
        seed=seed,
        fit_degree=DEFAULT_FIT_DEGREE,
    )
    _validate_sim_params(meta)
    need = replicates * length * 8
    if need > memory_budget:
        raise MemoryBudgetError(
            f"{replicates} x {length} paths need {need} bytes "
            f"(budget {memory_budget}); use streaming calibration"
        )
    paths = np.empty((replicates, length))
    sizes = _chunk_sizes(replicates, meta.chunk_size)
    offset = 0
    for c, size in enumerate(sizes):
        state = _ChunkState(meta, c, size)
        for step in range(length):
            paths[offset : offset + size, step] = state.step(step + 1)
        offset += size
    return paths


def conditional_quantile_thresholds(
    paths: np.ndarray, alpha: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Conditional (1 - alpha)-quantiles from materialized paths.

    h_t is the quantile of T_t over the replicates that survived every
    earlier threshold. Truncates (with a warning) once fewer than
    SURVIVOR_FLOOR replicates survive; the polynomial fit carries the
    tail. Returns (t, h, survivor counts entering each step).
    """
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    paths = np.asarray(paths)
    replicates, length = paths.shape
    alive = np.arange(replicates)
    ts, hs, ns = [], [], []
    for step in range(length):
        if alive.size < SURVIVOR_FLOOR:
            warnings.warn(
                f"survivor count {alive.size} below {SURVIVOR_FLOOR} at t={step + 1}; "
                "truncating raw thresholds",
                stacklevel=2,
            )
            break
        vals = paths[alive, step]
        h = np.quantile(vals, 1.0 - alpha)
        ts.append(step + 1)
        hs.append(h)
        ns.append(alive.size)
        alive = alive[vals <= h]
    return np.asarray(ts, dtype=np.int64), np.asarray(hs), np.asarray(ns, dtype=np.int64)


def _streaming_thresholds(
    meta: CalibrationMeta, workers: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Conditional quantiles without materializing paths.

    Survivors are tracked online: each step computes the statistic for
    the replicates still alive, takes the quantile, and retires the
    exceeders. Exact (no reservoirs), and bitwise identical to the
    materialized route because the RNG consumption matches.
    """
    _validate_sim_params(meta)
    alpha = meta.alpha
    sizes = _chunk_sizes(meta.replicates, meta.chunk_size)
    chunks = [_ChunkState(meta, c, size) for c, size in enumerate(sizes)]
    ts, hs, ns = [], [], []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for step in range(meta.length):
            t = step + 1
            if pool is not None:
                stats = list(pool.map(lambda ch: ch.step(t), chunks))
            else:
                stats = [ch.step(t) for ch in chunks]
            all_vals = np.concatenate(stats)
            if all_vals.size < SURVIVOR_FLOOR:
                warnings.warn(
                    f"survivor count {all_vals.size} below {SURVIVOR_FLOOR} at t={t}; "
                    "truncating raw thresholds",
                    stacklevel=3,
                )
                break
            h = np.quantile(all_vals, 1.0 - alpha)
            ts.append(t)
            hs.append(h)
            ns.append(all_vals.size)
            for ch, vals in zip(chunks, stats):
                ch.retire(vals <= h)
    finally:
        if pool is not None:
            pool.shutdown()
    return np.asarray(ts, dtype=np.int64), np.asarray(hs), np.asarray(ns, dtype=np.int64)


def fit_threshold_polynomial(
    raw_t: np.ndarray,
    raw_h: np.ndarray,
    degree: int = DEFAULT_FIT_DEGREE,
    weights: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, float]:
    """Weighted least squares of h_t on the basis {1, 1/t, ..., t^-q}.

    Weights default to uniform; calibration passes survivor counts
    (effective sample size of each raw quantile). Returns
    (coefficients c_0..c_q, weighted RMS residual).
    """
    raw_t = np.asarray(raw_t, dtype=float)
    raw_h = np.asarray(raw_h, dtype=float)
    if degree < 1:
        raise FitError("degree must be >= 1: early thresholds are non-constant")
    if raw_t.size == 0:
        raise FitError("empty raw threshold series")
    if raw_t.size < degree + 1:
        raise FitError(f"{raw_t.size} raw thresholds cannot support degree {degree}")
    design = np.vander(1.0 / raw_t, degree + 1, increasing=True)
    w = np.ones_like(raw_h) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    coeffs, _, rank, _ = np.linalg.lstsq(design * sw[:, None], raw_h * sw, rcond=None)
    if rank < degree + 1:
        raise FitError("rank-deficient design matrix in threshold fit")
    resid = design @ coeffs - raw_h
    rms = float(np.sqrt((w * resid**2).sum() / w.sum()))
    return coeffs, rms


def calibrate(
    arl0_target: float,
    lam: float,
    k: int,
    n_train: int,
    target_probs=None,
    beta: float = math.inf,
    stop_at: Optional[int] = None,
    replicates: int = 100_000,
    length: int = DEFAULT_LENGTH,
    seed: int = 0,
    fit_degree: int = DEFAULT_FIT_DEGREE,
    workers: int = 1,
    cache_dir: Optional[str] = None,
) -> ThresholdTable:
    """End-to-end calibration: simulate, quantile, fit, assemble table.

    Deterministic given the meta tuple; with ``cache_dir`` the table is
    persisted under a meta-derived name and reloaded on repeat calls.
    """
    if target_probs is None:
        target_probs = np.full(k, 1.0 / k)
    meta = CalibrationMeta(
        lam=lam,
        k=k,
        target_probs=tuple(np.asarray(target_probs, dtype=float)),
        n_train=n_train,
        beta=beta,
        stop_at=stop_at,
        arl0_target=float(arl0_target),
        replicates=replicates,
        length=length,
        seed=seed,
        fit_degree=fit_degree,
    )
    cache_path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        cache_path = os.path.join(cache_dir, f"thresholds-{meta.cache_key()}.json")
        if os.path.exists(cache_path):
            return ThresholdTable.load(cache_path)

    raw_t, raw_h, survivors = _streaming_thresholds(meta, workers=workers)
    coeffs, rms = fit_threshold_polynomial(raw_t, raw_h, degree=fit_degree, weights=survivors)
    table = ThresholdTable(
        raw_t=raw_t,
        raw_h=raw_h,
        survivors=survivors,
        poly_coeffs=coeffs,
        meta=meta,
        fit_rms=rms,
    )
    _check_positive(table)
    if cache_path is not None:
        table.save(cache_path)
    return table


def _check_positive(table: ThresholdTable) -> None:
    grid = np.arange(1, 10 * table.meta.length + 1, dtype=float)
    vals = table.threshold_at(grid)
    if np.any(vals <= 0):
        bad = int(grid[np.argmax(vals <= 0)])
        raise FitError(f"fitted threshold polynomial non-positive at t={bad}")


# ---------------------------------------------------------------------------
# batch-wise baseline threshold


@dataclass(frozen=True)
class BatchThreshold:
    """Per-batch Pearson threshold with its calibration metadata."""

    threshold: float
    nu: int
    alpha: float
    k: int
    target_probs: tuple[float, ...]
    n_train: int
    replicates: int
    seed: int


def calibrate_batch_threshold(
    k: int,
    target_probs,
    n_train: int,
    nu: int,
    alpha: float,
    replicates: int = 500_000,
    seed: int = 0,
) -> BatchThreshold:
    """Monte Carlo threshold for the batch-wise Pearson statistic.

    Draws bin probabilities from the Dirichlet law, batch counts from
    the corresponding multinomial, and takes the (1 - alpha)-quantile of
    the statistic. Setting alpha = nu / ARL0 makes the resulting online
    scheme conservative (its average run length is at least the target).
    """
    tp = _check_simplex(np.asarray(target_probs, dtype=float))
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    rng = substream(seed, 0)
    al = dirichlet_parameters(tp, n_train)
    gammas = rng.gamma(shape=al, size=(replicates, k))
    probs = gammas / gammas.sum(axis=1, keepdims=True)
    counts = rng.multinomial(nu, probs)
    expected = nu * compute_pi_tilde(tp, n_train)
    stats = ((counts - expected) ** 2 / expected).sum(axis=1)
    h = float(np.quantile(stats, 1.0 - alpha))
    return BatchThreshold(
        threshold=h,
        nu=nu,
        alpha=alpha,
        k=k,
        target_probs=tuple(tp),
        n_train=n_train,
        replicates=replicates,
        seed=seed,
    )


def replay_hazard(
    table: ThresholdTable,
    check_times: list[int],
    replicates: int = 20_000,
    seed: int = 12345,
) -> dict[int, tuple[float, int]]:
    """Out-of-sample alarm hazard against the fitted thresholds.

    Simulates fresh stationary paths (different seed) and measures, at
    each requested time, the fraction of still-alive replicates whose
    statistic exceeds the fitted threshold. Returns
    {t: (hazard estimate, alive count)}.
    """
    meta = replace(table.meta, replicates=replicates, seed=seed, length=max(check_times))
    sizes = _chunk_sizes(replicates, meta.chunk_size)
    chunks = [_ChunkState(meta, c, size) for c, size in enumerate(sizes)]
    out: dict[int, tuple[float, int]] = {}
    wanted = set(check_times)
    for step in range(meta.length):
        t = step + 1
        stats = [ch.step(t) for ch in chunks]
        all_vals = np.concatenate(stats)
        if all_vals.size == 0:
            break
        h = float(table.threshold_at(t))
        if t in wanted:
            out[t] = (float((all_vals > h).mean()), int(all_vals.size))
        for ch, vals in zip(chunks, stats):
            ch.retire(vals <= h)
    return out
