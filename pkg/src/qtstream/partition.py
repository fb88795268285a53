"""QuantTree histogram partitions.

A partition is a sequence of K-1 axis-aligned tail cuts over R^d. Cut j
isolates bin j from the training points that survived cuts 0..j-1, so
that bin j holds a prescribed number of training points. The remaining
points after the last cut form bin K-1.

The true mass of each bin under the (unknown) training distribution is a
Dirichlet random vector; :func:`sample_bin_probabilities` draws from that
law either directly (Gamma normalization) or through the equivalent
stick-breaking construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCutError, DimensionMismatchError, InvalidTrainingError
from .rng import SeedLike, as_generator

PARTITION_FORMAT = "qtstream.partition"
PARTITION_VERSION = 1

_SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class Cut:
    """One axis-aligned tail cut.

    ``direction`` is "lower" (bin = points with coordinate <= threshold)
    or "upper" (bin = points with coordinate >= threshold). The
    threshold sits exactly on a training order statistic, which is what
    makes the true bin masses follow the Dirichlet law exactly.
    """

    dim: int
    direction: str
    threshold: float


@dataclass(frozen=True)
class QuantTreePartition:
    """A fitted QuantTree histogram. Immutable after construction."""

    cuts: tuple[Cut, ...]
    bin_counts: tuple[int, ...]
    target_probs: np.ndarray
    pi_tilde: np.ndarray
    n_train: int
    dim: int
    seed: int | None = None

    @property
    def n_bins(self) -> int:
        return len(self.bin_counts)

    def lookup(self, x) -> int:
        return lookup(self, x)

    def lookup_array(self, xs: np.ndarray) -> np.ndarray:
        return lookup_array(self, xs)

    def to_json(self) -> str:
        doc = {
            "format": PARTITION_FORMAT,
            "version": PARTITION_VERSION,
            "dim": self.dim,
            "n_train": self.n_train,
            "seed": self.seed,
            "bin_counts": list(self.bin_counts),
            "target_probs": [float.hex(float(p)) for p in self.target_probs],
            "pi_tilde": [float.hex(float(p)) for p in self.pi_tilde],
            "cuts": [
                {"dim": c.dim, "direction": c.direction, "threshold": float.hex(c.threshold)}
                for c in self.cuts
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "QuantTreePartition":
        doc = json.loads(text)
        if doc.get("format") != PARTITION_FORMAT:
            raise ValueError(f"not a partition file (format={doc.get('format')!r})")
        if doc.get("version") != PARTITION_VERSION:
            raise ValueError(f"unsupported partition version {doc.get('version')!r}")
        cuts = tuple(
            Cut(dim=c["dim"], direction=c["direction"], threshold=float.fromhex(c["threshold"]))
            for c in doc["cuts"]
        )
        return cls(
            cuts=cuts,
            bin_counts=tuple(doc["bin_counts"]),
            target_probs=np.array([float.fromhex(p) for p in doc["target_probs"]]),
            pi_tilde=np.array([float.fromhex(p) for p in doc["pi_tilde"]]),
            n_train=doc["n_train"],
            dim=doc["dim"],
            seed=doc["seed"],
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "QuantTreePartition":
        with open(path) as fh:
            return cls.from_json(fh.read())


def _check_simplex(target_probs: np.ndarray) -> np.ndarray:
    tp = np.asarray(target_probs, dtype=float)
    if tp.ndim != 1 or tp.size < 2:
        raise ValueError("target_probs must be a vector with at least 2 entries")
    if np.any(tp <= 0) or abs(tp.sum() - 1.0) > _SIMPLEX_TOL:
        raise ValueError("target_probs must be strictly positive and sum to 1")
    return tp


def allocate_bin_counts(target_probs, n_train: int) -> tuple[int, ...]:
    """Largest-remainder allocation of ``pi_j * N`` into integer counts.

    Remainder ties are broken toward higher bin indices, so when all
    remainders are equal the last bin absorbs the residue.
    """
    tp = _check_simplex(target_probs)
    ideal = tp * n_train
    base = np.floor(ideal).astype(int)
    deficit = n_train - int(base.sum())
    if deficit > 0:
        remainders = ideal - base
        # sort by remainder descending, ties to the highest index
        order = sorted(range(tp.size), key=lambda j: (-remainders[j], -j))
        for j in order[:deficit]:
            base[j] += 1
    return tuple(int(c) for c in base)


def compute_pi_tilde(target_probs, n_train: int) -> np.ndarray:
    """Dirichlet-mean bin probability estimates.

    pi_tilde_j = pi_j N / (N+1) for j < K; the last entry is defined as
    the complement so the vector sums to 1 exactly in floating point.
    """
    tp = _check_simplex(target_probs)
    pt = tp * n_train / (n_train + 1)
    pt[-1] = 1.0 - pt[:-1].sum()
    return pt


def dirichlet_parameters(target_probs, n_train: int) -> np.ndarray:
    """Parameters of the bin-probability law: (pi_1 N, ..., pi_K N + 1)."""
    tp = _check_simplex(target_probs)
    alpha = tp * n_train
    alpha[-1] += 1.0
    return alpha


def build_partition(
    train: np.ndarray,
    target_probs,
    rng_seed: SeedLike,
) -> QuantTreePartition:
    """Fit a QuantTree partition on a training matrix of shape (N, d).

    Cut j draws a uniformly random dimension and tail direction, then
    places the threshold on the order statistic that isolates exactly
    ``bin_counts[j]`` surviving points in that tail (the threshold point
    itself belongs to the tail bin: lower cuts keep <=, upper cuts keep
    >=). Tied coordinates at the cut boundary raise
    :class:`DegenerateCutError`; callers are expected to jitter data
    with repeated values beforehand (see :func:`qtstream.datagen.ingest_csv`).
    """
    train = np.asarray(train, dtype=float)
    if train.ndim != 2:
        raise InvalidTrainingError("training set must be a 2-D matrix (N, d)")
    n_train, dim = train.shape
    tp = _check_simplex(target_probs)
    k = tp.size
    if n_train < k:
        raise InvalidTrainingError(f"need at least K={k} training points, got N={n_train}")

    rng = as_generator(rng_seed)
    counts = allocate_bin_counts(tp, n_train)
    remaining = train
    cuts: list[Cut] = []
    for j in range(k - 1):
        cut_dim = int(rng.integers(dim))
        direction = "lower" if rng.random() < 0.5 else "upper"
        values = remaining[:, cut_dim]
        order = np.sort(values)
        n_here = order.size
        want = counts[j]
        if direction == "lower":
            threshold, outer = order[want - 1], order[want]
        else:
            threshold, outer = order[n_here - want], order[n_here - want - 1]
        if threshold == outer:
            raise DegenerateCutError(cut_dim)
        if direction == "lower":
            inside = values <= threshold
        else:
            inside = values >= threshold
        if int(inside.sum()) != want:
            # tied values elsewhere on the threshold coordinate
            raise DegenerateCutError(cut_dim)
        cuts.append(Cut(dim=cut_dim, direction=direction, threshold=threshold))
        remaining = remaining[~inside]

    assert remaining.shape[0] == counts[-1]
    seed = rng_seed if isinstance(rng_seed, int) else None
    return QuantTreePartition(
        cuts=tuple(cuts),
        bin_counts=counts,
        target_probs=tp,
        pi_tilde=compute_pi_tilde(tp, n_train),
        n_train=n_train,
        dim=dim,
        seed=seed,
    )


def lookup(partition: QuantTreePartition, x) -> int:
    """Map one d-vector to its bin index. One comparison per cut, O(K)."""
    if len(x) != partition.dim:
        raise DimensionMismatchError(f"expected dimension {partition.dim}, got {len(x)}")
    for j, cut in enumerate(partition.cuts):
        v = x[cut.dim]
        if cut.direction == "lower":
            if v <= cut.threshold:
                return j
        else:
            if v >= cut.threshold:
                return j
    return partition.n_bins - 1


def lookup_array(partition: QuantTreePartition, xs: np.ndarray) -> np.ndarray:
    """Vectorized lookup for a sample matrix of shape (n, d)."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2 or xs.shape[1] != partition.dim:
        raise DimensionMismatchError(f"expected shape (n, {partition.dim}), got {xs.shape}")
    bins = np.full(xs.shape[0], partition.n_bins - 1, dtype=np.int64)
    alive = np.ones(xs.shape[0], dtype=bool)
    for j, cut in enumerate(partition.cuts):
        v = xs[:, cut.dim]
        hit = v <= cut.threshold if cut.direction == "lower" else v >= cut.threshold
        hit &= alive
        bins[hit] = j
        alive &= ~hit
    return bins


def sample_bin_probabilities(
    k: int,
    target_probs,
    n_train: int,
    method: str = "dirichlet",
    rng_seed: SeedLike = 0,
    size: int | None = None,
) -> np.ndarray:
    """Draw bin-probability vectors from the law of a fitted partition.

    ``method="dirichlet"`` normalizes independent Gamma draws with shapes
    (pi_1 N, ..., pi_K N + 1). ``method="stick_breaking"`` composes Beta
    draws Beta(pi_j N, (1 - sum_{k<=j} pi_k) N + 1); the two are the same
    distribution.

    Returns a (K,) vector, or a (size, K) matrix when ``size`` is given.
    """
    tp = _check_simplex(target_probs)
    if tp.size != k:
        raise ValueError(f"target_probs has {tp.size} entries, expected K={k}")
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    rng = as_generator(rng_seed)
    n = 1 if size is None else size

    if method == "dirichlet":
        alpha = dirichlet_parameters(tp, n_train)
        gammas = rng.gamma(shape=alpha, size=(n, k))
        probs = gammas / gammas.sum(axis=1, keepdims=True)
    elif method == "stick_breaking":
        probs = np.empty((n, k))
        stick = np.ones(n)
        cum = np.cumsum(tp)
        for j in range(k - 1):
            a = tp[j] * n_train
            b = (1.0 - cum[j]) * n_train + 1.0
            frac = rng.beta(a, b, size=n)
            probs[:, j] = stick * frac
            stick = stick * (1.0 - frac)
        probs[:, k - 1] = 1.0 - probs[:, : k - 1].sum(axis=1)
        np.clip(probs, 0.0, None, out=probs)
        probs /= probs.sum(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown method {method!r}")

    return probs[0] if size is None else probs
