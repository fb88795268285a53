"""Synthetic training sets and datastreams, plus CSV ingestion.

Laws are small descriptor objects (Gaussian, uniform box, CSV-backed).
A :class:`StreamSpec` combines a pre-change law, an optional change
point with a post-change law or transform, a length and a seed;
:func:`generate_stream` realizes it deterministically.

Controlled-magnitude Gaussian changes are mean shifts whose size is
chosen in closed form to hit an exact symmetric Kullback-Leibler
divergence: for equal-covariance Gaussians sKL = v' Sigma^-1 v, so the
shift v = c u with a random unit direction u and c^2 = target / u' Sigma^-1 u.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

import numpy as np

from .errors import CsvParseError, StreamExhaustedError, ZeroVarianceError
from .rng import SeedLike, as_generator, substream

DEFAULT_JITTER_SIGMA_FACTOR = 1e-6  # of the per-column standard deviation


# ---------------------------------------------------------------------------
# law descriptors


@dataclass(frozen=True)
class GaussianLaw:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=float)))

    @property
    def dim(self) -> int:
        return self.mean.size

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as e:
            raise ValueError("covariance must be symmetric positive definite") from e

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = self.cholesky()
        return self.mean + rng.standard_normal((n, self.dim)) @ chol.T

    def to_dict(self) -> dict:
        return {"type": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass(frozen=True)
class UniformLaw:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "low", np.atleast_1d(np.asarray(self.low, dtype=float)))
        object.__setattr__(self, "high", np.atleast_1d(np.asarray(self.high, dtype=float)))
        if np.any(self.high <= self.low):
            raise ValueError("uniform box must have high > low in every dimension")

    @property
    def dim(self) -> int:
        return self.low.size

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.low + (self.high - self.low) * rng.random((n, self.dim))

    def to_dict(self) -> dict:
        return {"type": "uniform", "low": self.low.tolist(), "high": self.high.tolist()}


@dataclass(frozen=True)
class CsvLaw:
    """Rows sampled without replacement from an ingested dataset."""

    data: np.ndarray
    sampling_seed: int
    path: Optional[str] = None
    _order: np.ndarray = field(init=False, repr=False)
    _cursor: list = field(init=False, repr=False)

    def __post_init__(self):
        rng = substream(self.sampling_seed, 0)
        object.__setattr__(self, "_order", rng.permutation(self.data.shape[0]))
        object.__setattr__(self, "_cursor", [0])

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def reset(self) -> None:
        """Rewind to the start of the (seed-fixed) row order."""
        self._cursor[0] = 0

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        start = self._cursor[0]
        if start + n > self._order.size:
            raise StreamExhaustedError(
                f"csv source exhausted: requested {n} more rows, "
                f"{self._order.size - start} remain of {self._order.size}"
            )
        self._cursor[0] = start + n
        return self.data[self._order[start : start + n]]

    def to_dict(self) -> dict:
        return {"type": "csv", "path": self.path, "sampling_seed": self.sampling_seed}


Law = Union[GaussianLaw, UniformLaw, CsvLaw]


# ---------------------------------------------------------------------------
# changes


@dataclass(frozen=True)
class MeanShift:
    """Random-direction mean shift achieving an exact sKL target."""

    skl_target: float

    def to_dict(self) -> dict:
        return {"type": "mean_shift", "skl_target": self.skl_target}


@dataclass(frozen=True)
class RandomShift:
    """Standard-Gaussian shift scaled by the dataset's total variance.

    ``scale`` multiplies the trace of the (estimated) covariance; the
    scaling convention is an explicit config because "total variance"
    is ambiguous between trace and per-column variance.
    """

    scale: float = 1.0

    def to_dict(self) -> dict:
        return {"type": "random_shift", "scale": self.scale}


@dataclass(frozen=True)
class ChangeSpec:
    tau: int
    phi1: Optional[Law] = None
    transform: Optional[Union[MeanShift, RandomShift]] = None

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("change point tau must be >= 1")
        if (self.phi1 is None) == (self.transform is None):
            raise ValueError("give exactly one of phi1 or transform")

    def to_dict(self) -> dict:
        doc = {"tau": self.tau}
        if self.phi1 is not None:
            doc["phi1"] = self.phi1.to_dict()
        if self.transform is not None:
            doc["transform"] = self.transform.to_dict()
        return doc


@dataclass(frozen=True)
class StreamSpec:
    """Description of one datastream source."""

    d: int
    phi0: Law
    length: int
    seed: int
    change: Optional[ChangeSpec] = None

    def __post_init__(self):
        if self.phi0.dim != self.d:
            raise ValueError(f"phi0 has dimension {self.phi0.dim}, spec says {self.d}")
        if self.change is not None and self.change.tau >= self.length:
            raise ValueError("tau must be smaller than the stream length")

    def to_dict(self) -> dict:
        doc = {
            "d": self.d,
            "phi0": self.phi0.to_dict(),
            "length": self.length,
            "seed": self.seed,
        }
        if self.change is not None:
            doc["change"] = self.change.to_dict()
        return doc


def gaussian_change_mean_shift(
    mean: np.ndarray,
    cov: np.ndarray,
    skl_target: float,
    rng_seed: SeedLike,
) -> np.ndarray:
    """Shifted mean vector with exactly the requested symmetric KL.

    Draws a random unit direction u and returns mean + c u where
    c = sqrt(skl_target / (u' Sigma^-1 u)).
    """
    if skl_target <= 0:
        raise ValueError("skl_target must be > 0")
    law = GaussianLaw(mean, cov)  # validates shapes
    chol = law.cholesky()
    rng = as_generator(rng_seed)
    u = rng.standard_normal(law.dim)
    u /= np.linalg.norm(u)
    # u' Sigma^-1 u via two triangular solves
    y = np.linalg.solve(chol, u)
    quad = float(y @ y)
    c = np.sqrt(skl_target / quad)
    return law.mean + c * u


def _post_change_law(phi0: Law, change: ChangeSpec, rng: np.random.Generator) -> Law:
    if change.phi1 is not None:
        return change.phi1
    tr = change.transform
    if isinstance(tr, MeanShift):
        if not isinstance(phi0, GaussianLaw):
            raise ValueError("mean_shift transform requires a Gaussian phi0")
        shifted = gaussian_change_mean_shift(phi0.mean, phi0.cov, tr.skl_target, rng)
        return GaussianLaw(shifted, phi0.cov)
    if isinstance(tr, RandomShift):
        if isinstance(phi0, GaussianLaw):
            total_var = float(np.trace(phi0.cov))
            base = phi0
        elif isinstance(phi0, CsvLaw):
            total_var = float(np.trace(np.cov(phi0.data, rowvar=False)))
            base = phi0
        else:
            raise ValueError("random_shift transform requires a Gaussian or CSV phi0")
        shift = rng.standard_normal(base.dim) * tr.scale * total_var
        return _ShiftedLaw(base, shift)
    raise ValueError(f"unknown transform {tr!r}")


@dataclass(frozen=True)
class _ShiftedLaw:
    base: Law
    shift: np.ndarray

    @property
    def dim(self) -> int:
        return self.base.dim

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.base.sample(n, rng) + self.shift

    def to_dict(self) -> dict:
        return {"type": "shifted", "base": self.base.to_dict(), "shift": self.shift.tolist()}


def generate_array(spec: StreamSpec) -> np.ndarray:
    """Realize the full stream as an (L, d) array. Deterministic in seed."""
    rng = substream(spec.seed, 1)
    if isinstance(spec.phi0, CsvLaw):
        spec.phi0.reset()
    if spec.change is None:
        return spec.phi0.sample(spec.length, rng)
    tau = spec.change.tau
    phi1 = _post_change_law(spec.phi0, spec.change, substream(spec.seed, 2))
    pre = spec.phi0.sample(tau - 1, rng) if tau > 1 else np.empty((0, spec.d))
    post = phi1.sample(spec.length - tau + 1, rng)
    return np.concatenate([pre, post], axis=0)


def generate_stream(spec: StreamSpec) -> Iterator[np.ndarray]:
    """Iterator form of :func:`generate_array` (one d-vector per step)."""
    yield from generate_array(spec)


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class IngestedDataset:
    """Standardized, jittered dataset with disjoint train/test sampling."""

    data: np.ndarray
    path: Optional[str]

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def split(self, n_train: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Disjoint (train_idx, test_idx) covering all rows."""
        if n_train >= self.n_rows:
            raise ValueError(f"cannot hold out {n_train} of {self.n_rows} rows")
        order = substream(seed, 0).permutation(self.n_rows)
        return order[:n_train], order[n_train:]

    def train_and_stream(
        self, n_train: int, seed: int
    ) -> tuple[np.ndarray, "CsvLaw"]:
        """Training matrix plus a CSV law over the held-out rows."""
        tr_idx, te_idx = self.split(n_train, seed)
        law = CsvLaw(data=self.data[te_idx], sampling_seed=seed + 1, path=self.path)
        return self.data[tr_idx], law


def _parse_csv(path) -> np.ndarray:
    rows: list[list[float]] = []
    with open(path) as fh:
        lines = [ln for ln in (l.strip() for l in fh) if ln]
    if not lines:
        raise CsvParseError(0, 0, "empty CSV file")
    start = 0
    first = lines[0].split(",")
    try:
        [float(c) for c in first]
    except ValueError:
        start = 1  # header row
    width = None
    for r, line in enumerate(lines[start:], start=start):
        cells = line.split(",")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise CsvParseError(r, len(cells), f"ragged row {r}: {len(cells)} cells, expected {width}")
        parsed = []
        for c, cell in enumerate(cells):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise CsvParseError(r, c) from None
        rows.append(parsed)
    return np.asarray(rows)


def ingest_csv(
    path,
    standardize: bool = True,
    jitter_sigma: Optional[float] = None,
    seed: int = 0,
) -> IngestedDataset:
    """Load a rectangular numeric CSV (optional header auto-detected).

    Columns are standardized to zero mean / unit variance when requested,
    then i.i.d. Gaussian jitter is added. ``jitter_sigma`` defaults to
    1e-6 of each column's standard deviation (set 0 to disable; data
    with repeated values will then fail partition construction).
    """
    data = _parse_csv(path)
    col_std = data.std(axis=0, ddof=0)
    if standardize:
        if np.any(col_std == 0):
            bad = int(np.argmax(col_std == 0))
            raise ZeroVarianceError(f"column {bad} is constant; cannot standardize")
        data = (data - data.mean(axis=0)) / col_std
        col_std = np.ones(data.shape[1])
    rng = substream(seed, 7)
    if jitter_sigma is None:
        sigma = DEFAULT_JITTER_SIGMA_FACTOR * col_std
    else:
        sigma = np.full(data.shape[1], float(jitter_sigma))
    if np.any(sigma > 0):
        data = data + rng.standard_normal(data.shape) * sigma
    return IngestedDataset(data=data, path=str(path))


# ---------------------------------------------------------------------------
# spec (de)serialization for the CLI


def law_from_dict(doc: dict) -> Law:
    kind = doc.get("type")
    if kind == "gaussian":
        return GaussianLaw(np.asarray(doc["mean"]), np.asarray(doc["cov"]))
    if kind == "uniform":
        return UniformLaw(np.asarray(doc["low"]), np.asarray(doc["high"]))
    if kind == "csv":
        dataset = ingest_csv(doc["path"], standardize=doc.get("standardize", True))
        return CsvLaw(data=dataset.data, sampling_seed=doc["sampling_seed"], path=doc["path"])
    raise ValueError(f"unknown law type {kind!r}")


def change_from_dict(cdoc: dict) -> ChangeSpec:
    phi1 = law_from_dict(cdoc["phi1"]) if "phi1" in cdoc else None
    transform = None
    if "transform" in cdoc:
        tdoc = cdoc["transform"]
        if tdoc["type"] == "mean_shift":
            transform = MeanShift(skl_target=tdoc["skl_target"])
        elif tdoc["type"] == "random_shift":
            transform = RandomShift(scale=tdoc.get("scale", 1.0))
        else:
            raise ValueError(f"unknown transform type {tdoc['type']!r}")
    return ChangeSpec(tau=cdoc["tau"], phi1=phi1, transform=transform)


def spec_from_dict(doc: dict) -> StreamSpec:
    phi0 = law_from_dict(doc["phi0"])
    change = None
    if "change" in doc and doc["change"] is not None:
        change = change_from_dict(doc["change"])
    return StreamSpec(
        d=doc["d"],
        phi0=phi0,
        length=doc["length"],
        seed=doc["seed"],
        change=change,
    )


def load_spec(path) -> StreamSpec:
    with open(path) as fh:
        return spec_from_dict(json.load(fh))
