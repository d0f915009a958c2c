"""Domain model for origin-destination flow data.

An entry (i, j) of a flow matrix counts passengers who entered station i
and exited at station j, attributed to the interval in which they entered.
Trips completed inside that interval form the incomplete matrix; trips
exiting later (any later interval or day) form the unfinished matrix; their
sum is the complete matrix.  The unfinished-flow vector holds the row sums
of the unfinished matrix: passengers in the system whose destinations are
not yet observed.

A dataset stores the incomplete and unfinished matrices for every
(day, interval) slot; the complete matrix and the unfinished vector are
always derived from them, so the defining identities hold by construction.
"""

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DomainError, ShapeError

KIND_INCOMPLETE = "incomplete"
KIND_UNFINISHED = "unfinished"
KIND_COMPLETE = "complete"
KIND_ESTIMATED = "estimated"
_KINDS = (KIND_INCOMPLETE, KIND_UNFINISHED, KIND_COMPLETE, KIND_ESTIMATED)

_MAGIC = b"ODDS1"
_VERSION = 1


@dataclass(frozen=True)
class ODMatrix:
    """A square nonnegative flow matrix; rows are origins, columns destinations."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"OD matrix must be square, got shape {v.shape}")
        if v.shape[0] < 2:
            raise DomainError(f"OD matrix needs at least 2 stations, got {v.shape[0]}")
        if np.any(v < 0):
            raise DomainError("OD matrix entries must be nonnegative")
        if self.kind not in _KINDS:
            raise DomainError(f"unknown matrix kind {self.kind!r}")
        object.__setattr__(self, "values", v)

    @property
    def n(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class UnfVector:
    """Per-origin count of passengers still travelling."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ShapeError(f"unfinished-flow vector must be 1-D, got shape {v.shape}")
        if np.any(v < 0):
            raise DomainError("unfinished-flow entries must be nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def n(self):
        return self.values.shape[0]


def unf_from_uod(uod: ODMatrix) -> UnfVector:
    """Row sums of an unfinished matrix: passengers not yet exited per origin."""
    if uod.kind != KIND_UNFINISHED:
        raise DomainError(f"expected an unfinished matrix, got kind {uod.kind!r}")
    return UnfVector(uod.values.sum(axis=1))


def complete_from(iod: ODMatrix, uod: ODMatrix) -> ODMatrix:
    """Elementwise sum of the incomplete and unfinished matrices."""
    if iod.kind != KIND_INCOMPLETE or uod.kind != KIND_UNFINISHED:
        raise DomainError(f"expected kinds (incomplete, unfinished), got ({iod.kind!r}, {uod.kind!r})")
    if iod.n != uod.n:
        raise ShapeError(f"station counts differ: {iod.n} vs {uod.n}")
    return ODMatrix(iod.values + uod.values, KIND_COMPLETE)


class ODDataset:
    """Per-(day, interval) flow matrices for one metro system.

    Stores incomplete and unfinished matrices as float32 arrays of shape
    (days, intervals_per_day, n, n); complete matrices and unfinished
    vectors are derived.  Immutable after construction and safe for
    concurrent reads.
    """

    def __init__(self, iod, uod, interval_minutes=15):
        iod = np.ascontiguousarray(iod, dtype=np.float32)
        uod = np.ascontiguousarray(uod, dtype=np.float32)
        if iod.shape != uod.shape:
            raise ShapeError(f"incomplete/unfinished array shapes differ: {iod.shape} vs {uod.shape}")
        if iod.ndim != 4 or iod.shape[2] != iod.shape[3]:
            raise ShapeError(f"expected (days, intervals, n, n) arrays, got {iod.shape}")
        if iod.shape[2] < 2:
            raise DomainError(f"need at least 2 stations, got {iod.shape[2]}")
        if np.any(iod < 0) or np.any(uod < 0):
            raise DomainError("flow counts must be nonnegative")
        self._iod = iod
        self._uod = uod
        self._od = iod + uod
        self._unf = uod.sum(axis=3)
        self.interval_minutes = int(interval_minutes)
        for a in (self._iod, self._uod, self._od, self._unf):
            a.setflags(write=False)

    @property
    def n(self):
        return self._iod.shape[2]

    @property
    def days(self):
        return self._iod.shape[0]

    @property
    def intervals_per_day(self):
        return self._iod.shape[1]

    # bulk array views (read-only)
    @property
    def iod(self):
        return self._iod

    @property
    def uod(self):
        return self._uod

    @property
    def od(self):
        return self._od

    @property
    def unf(self):
        return self._unf

    @property
    def target_od(self):
        # targets and inputs coincide on an unperturbed dataset
        return self._od

    def iod_matrix(self, d, t):
        return ODMatrix(self._iod[d, t], KIND_INCOMPLETE)

    def uod_matrix(self, d, t):
        return ODMatrix(self._uod[d, t], KIND_UNFINISHED)

    def od_matrix(self, d, t):
        return ODMatrix(self._od[d, t], KIND_COMPLETE)

    def unf_vector(self, d, t):
        return UnfVector(self._unf[d, t])

    def check_identities(self, atol=1e-9):
        """Verify complete = incomplete + unfinished and the row-sum identity."""
        if not np.allclose(self._od, self._iod + self._uod, atol=atol, rtol=0):
            raise DataError("complete matrices do not equal incomplete + unfinished")
        if not np.allclose(self._unf, self._uod.sum(axis=3), atol=atol, rtol=0):
            raise DataError("unfinished vectors do not equal unfinished-matrix row sums")


@dataclass(frozen=True)
class SampleWindow:
    """Indices of one forecasting sample.

    Inputs cover intervals t-horizon+1 .. t of day d (current branch) and
    the same intervals of day d-1 (previous branch); targets are the
    complete matrices at interval t+1 of both days.
    """

    day: int
    interval: int
    horizon: int

    @property
    def input_intervals(self):
        return range(self.interval - self.horizon + 1, self.interval + 1)

    @property
    def target_interval(self):
        return self.interval + 1


def enumerate_windows(ds, horizon, require_week_history=False, days=None):
    """All valid sample windows in deterministic (day, interval) order.

    A window needs the previous day for its history branch, so day >= 1;
    with ``require_week_history`` (day-7 history for estimation) day >= 7.
    Windows never cross a service-day boundary.  ``days`` optionally
    restricts the sampled day index to a range.
    """
    if horizon < 1:
        raise DomainError(f"window length must be >= 1, got {horizon}")
    p = ds.intervals_per_day
    if horizon > p:
        warnings.warn(
            f"window length {horizon} exceeds {p} intervals per day; no windows",
            stacklevel=2,
        )
        return []
    d_min = 7 if require_week_history else 1
    out = []
    for d in range(d_min, ds.days):
        if days is not None and d not in days:
            continue
        for t in range(horizon - 1, p - 1):
            out.append(SampleWindow(day=d, interval=t, horizon=horizon))
    return out


# ---------------------------------------------------------------------------
# dataset file format
# ---------------------------------------------------------------------------
# header: magic "ODDS1", then version, n, days, intervals_per_day,
# interval_minutes as little-endian uint32; body: for each (day, interval)
# in lexicographic order the incomplete then the unfinished matrix, row-major
# little-endian float32.  Complete matrices and unfinished vectors are
# recomputed on load, which keeps the file non-redundant and the identities
# authoritative.


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<5I", _VERSION, ds.n, ds.days, ds.intervals_per_day, ds.interval_minutes
            )
        )
        per_slot = np.stack([ds.iod, ds.uod], axis=2)  # (D, P, 2, n, n)
        fh.write(np.ascontiguousarray(per_slot, dtype="<f4").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        header = fh.read(20)
        if len(header) != 20:
            raise DataError(f"{path}: truncated header")
        version, n, days, p, interval_minutes = struct.unpack("<5I", header)
        if version != _VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        want = days * p * 2 * n * n
        body = np.fromfile(fh, dtype="<f4", count=want)
        if body.size != want:
            raise DataError(f"{path}: truncated body ({body.size} of {want} floats)")
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after matrix data")
    per_slot = body.reshape(days, p, 2, n, n)
    ds = ODDataset(per_slot[:, :, 0], per_slot[:, :, 1], interval_minutes=interval_minutes)
    ds.check_identities()
    return ds
