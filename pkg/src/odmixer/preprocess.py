"""Estimation of unfinished flow and input normalization.

At observation time, trips that have not finished are known only by their
origin (the unfinished-flow vector).  Their destinations are estimated by
distributing each origin's unfinished mass over destinations according to
historical unfinished-flow distributions: the same interval yesterday
(short term) and the same interval a week ago (long term), averaged.
Adding the estimate to the incomplete matrix yields the estimated complete
matrix that feeds the current-day branch of the model.

Rows with no usable history fall back gracefully: if exactly one history
row is empty the other distribution is used alone; if both are empty the
mass is spread uniformly.  Every branch conserves mass: estimated row sums
equal the unfinished-flow entries.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, HistoryError, ShapeError
from .od_data import KIND_ESTIMATED, KIND_INCOMPLETE, KIND_UNFINISHED, ODMatrix, UnfVector

FLAG_NORMAL = "normal"
FLAG_SHORT_ONLY = "used_short_only"
FLAG_LONG_ONLY = "used_long_only"
FLAG_UNIFORM = "used_uniform"

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class UodEstimate:
    """Estimated unfinished matrix plus the fallback taken per origin row."""

    matrix: ODMatrix
    fallback_flags: tuple

    @property
    def values(self):
        return self.matrix.values


def _distributions(history, n):
    """Per-row destination distribution of a history matrix, with a mask of
    rows that actually carry mass."""
    sums = history.sum(axis=1)
    ok = sums > 0
    dist = np.zeros((n, n), dtype=np.float64)
    dist[ok] = history[ok] / sums[ok, None]
    return dist, ok


def estimate_uod(unf, uod_short, uod_long):
    """Distribute unfinished mass over destinations using history.

    ``uod_short`` is the unfinished matrix at the same interval of the
    previous day, ``uod_long`` the one a week before.  Either may be None
    when that much history does not exist; the other distribution (or a
    uniform one) takes its place.
    """
    if not isinstance(unf, UnfVector):
        unf = UnfVector(unf)
    n = unf.n

    def history_values(m, label):
        if m is None:
            return None
        if isinstance(m, ODMatrix):
            if m.kind != KIND_UNFINISHED:
                raise DomainError(f"{label} history must be an unfinished matrix, got {m.kind!r}")
            v = m.values
        else:
            v = np.asarray(m, dtype=np.float64)
            if np.any(v < 0):
                raise DomainError(f"{label} history has negative entries")
        if v.shape != (n, n):
            raise ShapeError(f"{label} history shape {v.shape} != ({n}, {n})")
        return v

    short = history_values(uod_short, "short-term")
    long_ = history_values(uod_long, "long-term")

    dist_s, ok_s = _distributions(short, n) if short is not None else (None, np.zeros(n, bool))
    dist_l, ok_l = _distributions(long_, n) if long_ is not None else (None, np.zeros(n, bool))

    est = np.zeros((n, n), dtype=np.float64)
    flags = []
    uniform = np.full(n, 1.0 / n)
    for j in range(n):
        if ok_s[j] and ok_l[j]:
            dist = 0.5 * (dist_s[j] + dist_l[j])
            flags.append(FLAG_NORMAL)
        elif ok_s[j]:
            dist = dist_s[j]
            flags.append(FLAG_SHORT_ONLY)
        elif ok_l[j]:
            dist = dist_l[j]
            flags.append(FLAG_LONG_ONLY)
        else:
            dist = uniform
            flags.append(FLAG_UNIFORM)
        est[j] = unf.values[j] * dist

    return UodEstimate(ODMatrix(est, KIND_ESTIMATED), tuple(flags))


def estimate_od(iod, est):
    """Estimated complete matrix: observed finished trips plus the estimate."""
    if isinstance(iod, ODMatrix):
        if iod.kind != KIND_INCOMPLETE:
            raise DomainError(f"expected an incomplete matrix, got {iod.kind!r}")
        iv = iod.values
    else:
        iv = np.asarray(iod, dtype=np.float64)
    ev = est.values if isinstance(est, UodEstimate) else np.asarray(est, dtype=np.float64)
    if iv.shape != ev.shape:
        raise ShapeError(f"shape mismatch {iv.shape} vs {ev.shape}")
    return ODMatrix(iv + ev, KIND_ESTIMATED)


def estimate_slot(view, d, t, strict=True):
    """Estimated complete matrix for one (day, interval) slot of a dataset
    (or a perturbed input view of one).

    Strict mode requires a full week of history (day >= 7).  Relaxed mode
    keeps early days usable: with day in [1, 7) the short-term distribution
    stands in for the missing long-term one, and with day 0 the mass is
    spread uniformly.
    """
    if d < 0 or d >= view.days:
        raise HistoryError(f"day {d} outside dataset with {view.days} days")
    if strict and d < 7:
        raise HistoryError(f"day {d}: need a week of history (day >= 7) in strict mode")
    short = view.uod[d - 1, t] if d >= 1 else None
    long_ = view.uod[d - 7, t] if d >= 7 else None
    est = estimate_uod(view.unf[d, t], short, long_)
    return estimate_od(view.iod[d, t], est)


def prepare_cur_window(view, d, t, horizon, strict=True):
    """Estimated complete matrices for the input intervals of one window."""
    if t - horizon + 1 < 0 or t + 1 >= view.intervals_per_day:
        raise DomainError(
            f"window (day {d}, interval {t}, length {horizon}) leaves the service day"
        )
    return [estimate_slot(view, d, s, strict=strict) for s in range(t - horizon + 1, t + 1)]


class CurInputCache:
    """Memoizes per-slot estimates so overlapping windows share work."""

    def __init__(self, view, strict=True):
        self.view = view
        self.strict = strict
        self._slots = {}

    def slot(self, d, t):
        key = (d, t)
        if key not in self._slots:
            self._slots[key] = estimate_slot(self.view, d, t, strict=self.strict).values
        return self._slots[key]

    def window(self, d, t, horizon):
        """(n, n, horizon) array of estimated inputs, oldest first."""
        slots = [self.slot(d, s) for s in range(t - horizon + 1, t + 1)]
        return np.stack(slots, axis=-1)


@dataclass(frozen=True)
class Normalizer:
    """Scalar z-score transform fitted on training-split complete matrices."""

    mean: float
    std: float

    @classmethod
    def fit(cls, values):
        values = np.asarray(values)
        if values.size == 0:
            raise DomainError("cannot fit a normalizer on an empty split")
        mean = float(values.mean(dtype=np.float64))
        std = float(values.std(dtype=np.float64))
        if std < STD_FLOOR:
            warnings.warn(f"normalizer std {std:.3e} floored at {STD_FLOOR}", stacklevel=2)
            std = STD_FLOOR
        return cls(mean=mean, std=std)

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, y):
        return y * self.std + self.mean


def clamp_nonneg(x):
    """Flows are counts; denormalized predictions are clamped at zero."""
    return np.maximum(x, 0)
