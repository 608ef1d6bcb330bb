"""Sampled signal histories with cubic Hermite point queries.

Every delayed term in a retarded simulation is a read of the form
``x(t - theta)`` or a supremum over a past segment.  `HistorySignal` stores
(time, value, derivative) samples over a bounded look-back horizon and
answers those queries by cubic Hermite interpolation, which keeps delayed
reads fourth-order accurate when the integrator supplies exact derivatives.

Values are stored and returned as plain tuples of floats: the block
dimensions in this package are tiny (1 or 2) and scalar arithmetic beats
numpy dispatch in the integrator's hot loop.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from typing import Sequence

__all__ = ["HistoryError", "HistorySignal", "SegmentView"]

# Queries this close to a stored node (absolute, in seconds) snap to it.
# Delayed reads are computed as `stage_time - delay`; with non-representable
# steps the result can land one ulp past a node or past the latest sample.
_SNAP = 1e-9

# Stale samples are trimmed in chunks to keep push() amortized O(1).
_EVICT_CHUNK = 64


class HistoryError(ValueError):
    """Invalid push or query on a HistorySignal."""


def _as_tuple(v: Sequence[float], dim: int, what: str) -> tuple:
    t = tuple(float(x) for x in v)
    if len(t) != dim:
        raise HistoryError(f"{what} has length {len(t)}, expected {dim}")
    return t


class HistorySignal:
    """Time-indexed record of a vector signal over a sliding window.

    Parameters
    ----------
    dim:
        Length of every stored value/derivative.
    horizon:
        Maximum look-back (seconds) that queries may reach behind the
        latest sample.  Must cover every delay that will be read.
    initial:
        Constant vector returned for times before the first sample
        (defaults to zero).  Only constant pre-initial data is supported.
    """

    __slots__ = ("dim", "horizon", "initial", "_times", "_values", "_derivs")

    def __init__(self, dim: int, horizon: float, initial: Sequence[float] | None = None):
        if dim < 1:
            raise HistoryError("dimension must be a positive integer")
        if horizon <= 0:
            raise HistoryError("horizon must be positive")
        self.dim = int(dim)
        self.horizon = float(horizon)
        self.initial = _as_tuple(initial, dim, "initial value") if initial is not None else (0.0,) * dim
        self._times: list[float] = []
        self._values: list[tuple] = []
        self._derivs: list[tuple] = []

    # ------------------------------------------------------------------

    @property
    def latest(self) -> float:
        if not self._times:
            raise HistoryError("history is empty")
        return self._times[-1]

    @property
    def n_samples(self) -> int:
        return len(self._times)

    def push(self, t: float, value: Sequence[float], derivative: Sequence[float]) -> None:
        """Append a sample; `t` must strictly increase."""
        t = float(t)
        if self._times and t <= self._times[-1]:
            raise HistoryError(
                f"non-monotone push: t={t!r} is not after latest sample t={self._times[-1]!r}"
            )
        dim = self.dim
        if type(value) is not tuple or len(value) != dim:
            value = _as_tuple(value, dim, "value")
        if type(derivative) is not tuple or len(derivative) != dim:
            derivative = _as_tuple(derivative, dim, "derivative")
        self._times.append(t)
        self._values.append(value)
        self._derivs.append(derivative)
        self._evict(t)

    def _evict(self, t_new: float) -> None:
        # Keep one sample older than (latest - horizon) so interpolation at
        # exactly the window edge still has a bracketing interval.
        cutoff = t_new - self.horizon
        times = self._times
        k = bisect_right(times, cutoff)  # samples [0, k) are <= cutoff
        stale = k - 1
        if stale >= _EVICT_CHUNK:
            del self._times[:stale]
            del self._values[:stale]
            del self._derivs[:stale]

    # ------------------------------------------------------------------

    def _window_start(self) -> float:
        return self._times[-1] - self.horizon

    def eval(self, t: float) -> tuple:
        """Value at time `t` within [latest - horizon, latest].

        Returns the stored tuple when `t` is a sample time; cubic Hermite
        interpolation otherwise; the constant pre-initial value for times
        before the first sample.  Future times are rejected.
        """
        if not self._times:
            # No samples yet: the whole axis is the pre-initial constant.
            return self.initial
        times = self._times
        latest = times[-1]
        if t > latest:
            if t - latest <= _SNAP:
                return self._values[-1]
            raise HistoryError(f"query at t={t!r} is in the future (latest sample t={latest!r})")
        if t < latest - self.horizon - _SNAP:
            raise HistoryError(
                f"query at t={t!r} is older than the horizon "
                f"(valid window starts at {latest - self.horizon!r})"
            )
        i = bisect_right(times, t)
        if i > 0:
            tl = times[i - 1]
            if t == tl or t - tl <= _SNAP:
                return self._values[i - 1]
        if i < len(times) and times[i] - t <= _SNAP:
            return self._values[i]
        if i == 0:
            return self.initial
        return self._hermite(i - 1, t)

    def _hermite(self, i: int, t: float) -> tuple:
        t0 = self._times[i]
        t1 = self._times[i + 1]
        h = t1 - t0
        s = (t - t0) / h
        s2 = s * s
        s3 = s2 * s
        h00 = 2.0 * s3 - 3.0 * s2 + 1.0
        h10 = s3 - 2.0 * s2 + s
        h01 = -2.0 * s3 + 3.0 * s2
        h11 = s3 - s2
        v0 = self._values[i]
        v1 = self._values[i + 1]
        d0 = self._derivs[i]
        d1 = self._derivs[i + 1]
        return tuple(
            h00 * v0[j] + h01 * v1[j] + h * (h10 * d0[j] + h11 * d1[j])
            for j in range(self.dim)
        )

    def sup_norm_segment(self, t0: float, t1: float) -> float:
        """Max Euclidean norm of the signal over [t0, t1].

        Evaluated on a dense grid: both endpoints, every interior sample
        time, and 8 subdivisions per resulting sub-interval.  Intended for
        envelope checks and diagnostics, not for use inside dynamics.
        """
        if t1 < t0:
            raise HistoryError(f"invalid segment [{t0!r}, {t1!r}]")
        if not self._times:
            return math.hypot(*self.initial)
        latest = self.latest
        if t1 > latest + _SNAP or t0 < latest - self.horizon - _SNAP:
            raise HistoryError(
                f"segment [{t0!r}, {t1!r}] is outside the valid window "
                f"[{latest - self.horizon!r}, {latest!r}]"
            )
        knots = [t0]
        lo = bisect_right(self._times, t0)
        hi = bisect_right(self._times, t1)
        for k in range(lo, hi):
            if t0 < self._times[k] < t1:
                knots.append(self._times[k])
        if t1 > t0:
            knots.append(t1)
        best = 0.0
        for a, b in zip(knots, knots[1:]):
            for j in range(8):
                v = self.eval(a + (b - a) * j / 8.0)
                best = max(best, math.hypot(*v))
        best = max(best, math.hypot(*self.eval(knots[-1])))
        return best


class SegmentView:
    """Read-only view of a signal's recent segment at one time instant.

    Presents the pair (stored history, current value at time `t`) as a
    single queryable segment: inside a Runge-Kutta stage the current value
    is a stage estimate that is not yet part of the history, while all
    strictly delayed reads fall on recorded data.

    A view with ``hist=None`` is a constant segment, used for equilibrium
    checks and Monte-Carlo Lipschitz sampling where the history is a
    constant function.
    """

    __slots__ = ("hist", "t", "now")

    def __init__(self, hist: HistorySignal | None, t: float, now: tuple):
        self.hist = hist
        self.t = t
        self.now = now

    @classmethod
    def constant(cls, value: Sequence[float]) -> "SegmentView":
        return cls(None, 0.0, tuple(float(x) for x in value))

    def value(self, lag: float = 0.0) -> tuple:
        """Signal value at time ``t - lag`` (``lag=0`` is the current value)."""
        if lag == 0.0 or self.hist is None:
            return self.now
        return self.hist.eval(self.t - lag)

    def sup(self, lag: float) -> float:
        """Max norm over the last `lag` seconds, including the current value."""
        best = math.hypot(*self.now)
        if self.hist is None or lag <= 0.0:
            return best
        if self.hist.n_samples == 0:
            return max(best, math.hypot(*self.hist.initial))
        latest = self.hist.latest
        a = self.t - lag
        if a < latest:
            best = max(best, self.hist.sup_norm_segment(a, latest))
        return best
