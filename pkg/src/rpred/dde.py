"""Fixed-step RK4 integration of coupled retarded systems (method of steps).

The closed loops built by the predictor/observer modules are collections of
blocks ``dot y_b = rhs_b(t, current values, histories)`` where every delayed
term is read from a `HistorySignal` and every coupling at the current time
instant is read from the stage state.  Delays are constant and the step is
required to divide them, so delayed reads never run ahead of recorded data:
with step ``h`` and every delay ``>= h``, a stage at time ``t_n + h`` reads
at or before ``t_n``.

Delayed arguments inside RK4 stages are evaluated at the true stage time
minus the delay through Hermite interpolation (overlapping-history method),
which preserves fourth-order behavior.  After each accepted step the
right-hand side is evaluated once more at the new point so the pushed
derivative is consistent Hermite data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .history import HistorySignal

__all__ = [
    "ConfigError",
    "DivergenceError",
    "IntegratorConfig",
    "Block",
    "AuxChannel",
    "CoupledSystem",
    "SimulationTrace",
    "integrate",
]

# Any state component beyond this magnitude aborts the run.
DIVERGENCE_LIMIT = 1e12

_DIV_REL_TOL = 1e-9  # step must divide each delay this tightly (relative)


class ConfigError(ValueError):
    """Invalid integrator configuration (step/delay incompatibility etc.)."""


class DivergenceError(RuntimeError):
    """State left the finite range during integration."""

    def __init__(self, time: float, block: str):
        super().__init__(f"state diverged (non-finite or > {DIVERGENCE_LIMIT:g}) in block {block!r} at t={time:g}")
        self.time = time
        self.block = block


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size, horizon, and trace recording stride."""

    step: float
    t_end: float
    record_stride: int = 1

    def __post_init__(self):
        if self.step <= 0:
            raise ConfigError("step must be positive")
        if self.t_end <= 0:
            raise ConfigError("t_end must be positive")
        if self.record_stride < 1 or int(self.record_stride) != self.record_stride:
            raise ConfigError("record_stride must be a positive integer")

    def validate_delays(self, delays: Sequence[float]) -> None:
        """Require the step to divide every delay and not exceed the smallest.

        Divisibility makes delayed reads land on or near sample times and
        keeps inner-stage history reads inside the recorded window.
        """
        positive = [d for d in delays if d > 0.0]
        for d in positive:
            k = round(d / self.step)
            if k == 0 or abs(d - k * self.step) > _DIV_REL_TOL * d:
                raise ConfigError(
                    f"step {self.step!r} does not divide delay {d!r} "
                    f"(nearest multiple {k * self.step!r})"
                )
        if positive and self.step > min(positive) * (1 + _DIV_REL_TOL):
            raise ConfigError(
                f"step {self.step!r} exceeds the smallest delay {min(positive)!r}"
            )

    @property
    def n_steps(self) -> int:
        n = round(self.t_end / self.step)
        if abs(self.t_end - n * self.step) > _DIV_REL_TOL * self.t_end:
            raise ConfigError(f"t_end {self.t_end!r} is not a multiple of step {self.step!r}")
        return n


RhsFunc = Callable[[float, Mapping[str, tuple], Mapping[str, HistorySignal]], Sequence[float]]


@dataclass(frozen=True)
class Block:
    """One differential block of a coupled retarded system.

    `rhs(t, current, histories)` returns the block derivative; `reads`
    names the blocks/channels whose current values or histories the rhs
    touches (used for dependency audits, not for execution).
    """

    name: str
    dim: int
    rhs: RhsFunc
    reads: frozenset = frozenset()


@dataclass(frozen=True)
class AuxChannel:
    """Algebraic channel evaluated at accepted points (e.g. the control).

    When `keep_history` is set the channel gets its own `HistorySignal`
    (pre-initial value `pre_initial`, zero by default) so blocks can read
    it at lags; `derivative` then supplies consistent Hermite slope data,
    receiving the accepted-point block derivatives as its third argument.
    """

    name: str
    dim: int
    compute: Callable[[float, Mapping[str, tuple], Mapping[str, HistorySignal]], Sequence[float]]
    keep_history: bool = False
    derivative: Callable | None = None
    pre_initial: tuple | None = None


@dataclass
class CoupledSystem:
    """Blocks plus auxiliary channels plus the exhaustive set of delays used."""

    blocks: list
    aux: list = field(default_factory=list)
    delay_set: list = field(default_factory=list)

    @property
    def lookback(self) -> float:
        return max([d for d in self.delay_set if d > 0.0], default=0.0)

    def block_names(self) -> list:
        return [b.name for b in self.blocks]


@dataclass
class SimulationTrace:
    """Dense sampled record of a run; all channels share the times grid."""

    times: np.ndarray
    columns: dict
    metadata: dict = field(default_factory=dict)

    @property
    def spacing(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def channel(self, name: str) -> np.ndarray:
        return self.columns[name]


def _check_finite(name: str, vals: tuple, t: float) -> None:
    for v in vals:
        if not math.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
            raise DivergenceError(t, name)


def _axpy_fn(dim: int):
    """Specialized y + a*k for the tiny block dimensions in the hot loop."""
    if dim == 1:
        return lambda y, a, k: (y[0] + a * k[0],)
    if dim == 2:
        return lambda y, a, k: (y[0] + a * k[0], y[1] + a * k[1])
    return lambda y, a, k: tuple(v + a * w for v, w in zip(y, k))


def _rk4_combine_fn(dim: int):
    if dim == 1:
        return lambda y, s, a, b, c, e: (y[0] + s * (a[0] + 2.0 * (b[0] + c[0]) + e[0]),)
    if dim == 2:
        return lambda y, s, a, b, c, e: (
            y[0] + s * (a[0] + 2.0 * (b[0] + c[0]) + e[0]),
            y[1] + s * (a[1] + 2.0 * (b[1] + c[1]) + e[1]),
        )
    return lambda y, s, a, b, c, e: tuple(
        y[j] + s * (a[j] + 2.0 * (b[j] + c[j]) + e[j]) for j in range(dim)
    )


def integrate(
    system: CoupledSystem,
    initial: Mapping[str, Sequence[float]],
    config: IntegratorConfig,
    metadata: dict | None = None,
) -> SimulationTrace:
    """Integrate a coupled retarded system with classic RK4.

    `initial` maps each block name to its constant initial function, which
    covers all look-back the delays require.  The trace records every
    `record_stride`-th step, starting at t=0.
    """
    config.validate_delays(system.delay_set)
    n_steps = config.n_steps
    h = config.step
    stride = config.record_stride

    blocks = system.blocks
    names = [b.name for b in blocks]
    missing = [n for n in names if n not in initial]
    if missing:
        raise ConfigError(f"missing initial values for blocks: {missing}")

    # Histories look back far enough for every delay plus one step of slack
    # (inner stages read at stage_time - delay, up to one step behind).
    horizon = system.lookback + 2 * h
    hists: dict[str, HistorySignal] = {}
    cur: dict[str, tuple] = {}
    for b in blocks:
        init = tuple(float(x) for x in initial[b.name])
        if len(init) != b.dim:
            raise ConfigError(f"initial value for block {b.name!r} has wrong length")
        hists[b.name] = HistorySignal(b.dim, horizon, initial=init)
        cur[b.name] = init
    for a in system.aux:
        if a.keep_history:
            hists[a.name] = HistorySignal(a.dim, horizon, initial=a.pre_initial)

    def sweep(t: float, state: Mapping[str, tuple]) -> dict:
        return {b.name: tuple(b.rhs(t, state, hists)) for b in blocks}

    def push_all(t: float, state: Mapping[str, tuple], derivs: Mapping[str, tuple]) -> None:
        for b in blocks:
            hists[b.name].push(t, state[b.name], derivs[b.name])
        for a in system.aux:
            if a.keep_history:
                val = tuple(a.compute(t, state, hists))
                dv = tuple(a.derivative(t, state, derivs, hists)) if a.derivative else (0.0,) * a.dim
                hists[a.name].push(t, val, dv)

    n_records = n_steps // stride + 1
    times = np.empty(n_records)
    cols = {b.name: np.empty((n_records, b.dim)) for b in blocks}
    for a in system.aux:
        cols[a.name] = np.empty((n_records, a.dim))

    def record(row: int, t: float, state: Mapping[str, tuple]) -> None:
        times[row] = t
        for b in blocks:
            cols[b.name][row] = state[b.name]
        for a in system.aux:
            cols[a.name][row] = tuple(a.compute(t, state, hists))

    d0 = sweep(0.0, cur)
    push_all(0.0, cur, d0)
    record(0, 0.0, cur)

    axpy = {b.name: _axpy_fn(b.dim) for b in blocks}
    combine = {b.name: _rk4_combine_fn(b.dim) for b in blocks}
    half_h = 0.5 * h
    sixth = h / 6.0

    row = 1
    for n in range(n_steps):
        t = n * h
        t_half = t + half_h
        t_next = (n + 1) * h

        k1 = sweep(t, cur)
        y1 = {m: axpy[m](cur[m], half_h, k1[m]) for m in names}
        k2 = sweep(t_half, y1)
        y2 = {m: axpy[m](cur[m], half_h, k2[m]) for m in names}
        k3 = sweep(t_half, y2)
        y3 = {m: axpy[m](cur[m], h, k3[m]) for m in names}
        k4 = sweep(t_next, y3)

        nxt = {}
        for m in names:
            nxt[m] = combine[m](cur[m], sixth, k1[m], k2[m], k3[m], k4[m])
            _check_finite(m, nxt[m], t_next)
        cur = nxt

        d_new = sweep(t_next, cur)
        push_all(t_next, cur, d_new)
        if (n + 1) % stride == 0:
            record(row, t_next, cur)
            row += 1

    meta = dict(metadata or {})
    meta.setdefault("config", {"step": h, "t_end": config.t_end, "record_stride": stride})
    return SimulationTrace(times=times, columns=cols, metadata=meta)
