"""Lyapunov-Halanay analysis utilities and empirical stability checks.

The differential inequality  dot w <= -a w + b sup of w over the last
delta seconds  with a > b >= 0 forces exponential decay at the rate
lambda > 0 solving  lambda + b e^(lambda delta) = a; `halanay_rate` solves
that equation and `check_halanay_envelope` tests a sampled trajectory
against the implied envelope.  `compose_kl` assembles the class-KL bound
for a cascade from the bounds of its parts.  `check_gas` and `check_iss`
are trajectory-level stand-ins for the closed-loop stability conclusions:
they certify observed decay and observed input-to-state boundedness on
concrete runs rather than proving theorems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dde import (
    AuxChannel,
    Block,
    CoupledSystem,
    DivergenceError,
    IntegratorConfig,
    SimulationTrace,
    integrate,
)
from .history import SegmentView
from .systems import FeedbackLaw, RetardedPlant

__all__ = [
    "HalanayParams",
    "DecayEnvelope",
    "EnvelopeReport",
    "halanay_rate",
    "check_halanay_envelope",
    "KLBound",
    "compose_kl",
    "kl_grid_ok",
    "GasReport",
    "check_gas",
    "IssReport",
    "check_iss",
    "assemble_direct_loop",
]

_ENVELOPE_SLACK = 1e-6


@dataclass(frozen=True)
class HalanayParams:
    """Coefficients of  dot w <= -a w + b max_{[-delta,0]} w(t + theta)."""

    a: float
    b: float
    delta: float

    def __post_init__(self):
        if not self.a > self.b >= 0:
            raise ValueError(f"Halanay hypothesis requires a > b >= 0, got a={self.a!r}, b={self.b!r}")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")


def halanay_rate(params: HalanayParams) -> float:
    """Unique positive root of  phi(lam) = lam + b e^(lam delta) - a.

    phi is strictly increasing with phi(0) = b - a < 0, so bisection on
    [0, a] converges unconditionally; with b = 0 the root is a exactly.
    """
    a, b, delta = params.a, params.b, params.delta
    if b == 0.0:
        return a

    def phi(lam: float) -> float:
        try:
            return lam + b * math.exp(lam * delta) - a
        except OverflowError:
            return math.inf

    lo, hi = 0.0, a
    for _ in range(200):
        if hi - lo <= 1e-15 * max(a, 1.0):
            break
        mid = 0.5 * (lo + hi)
        if phi(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class DecayEnvelope:
    """Exponential envelope  initial_sup * e^(-rate (t - t0))."""

    t0: float
    initial_sup: float
    rate: float

    def __call__(self, t: float) -> float:
        return self.initial_sup * math.exp(-self.rate * (t - self.t0))


@dataclass
class EnvelopeReport:
    holds: bool
    margin: float
    first_violation: float | None
    envelope: DecayEnvelope

    def as_dict(self) -> dict:
        return {
            "holds": self.holds,
            "margin": self.margin,
            "first_violation": self.first_violation,
            "rate": self.envelope.rate,
            "initial_sup": self.envelope.initial_sup,
            "t0": self.envelope.t0,
        }


def check_halanay_envelope(times: Sequence[float], values: Sequence[float],
                           params: HalanayParams, t0: float = 0.0,
                           rel_slack: float = _ENVELOPE_SLACK) -> EnvelopeReport:
    """Test a nonnegative scalar series against its Halanay decay envelope.

    The envelope starts from the max of the series over [t0 - delta, t0]
    (clamped to the available samples) and decays at `halanay_rate`.
    Every grid point at or after t0 is tested with relative slack
    `rel_slack` to absorb interpolation noise at grazing contact.
    """
    t = np.asarray(times, dtype=float)
    w = np.asarray(values, dtype=float)
    if t.ndim != 1 or t.shape != w.shape or len(t) == 0:
        raise ValueError("times and values must be equal-length 1-D series")
    if np.any(w < 0):
        raise ValueError("the series must be nonnegative")
    head = (t >= t0 - params.delta) & (t <= t0)
    if not head.any():
        raise ValueError(f"series has no samples in the initial window ending at t0={t0!r}")
    initial_sup = float(w[head].max())
    rate = halanay_rate(params)
    env = DecayEnvelope(t0=t0, initial_sup=initial_sup, rate=rate)

    tail = t >= t0
    env_vals = initial_sup * np.exp(-rate * (t[tail] - t0))
    gap = env_vals - w[tail]
    margin = float(gap.min()) if len(gap) else 0.0
    bad = w[tail] > env_vals * (1.0 + rel_slack)
    if bad.any():
        first = float(t[tail][np.argmax(bad)])
        return EnvelopeReport(holds=False, margin=margin, first_violation=first, envelope=env)
    return EnvelopeReport(holds=True, margin=margin, first_violation=None, envelope=env)


# ----------------------------------------------------------------------
# Class-KL bounds
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class KLBound:
    """Pointwise-evaluable class-KL bound beta(r, t)."""

    fn: Callable[[float, float], float]
    description: str = ""

    def __call__(self, r: float, t: float) -> float:
        return self.fn(r, t)

    @staticmethod
    def exponential(c: float, lam: float) -> "KLBound":
        """beta(r, t) = c r e^(-lam t)."""
        return KLBound(fn=lambda r, t: c * r * math.exp(-lam * t),
                       description=f"{c:g} r exp(-{lam:g} t)")


def compose_kl(beta1: KLBound, gamma1: Callable[[float], float], beta2: KLBound,
               beta1_bar: KLBound | None = None,
               gamma1_bar: Callable[[float], float] | None = None,
               beta2_bar: KLBound | None = None) -> KLBound:
    """Class-KL bound for a cascade (x, e) from the bounds of its parts.

    Given  ||x(t)|| <= beta1(r0, t) + gamma1(sup ||e||)  and a bound
    beta2 on e, the combined bound evaluated at r = ||(initial x, initial e)||
    is

        beta(r, t) = beta1_bar(beta1(r, t/2) + gamma1(beta2_bar(r, 0)), t/2)
                     + gamma1_bar(beta2_bar(r, t/2)) + beta2_bar(r, t)

    The barred variants bound the running sup of each signal rather than
    its pointwise value; they are caller-supplied and default to the
    unbarred inputs.
    """
    b1 = beta1_bar if beta1_bar is not None else beta1
    g1 = gamma1_bar if gamma1_bar is not None else gamma1
    b2 = beta2_bar if beta2_bar is not None else beta2

    def fn(r: float, t: float) -> float:
        half = 0.5 * t
        return (b1(beta1(r, half) + gamma1(b2(r, 0.0)), half)
                + g1(b2(r, half)) + b2(r, t))

    return KLBound(fn=fn, description="cascade composition")


def kl_grid_ok(bound: KLBound, r_grid: Sequence[float] | None = None,
               t_grid: Sequence[float] | None = None, tol: float = 1e-9) -> bool:
    """Sample-grid check of the class-KL properties.

    Nondecreasing in r for fixed t, nonincreasing in t for fixed r, and
    zero at r = 0.
    """
    rs = np.asarray(r_grid if r_grid is not None else np.linspace(0.0, 10.0, 20))
    ts = np.asarray(t_grid if t_grid is not None else np.linspace(0.0, 10.0, 20))
    vals = np.array([[bound(float(r), float(t)) for t in ts] for r in rs])
    if np.any(np.abs(vals[rs == 0.0]) > tol):
        return False
    if np.any(np.diff(vals, axis=0) < -tol):      # increasing in r
        return False
    if np.any(np.diff(vals, axis=1) > tol):       # decreasing in t
        return False
    return True


# ----------------------------------------------------------------------
# Trajectory checks
# ----------------------------------------------------------------------

@dataclass
class GasReport:
    """Observed asymptotic decay of one trace channel."""

    channel: str
    passed: bool
    initial_sup: float
    final_sup: float
    settle_fraction: float
    horizon_fraction: float
    sliding_sup_monotone: bool
    first_increase: float | None = None

    def as_dict(self) -> dict:
        return {
            "channel": self.channel, "passed": self.passed,
            "initial_sup": self.initial_sup, "final_sup": self.final_sup,
            "settle_fraction": self.settle_fraction,
            "horizon_fraction": self.horizon_fraction,
            "sliding_sup_monotone": self.sliding_sup_monotone,
            "first_increase": self.first_increase,
        }


def check_gas(trace: SimulationTrace, channel: str = "x",
              settle_fraction: float = 0.05,
              horizon_fraction: float = 1.0 / 6.0,
              slack: float = 1e-6) -> GasReport:
    """Pass iff the channel has settled and never regrows after its peak.

    (i) the sup of the channel norm over the final `horizon_fraction` of
    the run is below `settle_fraction` times the initial value, and
    (ii) the sup over a sliding window of that same length, once past its
    maximum, is nonincreasing within relative slack.  The initial
    transient may overshoot (the guaranteed decay bound only caps it),
    so growth while the windowed sup climbs to its peak is not a failure.
    """
    col = trace.channel(channel)
    norms = np.linalg.norm(col, axis=1)
    n = len(norms)
    if n < 2:
        raise ValueError("trace is too short for a decay check")
    window = max(int(math.ceil(horizon_fraction * n)), 1)
    initial_sup = float(norms[0])
    final_sup = float(norms[n - window:].max())
    settled = final_sup <= settle_fraction * initial_sup + 1e-300

    sliding = np.array([norms[j:j + window].max() for j in range(n - window + 1)])
    peak = int(np.argmax(sliding))
    tail = sliding[peak:]
    growth = tail[1:] > tail[:-1] * (1.0 + slack) + 1e-12
    monotone = not growth.any()
    first_inc = float(trace.times[peak + 1 + int(np.argmax(growth))]) if growth.any() else None

    return GasReport(
        channel=channel, passed=bool(settled and monotone),
        initial_sup=initial_sup, final_sup=final_sup,
        settle_fraction=settle_fraction, horizon_fraction=horizon_fraction,
        sliding_sup_monotone=monotone, first_increase=first_inc,
    )


def assemble_direct_loop(plant: RetardedPlant, feedback: FeedbackLaw,
                         disturbance: float = 0.0) -> CoupledSystem:
    """Closed loop under direct feedback u = alpha(x + mu), no predictor.

    `disturbance` is a constant additive perturbation of the feedback
    argument.  With a nonzero input delay the control still enters as
    u(t - d), read from the recorded control history.
    """
    d = plant.input_delay
    n = plant.n
    alpha = feedback.alpha
    dynamics = plant.dynamics
    mu = float(disturbance)

    def control_of(x: tuple) -> tuple:
        return alpha(x if mu == 0.0 else tuple(v + mu for v in x))

    def rhs(t, cur, hists):
        seg = SegmentView(hists["x"], t, cur["x"])
        u = control_of(cur["x"]) if d == 0.0 else hists["u"].eval(t - d)
        return dynamics(seg, u)

    def u_compute(t, cur, hists):
        return control_of(cur["x"])

    def u_derivative(t, cur, derivs, hists):
        return feedback.rate(tuple(v + mu for v in cur["x"]), derivs["x"])

    def y_compute(t, cur, hists):
        tau = plant.output_delay
        x_tau = cur["x"] if tau == 0.0 else hists["x"].eval(t - tau)
        return plant.output(x_tau)

    blocks = [Block(name="x", dim=n, rhs=rhs, reads=frozenset({"x", "u"}))]
    aux = [
        # The control history only matters when something reads u at a lag.
        AuxChannel(name="u", dim=plant.p, compute=u_compute,
                   keep_history=d > 0.0, derivative=u_derivative),
        AuxChannel(name="y", dim=plant.q, compute=y_compute),
    ]
    delays = sorted({v for v in (plant.state_delay, d, plant.output_delay) if v > 0})
    return CoupledSystem(blocks=blocks, aux=aux, delay_set=delays)


@dataclass
class IssReport:
    """Observed input-to-state boundedness of a feedback loop.

    A family of runs with constant disturbance amplitudes must stay
    bounded with ultimate bounds that do not decrease in the amplitude,
    and the zero-disturbance run must converge.
    """

    passed: bool
    zero_final: float
    zero_initial: float
    settle_threshold: float
    ultimate_bounds: dict = field(default_factory=dict)
    diverged_at: float | None = None

    @property
    def zero_ratio(self) -> float:
        return self.zero_final / self.zero_initial if self.zero_initial else 0.0

    def as_dict(self) -> dict:
        return {
            "passed": self.passed, "zero_final": self.zero_final,
            "zero_initial": self.zero_initial, "zero_ratio": self.zero_ratio,
            "settle_threshold": self.settle_threshold,
            "ultimate_bounds": dict(self.ultimate_bounds),
            "diverged_at": self.diverged_at,
        }


def _settle_delay_free(plant: RetardedPlant, feedback: FeedbackLaw,
                       x0: tuple, t_end: float) -> float:
    """||x(t_end)|| of the delay-free direct loop, integrated adaptively.

    Settling through a cubic feedback channel takes horizons on the order
    of 1/threshold^2 while the fixed step stays pinned by the initial
    stiffness, so the long zero-disturbance leg uses an adaptive solver.
    Only valid with no state or input delay (nothing reads a history).
    """
    from scipy.integrate import solve_ivp

    alpha = feedback.alpha
    dynamics = plant.dynamics

    def rhs(t, x):
        xt = tuple(x)
        return dynamics(SegmentView(None, t, xt), alpha(xt))

    sol = solve_ivp(rhs, (0.0, t_end), list(x0), method="LSODA",
                    rtol=1e-10, atol=1e-12, dense_output=False)
    if not sol.success:
        raise DivergenceError(float(sol.t[-1]), "x")
    return float(np.linalg.norm(sol.y[:, -1]))


def check_iss(plant: RetardedPlant, feedback: FeedbackLaw,
              initial: Sequence[float],
              amp_config: IntegratorConfig,
              amplitudes: Sequence[float] = (0.1, 0.5, 1.0),
              settle_threshold: float = 1e-3,
              zero_t_end: float | None = None,
              zero_trace: SimulationTrace | None = None,
              tail_fraction: float = 0.25) -> IssReport:
    """Run the disturbance family and grade the ISS behavior.

    The zero-disturbance leg must reach `settle_threshold` relative to the
    initial norm; pass a long-enough `zero_t_end` (defaults to the family
    horizon) or an already-computed `zero_trace`.  For delay-free loops
    the zero leg is integrated adaptively (see `_settle_delay_free`).
    """
    init = {"x": tuple(float(v) for v in initial)}
    zero_initial = math.hypot(*init["x"])
    horizon = zero_t_end if zero_t_end is not None else amp_config.t_end

    if zero_trace is not None:
        zero_final = float(np.linalg.norm(zero_trace.channel("x")[-1]))
    elif plant.state_delay == 0.0 and plant.input_delay == 0.0:
        zero_final = _settle_delay_free(plant, feedback, init["x"], horizon)
    else:
        zero_config = IntegratorConfig(step=amp_config.step, t_end=horizon,
                                       record_stride=amp_config.record_stride)
        tr = integrate(assemble_direct_loop(plant, feedback, 0.0), init, zero_config)
        zero_final = float(np.linalg.norm(tr.channel("x")[-1]))

    bounds: dict = {}
    diverged_at = None
    for amp in amplitudes:
        system = assemble_direct_loop(plant, feedback, amp)
        try:
            tr = integrate(system, init, amp_config)
        except DivergenceError:
            diverged_at = float(amp)
            break
        norms = np.linalg.norm(tr.channel("x"), axis=1)
        tail = max(int(len(norms) * (1.0 - tail_fraction)), 0)
        bounds[float(amp)] = float(norms[tail:].max())

    ordered = [bounds[a] for a in sorted(bounds)]
    nondecreasing = all(b2 >= b1 * (1.0 - 1e-9) for b1, b2 in zip(ordered, ordered[1:]))
    settled = zero_final <= settle_threshold * zero_initial
    passed = diverged_at is None and nondecreasing and settled and len(bounds) == len(amplitudes)
    return IssReport(
        passed=bool(passed), zero_final=zero_final, zero_initial=zero_initial,
        settle_threshold=settle_threshold, ultimate_bounds=bounds,
        diverged_at=diverged_at,
    )
