"""State-feedback sequential predictor chains.

A chain of m stages, each a copy of the plant dynamics driven by the
control at a staggered lag and pulled toward the previous stage by a
proportional correction:

    dot z_i(t) = f(z_i segment, u(t - d + i d/m))
                 - (L_f + eps) (z_i(t - d/m) - z_{i-1}(t)),      z_0 = x

so stage i estimates the state d*i/m seconds ahead and the last stage
approximates x(t + d) without integral terms.  Feeding u(t) = alpha(z_m(t))
compensates the input delay whenever the chain is long enough:
m > (L_f + eps)^2 d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dde import AuxChannel, Block, CoupledSystem, SimulationTrace
from .history import SegmentView
from .systems import (
    FeedbackLaw,
    RetardedPlant,
    TAG_GES_STABILIZABLE,
    TAG_ISS_STABILIZABLE,
)

__all__ = [
    "ChainLengthError",
    "GridAlignmentError",
    "StatePredictorChain",
    "min_chain_length",
    "build_state_chain",
    "assemble_closed_loop",
    "extract_stage_errors",
    "prediction_identity_residual",
    "shift_channel",
]


class ChainLengthError(ValueError):
    """Chain length m fails the contraction bound."""


class GridAlignmentError(ValueError):
    """A requested grid shift is not a multiple of the trace spacing."""


def min_chain_length(L: float, epsilon: float, total_delay: float) -> int:
    """Smallest integer strictly greater than (L + epsilon)^2 * total_delay.

    Returns at least 1 (the condition degenerates to m > 0 when the delay
    vanishes).  `epsilon` must lie in (0, 1].
    """
    if not 0.0 < epsilon <= 1.0:
        raise ChainLengthError(f"epsilon must be in (0, 1], got {epsilon!r}")
    if L < 0 or total_delay < 0:
        raise ChainLengthError("Lipschitz constant and delay must be nonnegative")
    bound = (L + epsilon) ** 2 * total_delay
    return max(math.floor(bound) + 1, 1)


@dataclass(frozen=True)
class StatePredictorChain:
    """m cascaded predictor stages with their gain and sub-delay."""

    plant: RetardedPlant
    feedback: FeedbackLaw
    m: int
    epsilon: float
    sub_delay: float      # d / m
    gain: float           # L_f + epsilon

    @property
    def stage_names(self) -> list:
        return [f"z{i}" for i in range(1, self.m + 1)]


def build_state_chain(plant: RetardedPlant, feedback: FeedbackLaw,
                      m: int, epsilon: float = 0.3) -> StatePredictorChain:
    """Validate the gate m > (L_f + eps)^2 d and build the chain."""
    if not (plant.tags & {TAG_GES_STABILIZABLE, TAG_ISS_STABILIZABLE}):
        raise ChainLengthError(
            f"plant {plant.name!r} is not tagged stabilizable "
            f"(needs {TAG_GES_STABILIZABLE!r} or {TAG_ISS_STABILIZABLE!r})"
        )
    d = plant.input_delay
    if d <= 0:
        raise ChainLengthError("plant has no input delay; a predictor chain is not needed")
    m_min = min_chain_length(plant.lipschitz_f, epsilon, d)
    if m < m_min:
        bound = (plant.lipschitz_f + epsilon) ** 2 * d
        raise ChainLengthError(
            f"m={m} violates the chain-length bound m > (L_f+eps)^2 d = {bound:g} "
            f"(minimum admissible m is {m_min})"
        )
    return StatePredictorChain(
        plant=plant, feedback=feedback, m=int(m), epsilon=float(epsilon),
        sub_delay=d / m, gain=plant.lipschitz_f + epsilon,
    )


def assemble_closed_loop(plant: RetardedPlant, chain: StatePredictorChain) -> CoupledSystem:
    """Couple plant and chain under u(t) = alpha(z_m(t)).

    Blocks are [x, z_1, ..., z_m].  All stages read the single shared
    control history at their staggered lags; the last stage's control
    argument is the current alpha(z_m(t)) itself.  The control history is
    zero before t = 0.
    """
    if chain.plant is not plant:
        raise ChainLengthError("chain was built for a different plant")
    m = chain.m
    d = plant.input_delay
    sub = chain.sub_delay
    gain = chain.gain
    n = plant.n
    alpha = chain.feedback.alpha
    dynamics = plant.dynamics
    last = f"z{m}"

    def plant_rhs(t, cur, hists):
        seg = SegmentView(hists["x"], t, cur["x"])
        return dynamics(seg, hists["u"].eval(t - d))

    blocks = [Block(name="x", dim=n, rhs=plant_rhs, reads=frozenset({"x", "u"}))]

    def make_stage(i: int):
        name = f"z{i}"
        prev = "x" if i == 1 else f"z{i - 1}"
        u_lag = d - i * sub

        def rhs(t, cur, hists):
            zi = cur[name]
            seg = SegmentView(hists[name], t, zi)
            u = alpha(cur[last]) if i == m else hists["u"].eval(t - u_lag)
            fv = dynamics(seg, u)
            zl = hists[name].eval(t - sub)
            pv = cur[prev]
            return tuple(fv[j] - gain * (zl[j] - pv[j]) for j in range(n))

        return Block(name=name, dim=n, rhs=rhs,
                     reads=frozenset({name, prev, "u" if i < m else last}))

    blocks.extend(make_stage(i) for i in range(1, m + 1))

    feedback = chain.feedback
    tau = plant.output_delay
    output = plant.output

    def u_compute(t, cur, hists):
        return alpha(cur[last])

    def u_derivative(t, cur, derivs, hists):
        return feedback.rate(cur[last], derivs[last])

    def y_compute(t, cur, hists):
        x_tau = cur["x"] if tau == 0.0 else hists["x"].eval(t - tau)
        return output(x_tau)

    aux = [
        AuxChannel(name="u", dim=plant.p, compute=u_compute,
                   keep_history=True, derivative=u_derivative),
        AuxChannel(name="y", dim=plant.q, compute=y_compute),
    ]

    delay_set = {d, sub}
    if plant.state_delay > 0:
        delay_set.add(plant.state_delay)
    if tau > 0:
        delay_set.add(tau)
    delay_set.update(d - i * sub for i in range(1, m))
    return CoupledSystem(blocks=blocks, aux=aux,
                         delay_set=sorted(v for v in delay_set if v > 1e-15))


def _grid_shift(spacing: float, delay: float) -> int:
    k = round(delay / spacing)
    if k <= 0 or abs(delay - k * spacing) > 1e-6 * max(delay, spacing):
        raise GridAlignmentError(
            f"shift {delay!r} is not a positive multiple of the trace spacing {spacing!r}"
        )
    return k


def shift_channel(values: np.ndarray, k: int) -> np.ndarray:
    """values(t + k*spacing) on the same grid; the undefined tail is NaN."""
    out = np.full_like(values, np.nan)
    if k < len(values):
        out[: len(values) - k] = values[k:]
    return out


def extract_stage_errors(trace: SimulationTrace, chain: StatePredictorChain) -> dict:
    """Per-stage errors e_i(t) = z_i(t) - z_{i-1}(t + d/m) and the total
    prediction error P(t) = z_m(t) - x(t + d).

    Shifts are exact index moves on the recorded grid (the sub-delay is
    required to be a grid multiple), so the channels carry no
    interpolation error; entries whose shifted time falls past the end of
    the run are NaN.
    """
    spacing = trace.spacing
    k = _grid_shift(spacing, chain.sub_delay)
    kd = _grid_shift(spacing, chain.plant.input_delay)
    cols = {}
    prev = trace.channel("x")
    for i in range(1, chain.m + 1):
        zi = trace.channel(f"z{i}")
        cols[f"e{i}"] = zi - shift_channel(prev, k)
        prev = zi
    cols["P"] = trace.channel(f"z{chain.m}") - shift_channel(trace.channel("x"), kd)
    return cols


def prediction_identity_residual(trace: SimulationTrace, chain: StatePredictorChain) -> float:
    """Max residual of the telescoping identity

        z_m(t) = x(t + d) + sum_j e_{m-j}(t + (j/m) d),   j = 0..m-1

    over every grid point where all terms are defined.  The identity is
    algebraic, so the residual is float roundoff on any trace.
    """
    errors = extract_stage_errors(trace, chain)
    spacing = trace.spacing
    k = _grid_shift(spacing, chain.sub_delay)
    kd = _grid_shift(spacing, chain.plant.input_delay)
    m = chain.m
    acc = shift_channel(trace.channel("x"), kd).copy()
    for j in range(m):
        acc += shift_channel(errors[f"e{m - j}"], j * k)
    resid = trace.channel(f"z{m}") - acc
    resid = resid[~np.isnan(resid).any(axis=1)]
    if len(resid) == 0:
        raise GridAlignmentError("trace is too short for the identity window")
    return float(np.abs(resid).max())
