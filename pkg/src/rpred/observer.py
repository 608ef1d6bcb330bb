"""Output-feedback sequential predictor chains.

When only the delayed output y(t) = h(x(t - tau)) is measurable, stage 0
runs the plant's exponential observer on the measured output and
reconstructs x(t - tau); stages 1..m then run the same observer functional
self-driven through their own outputs h(zhat_i(t)), each pulled toward the
previous stage:

    dot zhat_0(t) = F(zhat_0 segment, u(t - d - tau), y(t))
    dot zhat_i(t) = F(zhat_i segment, u(t - d - tau + i (d+tau)/m), h(zhat_i(t)))
                    - (L_F + L_F L_h + eps) (zhat_i(t - (d+tau)/m) - zhat_{i-1}(t))

with u(t) = alpha(zhat_m(t)) and the gate m > (L_F + L_F L_h + eps)^2 (d+tau).

The observer innovation convention here is +L(y - yhat): the correction
pushes the estimate toward the measurement, giving estimation-error
dynamics governed by (A - LC) for the linear part.  Positive injection
gains such as the pendulum's L = (1, 1.5) are stabilizing under this
convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dde import AuxChannel, Block, CoupledSystem, SimulationTrace
from .history import SegmentView
from .predictor import (
    ChainLengthError,
    GridAlignmentError,
    _grid_shift,
    min_chain_length,
    shift_channel,
)
from .systems import (
    FeedbackLaw,
    PlantDefinitionError,
    RetardedPlant,
    TAG_ASYMPTOTIC_OBSERVER,
    TAG_EXP_OBSERVER,
)

__all__ = [
    "ObserverFunctional",
    "OutputPredictorChain",
    "make_pendulum_observer",
    "build_output_chain",
    "assemble_output_closed_loop",
    "extract_output_stage_errors",
    "output_identity_residual",
]

_EQ_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ObserverFunctional:
    """State estimator functional F(xhat segment, u, y) with F(0,0,0) = 0."""

    func: Callable[[SegmentView, tuple, tuple], tuple]
    state_dim: int
    lipschitz_F: float
    input_dim: int = 1
    output_dim: int = 1
    description: str = ""

    def __post_init__(self):
        if self.lipschitz_F <= 0 or not math.isfinite(self.lipschitz_F):
            raise PlantDefinitionError("observer Lipschitz constant must be positive and finite")
        z = SegmentView.constant((0.0,) * self.state_dim)
        out = self.func(z, (0.0,) * self.input_dim, (0.0,) * self.output_dim)
        if math.hypot(*out) >= _EQ_TOL:
            raise PlantDefinitionError("observer functional must vanish at the origin")

    def __call__(self, seg: SegmentView, u: tuple, y: tuple) -> tuple:
        return self.func(seg, u, y)


@dataclass(frozen=True)
class OutputPredictorChain:
    """Observer stage plus m predictor stages (m+1 blocks of plant dimension)."""

    plant: RetardedPlant
    observer: ObserverFunctional
    feedback: FeedbackLaw
    m: int
    epsilon: float
    sub_delay: float      # (d + tau) / m
    gain: float           # L_F + L_F L_h + epsilon

    @property
    def stage_names(self) -> list:
        return [f"zh{i}" for i in range(self.m + 1)]


def make_pendulum_observer(plant: RetardedPlant, L=(1.0, 1.5)) -> ObserverFunctional:
    """Observer for the pendulum factory output with injection gains L.

    Copies the pendulum dynamics (linear double-integrator part plus the
    delayed-damping/gravity nonlinearity read from the estimate's own
    history) and corrects with +L (y - xhat_1).  The recorded Lipschitz
    constant is 1.5.
    """
    if plant.meta.get("kind") != "pendulum":
        raise PlantDefinitionError("make_pendulum_observer requires a pendulum plant")
    a = plant.meta["gravity_coeff"]
    b = plant.meta["damping_coeff"]
    c = plant.meta["input_coeff"]
    delta = plant.state_delay
    l1, l2 = (float(v) for v in L)

    def func(seg: SegmentView, u: tuple, y: tuple) -> tuple:
        xh = seg.value()
        xhd = seg.value(delta)
        inn = y[0] - xh[0]
        return (xh[1] + l1 * inn,
                c * u[0] - b * xhd[1] + a * math.sin(xh[0]) + l2 * inn)

    return ObserverFunctional(
        func=func, state_dim=2, lipschitz_F=1.5,
        description=f"pendulum observer, L=({l1}, {l2})",
    )


def build_output_chain(plant: RetardedPlant, observer: ObserverFunctional,
                       feedback: FeedbackLaw, m: int,
                       epsilon: float = 0.1) -> OutputPredictorChain:
    """Validate the gate m > (L_F + L_F L_h + eps)^2 (d + tau) and build."""
    if not (plant.tags & {TAG_EXP_OBSERVER, TAG_ASYMPTOTIC_OBSERVER}):
        raise ChainLengthError(
            f"plant {plant.name!r} is not tagged as admitting an observer "
            f"(needs {TAG_EXP_OBSERVER!r} or {TAG_ASYMPTOTIC_OBSERVER!r})"
        )
    if observer.state_dim != plant.n:
        raise ChainLengthError("observer state dimension does not match the plant")
    total = plant.input_delay + plant.output_delay
    if total <= 0:
        raise ChainLengthError("plant has no input or output delay; no chain is needed")
    L_eff = observer.lipschitz_F * (1.0 + plant.lipschitz_h)
    m_min = min_chain_length(L_eff, epsilon, total)
    if m < m_min:
        bound = (L_eff + epsilon) ** 2 * total
        raise ChainLengthError(
            f"m={m} violates the chain-length bound "
            f"m > (L_F + L_F L_h + eps)^2 (d + tau) = {bound:g} "
            f"(minimum admissible m is {m_min})"
        )
    return OutputPredictorChain(
        plant=plant, observer=observer, feedback=feedback,
        m=int(m), epsilon=float(epsilon),
        sub_delay=total / m, gain=L_eff + epsilon,
    )


def assemble_output_closed_loop(plant: RetardedPlant,
                                chain: OutputPredictorChain) -> CoupledSystem:
    """Couple plant, observer stage, and predictor stages under u = alpha(zhat_m).

    Stage 0 is the only block reading the plant's measured output; stages
    1..m are self-driven through their own outputs and never touch x.
    """
    if chain.plant is not plant:
        raise ChainLengthError("chain was built for a different plant")
    m = chain.m
    d = plant.input_delay
    tau = plant.output_delay
    total = d + tau
    sub = chain.sub_delay
    gain = chain.gain
    n = plant.n
    F = chain.observer.func
    alpha = chain.feedback.alpha
    output = plant.output
    dynamics = plant.dynamics
    last = f"zh{m}"

    def plant_rhs(t, cur, hists):
        seg = SegmentView(hists["x"], t, cur["x"])
        return dynamics(seg, hists["u"].eval(t - d))

    def measured_y(t, cur, hists):
        x_tau = cur["x"] if tau == 0.0 else hists["x"].eval(t - tau)
        return output(x_tau)

    def stage0_rhs(t, cur, hists):
        seg = SegmentView(hists["zh0"], t, cur["zh0"])
        return F(seg, hists["u"].eval(t - total), measured_y(t, cur, hists))

    blocks = [
        Block(name="x", dim=n, rhs=plant_rhs, reads=frozenset({"x", "u"})),
        Block(name="zh0", dim=n, rhs=stage0_rhs, reads=frozenset({"zh0", "x", "u"})),
    ]

    def make_stage(i: int):
        name = f"zh{i}"
        prev = f"zh{i - 1}"
        u_lag = total - i * sub

        def rhs(t, cur, hists):
            zi = cur[name]
            seg = SegmentView(hists[name], t, zi)
            u = alpha(cur[last]) if i == m else hists["u"].eval(t - u_lag)
            fv = F(seg, u, output(zi))
            zl = hists[name].eval(t - sub)
            pv = cur[prev]
            return tuple(fv[j] - gain * (zl[j] - pv[j]) for j in range(n))

        return Block(name=name, dim=n, rhs=rhs,
                     reads=frozenset({name, prev, "u" if i < m else last}))

    blocks.extend(make_stage(i) for i in range(1, m + 1))

    feedback = chain.feedback

    def u_compute(t, cur, hists):
        return alpha(cur[last])

    def u_derivative(t, cur, derivs, hists):
        return feedback.rate(cur[last], derivs[last])

    aux = [
        AuxChannel(name="u", dim=plant.p, compute=u_compute,
                   keep_history=True, derivative=u_derivative),
        AuxChannel(name="y", dim=plant.q, compute=measured_y),
    ]

    delay_set = {total, sub}
    if plant.state_delay > 0:
        delay_set.add(plant.state_delay)
    if tau > 0:
        delay_set.add(tau)
    if d > 0:
        delay_set.add(d)
    delay_set.update(total - i * sub for i in range(1, m))
    return CoupledSystem(blocks=blocks, aux=aux,
                         delay_set=sorted(v for v in delay_set if v > 1e-15))


def extract_output_stage_errors(trace: SimulationTrace,
                                chain: OutputPredictorChain) -> dict:
    """Stage errors for the output chain.

    eh0(t) = zhat_0(t) - x(t - tau) (NaN before t = tau when tau > 0),
    eh_i(t) = zhat_i(t) - zhat_{i-1}(t + (d+tau)/m), and the total
    prediction error Ph(t) = zhat_m(t) - x(t + d).
    """
    spacing = trace.spacing
    k = _grid_shift(spacing, chain.sub_delay)
    tau = chain.plant.output_delay
    x = trace.channel("x")
    cols = {}
    if tau > 0:
        kt = _grid_shift(spacing, tau)
        lagged = np.full_like(x, np.nan)
        lagged[kt:] = x[:-kt]
    else:
        lagged = x
    cols["eh0"] = trace.channel("zh0") - lagged
    for i in range(1, chain.m + 1):
        cols[f"eh{i}"] = trace.channel(f"zh{i}") - shift_channel(trace.channel(f"zh{i - 1}"), k)
    kd = _grid_shift(spacing, chain.plant.input_delay) if chain.plant.input_delay > 0 else 0
    cols["Ph"] = trace.channel(f"zh{chain.m}") - shift_channel(x, kd)
    return cols


def output_identity_residual(trace: SimulationTrace, chain: OutputPredictorChain) -> float:
    """Max residual of the output-chain telescoping identity

        zhat_m(t) = x(t + d) + sum_j eh_{m-j}(t + (j/m)(d + tau)),  j = 0..m

    over grid points where every term is defined."""
    errors = extract_output_stage_errors(trace, chain)
    spacing = trace.spacing
    k = _grid_shift(spacing, chain.sub_delay)
    m = chain.m
    kd = _grid_shift(spacing, chain.plant.input_delay) if chain.plant.input_delay > 0 else 0
    acc = shift_channel(trace.channel("x"), kd).copy()
    for j in range(m + 1):
        acc += shift_channel(errors[f"eh{m - j}"], j * k)
    resid = trace.channel(f"zh{m}") - acc
    resid = resid[~np.isnan(resid).any(axis=1)]
    if len(resid) == 0:
        raise GridAlignmentError("trace is too short for the identity window")
    return float(np.abs(resid).max())
