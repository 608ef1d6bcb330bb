import math

import numpy as np
import pytest

from rpred.dde import IntegratorConfig, SimulationTrace, integrate
from rpred.predictor import (
    ChainLengthError,
    GridAlignmentError,
    assemble_closed_loop,
    build_state_chain,
    extract_stage_errors,
    min_chain_length,
    prediction_identity_residual,
)
from rpred.systems import (
    RetardedPlant,
    TAG_GES_STABILIZABLE,
    TAG_GLC,
    linear_feedback,
    make_pendulum,
)

from oracles import make_scaled_delayed_decay


def linear_scalar_plant(delta: float, d: float) -> RetardedPlant:
    """dot x = -x(t - delta) + u(t - d); open-loop GES test plant."""
    return RetardedPlant(
        name="linear-test", n=1, p=1, q=1,
        dynamics=lambda seg, u: (-seg.value(delta)[0] + u[0],),
        output=lambda x: (x[0],),
        lipschitz_f=1.0, lipschitz_h=1.0,
        state_delay=delta, input_delay=d, output_delay=0.0,
        tags=frozenset({TAG_GLC, TAG_GES_STABILIZABLE}),
    )


class TestMinChainLength:
    def test_benchmark_state_feedback_value(self):
        assert min_chain_length(1.0, 0.3, 2.0) == 4

    def test_benchmark_output_feedback_value(self):
        assert min_chain_length(3.0, 0.1, 2.0) == 20

    def test_zero_delay_gives_one(self):
        assert min_chain_length(123.0, 1.0, 0.0) == 1

    def test_epsilon_range_enforced(self):
        for eps in (0.0, -0.1, 1.5):
            with pytest.raises(ChainLengthError):
                min_chain_length(1.0, eps, 1.0)

    def test_strictly_greater_when_bound_is_integer(self):
        # (1 + 1)^2 * 1 = 4 exactly: the smallest integer strictly above is 5
        assert min_chain_length(1.0, 1.0, 1.0) == 5


class TestBuildStateChain:
    def test_benchmark_chain_geometry(self):
        plant = make_pendulum(M=0.1, l=10.0, delta=1.0, d=2.0)
        chain = build_state_chain(plant, linear_feedback([[-25.0, -25.0]]), m=4, epsilon=0.3)
        assert chain.m == 4
        assert chain.sub_delay == pytest.approx(0.5)
        assert chain.gain == pytest.approx(1.3)

    def test_large_delay_chain_geometry(self):
        plant = make_pendulum(M=0.1, l=10.0, delta=2.0, d=4.0)
        chain = build_state_chain(plant, linear_feedback([[-25.0, -25.0]]), m=8, epsilon=0.3)
        assert chain.sub_delay == pytest.approx(0.5)
        assert chain.gain == pytest.approx(1.3)

    def test_short_chain_rejected_citing_bound(self):
        plant = make_pendulum(M=0.1, l=10.0, delta=1.0, d=2.0)
        with pytest.raises(ChainLengthError, match="3.38"):
            build_state_chain(plant, linear_feedback([[-25.0, -25.0]]), m=3, epsilon=0.3)

    def test_gate_accepts_exactly_the_minimum(self):
        plant = linear_scalar_plant(delta=0.5, d=0.5)
        m_min = min_chain_length(plant.lipschitz_f, 0.3, plant.input_delay)
        chain = build_state_chain(plant, linear_feedback([[0.0]]), m=m_min, epsilon=0.3)
        assert chain.m == m_min

    def test_zero_input_delay_rejected(self):
        plant = linear_scalar_plant(delta=0.5, d=0.0)
        with pytest.raises(ChainLengthError, match="no input delay"):
            build_state_chain(plant, linear_feedback([[0.0]]), m=4, epsilon=0.3)

    def test_untagged_plant_rejected(self):
        plant = RetardedPlant(
            name="untagged", n=1, p=1, q=1,
            dynamics=lambda seg, u: (-seg.value()[0] + u[0],),
            output=lambda x: (x[0],),
            lipschitz_f=1.0, lipschitz_h=1.0,
            state_delay=0.0, input_delay=1.0, output_delay=0.0,
            tags=frozenset({TAG_GLC}),
        )
        with pytest.raises(ChainLengthError, match="stabilizable"):
            build_state_chain(plant, linear_feedback([[0.0]]), m=4, epsilon=0.3)


class TestAssembleClosedLoop:
    def test_delay_set_enumeration(self):
        plant = make_pendulum(M=0.1, l=10.0, delta=1.0, d=2.0)
        chain = build_state_chain(plant, linear_feedback([[-25.0, -25.0]]), m=4, epsilon=0.3)
        system = assemble_closed_loop(plant, chain)
        for expected in (1.0, 0.5, 1.5, 2.0):
            assert any(abs(v - expected) < 1e-12 for v in system.delay_set)
        assert [b.name for b in system.blocks] == ["x", "z1", "z2", "z3", "z4"]

    def test_equilibrium_start_stays_zero(self):
        plant = make_pendulum(M=0.1, l=10.0, delta=1.0, d=2.0)
        chain = build_state_chain(plant, linear_feedback([[-25.0, -25.0]]), m=4, epsilon=0.3)
        system = assemble_closed_loop(plant, chain)
        init = {name: (0.0, 0.0) for name in ["x"] + chain.stage_names}
        tr = integrate(system, init, IntegratorConfig(step=0.01, t_end=2.0))
        for name in ["x", "z1", "z2", "z3", "z4", "u"]:
            assert np.all(tr.channel(name) == 0.0)

    def test_benchmark_initials_integrate(self):
        plant = make_pendulum(M=0.1, l=10.0, delta=1.0, d=2.0)
        chain = build_state_chain(plant, linear_feedback([[-25.0, -25.0]]), m=4, epsilon=0.3)
        system = assemble_closed_loop(plant, chain)
        init = {"x": (1.0, 0.0)}
        for name in chain.stage_names:
            init[name] = (0.2, 0.1)
        tr = integrate(system, init, IntegratorConfig(step=0.01, t_end=1.0))
        assert np.isfinite(tr.channel("x")).all()

    def test_stage_reads_audit(self):
        # each stage reads only itself, its predecessor, and the control
        plant = make_pendulum(M=0.1, l=10.0, delta=1.0, d=2.0)
        chain = build_state_chain(plant, linear_feedback([[-25.0, -25.0]]), m=4, epsilon=0.3)
        system = assemble_closed_loop(plant, chain)
        by_name = {b.name: b for b in system.blocks}
        assert by_name["z1"].reads == {"z1", "x", "u"}
        assert by_name["z3"].reads == {"z3", "z2", "u"}
        # the last stage computes its control from its own current value
        assert by_name["z4"].reads == {"z4", "z3"}


def synthetic_perfect_trace(m: int, sub: float, spacing: float, n: int):
    """Channels with z_i(t) = x(t + i*sub) built from one master array, so
    grid shifts are bit-exact."""
    k = int(round(sub / spacing))
    master = np.array([[math.sin(0.3 * spacing * j), math.cos(0.2 * spacing * j)]
                       for j in range(n + m * k)])
    times = np.arange(n) * spacing
    cols = {"x": master[:n]}
    for i in range(1, m + 1):
        cols[f"z{i}"] = master[i * k: i * k + n]
    return SimulationTrace(times=times, columns=cols, metadata={})


class TestStageErrors:
    def _chain(self, d=2.0, m=4):
        plant = make_pendulum(M=0.1, l=10.0, delta=1.0, d=d)
        return build_state_chain(plant, linear_feedback([[-25.0, -25.0]]), m=m, epsilon=0.3)

    def test_perfect_prediction_gives_zero_errors(self):
        chain = self._chain()
        trace = synthetic_perfect_trace(m=4, sub=0.5, spacing=0.05, n=400)
        errs = extract_stage_errors(trace, chain)
        for i in range(1, 5):
            e = errs[f"e{i}"]
            assert np.all(e[~np.isnan(e).any(axis=1)] == 0.0)
        P = errs["P"]
        assert np.all(P[~np.isnan(P).any(axis=1)] == 0.0)

    def test_identity_residual_roundoff_on_any_trace(self):
        chain = self._chain()
        rng = np.random.default_rng(3)
        n = 400
        times = np.arange(n) * 0.05
        cols = {"x": rng.normal(size=(n, 2))}
        for i in range(1, 5):
            cols[f"z{i}"] = rng.normal(size=(n, 2))
        trace = SimulationTrace(times=times, columns=cols, metadata={})
        assert prediction_identity_residual(trace, chain) < 1e-9

    def test_misaligned_grid_rejected(self):
        chain = self._chain()
        times = np.arange(100) * 0.07  # 0.5 / 0.07 is not an integer
        cols = {"x": np.zeros((100, 2))}
        for i in range(1, 5):
            cols[f"z{i}"] = np.zeros((100, 2))
        trace = SimulationTrace(times=times, columns=cols, metadata={})
        with pytest.raises(GridAlignmentError):
            extract_stage_errors(trace, chain)


class TestOracleEquivalence:
    def test_open_loop_stages_track_time_shifted_state(self):
        # Open loop (u = 0): the plant runs autonomously, so the exact
        # piecewise-polynomial solution provides an integrator-independent
        # reference for x(t + i d/m).
        delta = d = 0.5
        plant = linear_scalar_plant(delta=delta, d=d)
        chain = build_state_chain(plant, linear_feedback([[0.0]]), m=2, epsilon=0.3)
        system = assemble_closed_loop(plant, chain)
        init = {"x": (1.0,), "z1": (0.2,), "z2": (0.2,)}
        tr = integrate(system, init,
                       IntegratorConfig(step=0.0125, t_end=40.0, record_stride=4))
        exact = make_scaled_delayed_decay(1.0, delta, 45.0)
        last_quarter = tr.times >= 30.0
        for i in (1, 2):
            ref = np.array([exact(t + i * chain.sub_delay) for t in tr.times])
            mism = np.abs(tr.channel(f"z{i}")[:, 0] - ref)[last_quarter].max()
            assert mism < 1e-3, f"stage {i} trailing mismatch {mism}"

    def test_plant_itself_matches_exact_solution(self):
        delta = d = 0.5
        plant = linear_scalar_plant(delta=delta, d=d)
        chain = build_state_chain(plant, linear_feedback([[0.0]]), m=2, epsilon=0.3)
        system = assemble_closed_loop(plant, chain)
        init = {"x": (1.0,), "z1": (0.2,), "z2": (0.2,)}
        tr = integrate(system, init,
                       IntegratorConfig(step=0.0125, t_end=40.0, record_stride=4))
        exact = make_scaled_delayed_decay(1.0, delta, 45.0)
        ref = np.array([exact(t) for t in tr.times])
        assert np.abs(tr.channel("x")[:, 0] - ref).max() < 1e-9
