import math

import numpy as np
import pytest

from rpred.dde import Block, CoupledSystem, IntegratorConfig, SimulationTrace, integrate
from rpred.history import HistorySignal, SegmentView
from rpred.observer import (
    ObserverFunctional,
    assemble_output_closed_loop,
    build_output_chain,
    extract_output_stage_errors,
    make_pendulum_observer,
    output_identity_residual,
)
from rpred.predictor import ChainLengthError
from rpred.systems import PlantDefinitionError, linear_feedback, make_pendulum, make_scalar_iss_example


def benchmark_setup(m=20):
    plant = make_pendulum(M=0.1, l=10.0, delta=2.0, d=1.0, tau=1.0)
    obs = make_pendulum_observer(plant, L=(1.0, 1.5))
    fb = linear_feedback([[-25.0, -25.0]])
    chain = build_output_chain(plant, obs, fb, m=m, epsilon=0.1)
    return plant, obs, fb, chain


class TestPendulumObserver:
    def test_benchmark_gain_and_constant(self):
        plant = make_pendulum(M=0.1, l=10.0, delta=2.0, d=1.0, tau=1.0)
        obs = make_pendulum_observer(plant, L=(1.0, 1.5))
        assert obs.lipschitz_F == 1.5

    def test_vanishes_at_origin(self):
        plant = make_pendulum(M=0.1, l=10.0)
        obs = make_pendulum_observer(plant)
        assert obs(SegmentView.constant((0.0, 0.0)), (0.0,), (0.0,)) == (0.0, 0.0)

    def test_innovation_pushes_estimate_toward_measurement(self):
        # zero estimate, measurement 0.5: correction is +L * 0.5
        plant = make_pendulum(M=0.1, l=10.0)
        obs = make_pendulum_observer(plant, L=(1.0, 1.5))
        out = obs(SegmentView.constant((0.0, 0.0)), (0.0,), (0.5,))
        assert out == pytest.approx((0.5, 0.75))

    def test_requires_pendulum_plant(self):
        with pytest.raises(PlantDefinitionError, match="pendulum"):
            make_pendulum_observer(make_scalar_iss_example())

    def test_estimation_error_decays_exponentially(self):
        # no input/output delay: the raw observer tracks the open-loop
        # pendulum from a mismatched start.
        plant = make_pendulum(M=0.1, l=10.0, delta=1.0, d=0.0, tau=0.0)
        obs = make_pendulum_observer(plant, L=(1.0, 1.5))

        def plant_rhs(t, cur, hists):
            return plant.dynamics(SegmentView(hists["x"], t, cur["x"]), (0.0,))

        def obs_rhs(t, cur, hists):
            y = (cur["x"][0],)
            return obs(SegmentView(hists["xh"], t, cur["xh"]), (0.0,), y)

        system = CoupledSystem(
            blocks=[Block(name="x", dim=2, rhs=plant_rhs),
                    Block(name="xh", dim=2, rhs=obs_rhs)],
            delay_set=[1.0],
        )
        tr = integrate(system, {"x": (1.0, 0.0), "xh": (0.2, 0.1)},
                       IntegratorConfig(step=0.01, t_end=60.0, record_stride=10))
        err = np.linalg.norm(tr.channel("x") - tr.channel("xh"), axis=1)
        assert err[-1] < 1e-3 * err[0]


class TestBuildOutputChain:
    def test_benchmark_geometry(self):
        _, _, _, chain = benchmark_setup()
        assert chain.m == 20
        assert chain.sub_delay == pytest.approx(0.1)
        assert chain.gain == pytest.approx(3.1)

    def test_short_chain_rejected_citing_bound(self):
        plant = make_pendulum(M=0.1, l=10.0, delta=2.0, d=1.0, tau=1.0)
        obs = make_pendulum_observer(plant)
        with pytest.raises(ChainLengthError, match="19.2"):
            build_output_chain(plant, obs, linear_feedback([[-25.0, -25.0]]), m=19, epsilon=0.1)

    def test_no_delay_rejected(self):
        plant = make_pendulum(M=0.1, l=10.0, delta=1.0, d=0.0, tau=0.0)
        obs = make_pendulum_observer(plant)
        with pytest.raises(ChainLengthError, match="no input or output delay"):
            build_output_chain(plant, obs, linear_feedback([[-25.0, -25.0]]), m=20, epsilon=0.1)


class TestAssembleOutputLoop:
    def test_benchmark_dimensions(self):
        plant, _, _, chain = benchmark_setup()
        system = assemble_output_closed_loop(plant, chain)
        assert len(system.blocks) == 22
        assert sum(b.dim for b in system.blocks) == 44

    def test_zero_start_stays_zero(self):
        plant, _, _, chain = benchmark_setup()
        system = assemble_output_closed_loop(plant, chain)
        init = {name: (0.0, 0.0) for name in ["x"] + chain.stage_names}
        tr = integrate(system, init, IntegratorConfig(step=0.01, t_end=1.0))
        for name in ("x", "zh0", "zh20", "u"):
            assert np.all(tr.channel(name) == 0.0)

    def test_only_stage_zero_reads_the_plant(self):
        plant, _, _, chain = benchmark_setup()
        system = assemble_output_closed_loop(plant, chain)
        by_name = {b.name: b for b in system.blocks}
        assert "x" in by_name["zh0"].reads
        for i in range(1, 21):
            assert "x" not in by_name[f"zh{i}"].reads

    def test_runtime_dependency_audit(self):
        # drive each stage rhs with spying mappings and record what it touches
        plant, _, _, chain = benchmark_setup()
        system = assemble_output_closed_loop(plant, chain)

        class Spy(dict):
            def __init__(self, data):
                super().__init__(data)
                self.touched = set()

            def __getitem__(self, key):
                self.touched.add(key)
                return super().__getitem__(key)

        names = ["x"] + chain.stage_names
        hists = {n: HistorySignal(2, 8.0, initial=(0.1, 0.0)) for n in names}
        hists["u"] = HistorySignal(1, 8.0)
        for k in range(61):
            t = 0.05 * k
            for n in names:
                hists[n].push(t, (0.1, 0.0), (0.0, 0.0))
            hists["u"].push(t, (0.3,), (0.0,))
        cur = {n: (0.1, 0.0) for n in names}
        t_now = 3.05
        for block in system.blocks:
            spy_cur, spy_hist = Spy(cur), Spy(hists)
            block.rhs(t_now, spy_cur, spy_hist)
            touched = spy_cur.touched | spy_hist.touched
            if block.name not in ("x", "zh0"):
                assert "x" not in touched, f"{block.name} touched the plant state"

    def test_closed_loop_converges(self):
        plant, _, _, chain = benchmark_setup()
        system = assemble_output_closed_loop(plant, chain)
        init = {"x": (1.0, 0.0)}
        for name in chain.stage_names:
            init[name] = (0.2, 0.1)
        tr = integrate(system, init,
                       IntegratorConfig(step=0.01, t_end=30.0, record_stride=10))
        norms = np.linalg.norm(tr.channel("x"), axis=1)
        assert norms[-1] < 0.2 * norms.max()


def synthetic_output_trace(m: int, sub: float, tau: float, spacing: float, n: int):
    k = int(round(sub / spacing))
    kt = int(round(tau / spacing))
    master = np.array([[math.sin(0.25 * spacing * j), math.cos(0.15 * spacing * j)]
                       for j in range(n + (m + 1) * k + kt)])
    times = np.arange(n) * spacing
    cols = {"x": master[kt: kt + n]}
    # zh0 tracks x(t - tau) exactly; zh_i = zh_{i-1}(t + sub)
    for i in range(m + 1):
        cols[f"zh{i}"] = master[i * k: i * k + n]
    return SimulationTrace(times=times, columns=cols, metadata={})


class TestOutputStageErrors:
    def test_synthetic_perfect_chain_gives_zero_errors(self):
        plant, _, _, chain = benchmark_setup()
        trace = synthetic_output_trace(m=20, sub=0.1, tau=1.0, spacing=0.05, n=600)
        errs = extract_output_stage_errors(trace, chain)
        for i in range(21):
            e = errs[f"eh{i}"]
            assert np.all(e[~np.isnan(e).any(axis=1)] == 0.0)

    def test_identity_residual_roundoff_on_any_trace(self):
        plant, _, _, chain = benchmark_setup()
        rng = np.random.default_rng(11)
        n = 900
        times = np.arange(n) * 0.05
        cols = {"x": rng.normal(size=(n, 2))}
        for i in range(21):
            cols[f"zh{i}"] = rng.normal(size=(n, 2))
        trace = SimulationTrace(times=times, columns=cols, metadata={})
        assert output_identity_residual(trace, chain) < 1e-9
