import json
import math

import numpy as np
import pytest

from rpred.cli import main, read_trace_csv, write_trace_csv
from rpred.dde import SimulationTrace


def run_cli(*argv):
    return main(list(argv))


class TestChainLength:
    def test_state_feedback_benchmark(self, capsys):
        assert run_cli("chain-length", "--lipschitz", "1", "--epsilon", "0.3",
                       "--delay", "2") == 0
        assert capsys.readouterr().out.strip() == "4"

    def test_output_feedback_benchmark(self, capsys):
        assert run_cli("chain-length", "--output-feedback", "--lipschitz", "1.5",
                       "--lipschitz-h", "1", "--epsilon", "0.1", "--delay", "2") == 0
        assert capsys.readouterr().out.strip() == "20"

    def test_zero_delay(self, capsys):
        assert run_cli("chain-length", "--lipschitz", "9", "--epsilon", "1.0",
                       "--delay", "0") == 0
        assert capsys.readouterr().out.strip() == "1"

    def test_invalid_epsilon_is_usage_error(self, capsys):
        assert run_cli("chain-length", "--lipschitz", "1", "--epsilon", "2.0",
                       "--delay", "2") == 1


class TestList:
    def test_lists_builtins(self, capsys):
        assert run_cli("list") == 0
        out = capsys.readouterr().out
        for name in ("pendulum-sf-d2", "pendulum-of-d1t1", "scalar-iss"):
            assert name in out


class TestHalanay:
    def test_prints_rate(self, capsys):
        assert run_cli("halanay", "--a", "2", "--b", "0", "--delta", "1") == 0
        assert float(capsys.readouterr().out.strip()) == 2.0

    def test_envelope_check_from_csv(self, tmp_path, capsys):
        t = np.linspace(0.0, 5.0, 201)
        tr = SimulationTrace(times=t, columns={"w": np.exp(-2.0 * t)[:, None]}, metadata={})
        path = tmp_path / "series.csv"
        write_trace_csv(tr, path)
        assert run_cli("halanay", "--a", "2", "--b", "1", "--delta", "1",
                       "--csv", str(path), "--t0", "0") == 0
        report = json.loads(capsys.readouterr().out)
        assert report["holds"] is True
        assert report["rate"] == pytest.approx(0.44285, abs=1e-5)

    def test_envelope_violation_exits_2(self, tmp_path, capsys):
        t = np.linspace(0.0, 5.0, 51)
        tr = SimulationTrace(times=t, columns={"w": np.ones_like(t)[:, None]}, metadata={})
        path = tmp_path / "series.csv"
        write_trace_csv(tr, path)
        assert run_cli("halanay", "--a", "2", "--b", "1", "--delta", "1",
                       "--csv", str(path)) == 2


class TestSimulate:
    def test_writes_trace_and_report(self, tmp_path, capsys):
        code = run_cli("simulate", "--scenario", "pendulum-sf-d2",
                       "--out", str(tmp_path))
        assert code == 0
        trace_path = tmp_path / "pendulum-sf-d2.trace.csv"
        report_path = tmp_path / "pendulum-sf-d2.report.json"
        assert trace_path.exists() and report_path.exists()
        report = json.loads(report_path.read_text())
        assert report["schema"] == 1
        assert report["passed"] is True
        header = trace_path.read_text().splitlines()[0].split(",")
        assert header[:4] == ["t", "x.1", "x.2", "z1.1"]
        assert "u.1" in header and "P.1" in header and "P.2" in header

    def test_unknown_scenario_exits_1(self, tmp_path, capsys):
        assert run_cli("simulate", "--scenario", "nope", "--out", str(tmp_path)) == 1

    def test_all_writes_every_builtin(self, tmp_path, capsys):
        from rpred.scenarios import builtin_scenarios

        # short horizon: every scenario emits files; unsettled checks -> 2
        code = run_cli("simulate", "--all", "--out", str(tmp_path), "--t-end", "5")
        assert code == 2
        for s in builtin_scenarios():
            assert (tmp_path / f"{s.name}.trace.csv").exists()
            assert (tmp_path / f"{s.name}.report.json").exists()

    def test_scenario_and_all_are_exclusive(self, tmp_path, capsys):
        assert run_cli("simulate", "--out", str(tmp_path)) == 1
        assert run_cli("simulate", "--all", "--scenario", "pendulum-sf-d2",
                       "--out", str(tmp_path)) == 1

    def test_gate_violation_exits_1(self, tmp_path, capsys):
        assert run_cli("simulate", "--scenario", "pendulum-sf-d2", "--out", str(tmp_path),
                       "--override", "predictor.m=3") == 1

    def test_failed_check_exits_2(self, tmp_path, capsys):
        code = run_cli("simulate", "--scenario", "strict-feedback-demo",
                       "--out", str(tmp_path), "--t-end", "8",
                       "--override", "checks.final_sup=[{channel='x', window=2.0, max=1e-9}]")
        assert code == 2

    def test_scenario_file_roundtrip_through_cli(self, tmp_path, capsys):
        from rpred.scenarios import get_scenario, render_scenario, apply_overrides

        s = get_scenario("strict-feedback-demo")
        path = tmp_path / "demo.toml"
        path.write_text(render_scenario(s))
        assert run_cli("simulate", "--scenario", str(path), "--out", str(tmp_path)) == 0

    def test_csv_roundtrip_exact(self, tmp_path, capsys):
        code = run_cli("simulate", "--scenario", "strict-feedback-demo",
                       "--out", str(tmp_path))
        assert code == 0
        from rpred.scenarios import get_scenario, run_scenario

        result = run_scenario(get_scenario("strict-feedback-demo"))
        times, cols = read_trace_csv(tmp_path / "strict-feedback-demo.trace.csv")
        assert np.array_equal(times, result.trace.times)
        for name, col in result.trace.columns.items():
            got = cols[name]
            mask = ~np.isnan(col)
            assert np.array_equal(got[mask], col[mask]), f"channel {name} not exact"
            assert np.array_equal(np.isnan(got), np.isnan(col))


class TestVerify:
    def test_verify_benchmark_scenario(self, capsys, monkeypatch):
        monkeypatch.delenv("RP_SEED", raising=False)
        code = run_cli("verify", "--scenario", "pendulum-sf-d2", "--samples", "2000")
        out = json.loads(capsys.readouterr().out)
        assert code == 0
        assert out["lipschitz"]["passed"] is True
        assert out["checks"]["gas"]["passed"] is True

    def test_tampered_declared_constant_fails(self, capsys):
        code = run_cli("verify", "--scenario", "pendulum-sf-d2",
                       "--override", "plant.lipschitz_f=0.01", "--samples", "500")
        # the chain gain changes with the declared constant, so only the
        # lipschitz report needs to fail for the exit code to flip
        out = json.loads(capsys.readouterr().out)
        assert code == 2
        assert out["lipschitz"]["passed"] is False

    def test_verify_scalar_iss(self, capsys):
        code = run_cli("verify", "--scenario", "scalar-iss", "--samples", "500")
        out = json.loads(capsys.readouterr().out)
        assert code == 0
        assert out["checks"]["iss"]["passed"] is True

    def test_rp_seed_env_controls_sampling(self, capsys, monkeypatch):
        monkeypatch.setenv("RP_SEED", "7")
        run_cli("verify", "--scenario", "scalar-iss", "--samples", "200")
        out = json.loads(capsys.readouterr().out)
        assert out["lipschitz"]["seed"] == 7
