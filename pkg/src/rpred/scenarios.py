"""Named end-to-end experiment definitions and their execution.

A `Scenario` binds a plant factory, a controller (predictor chain, output
chain, direct feedback, or open loop), integrator settings, initial data,
and the checks to grade the run with.  Scenarios serialize to a flat TOML
document (one table per section) and round-trip exactly.

The built-in list reproduces the benchmark study: the pendulum with
(d=2, delta=1, m=4) and (d=4, delta=2, m=8) under state feedback, the
pendulum with (d=tau=1, delta=2, m=20) under output feedback, the scalar
ISS example under direct feedback, and a strict-feedback demo.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

try:
    import tomllib as _toml  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as _toml

from . import analysis, observer as observer_mod, predictor as predictor_mod, systems
from .dde import IntegratorConfig, SimulationTrace, integrate

__all__ = [
    "Scenario",
    "ScenarioError",
    "ScenarioResult",
    "SupCheckReport",
    "IdentityReport",
    "builtin_scenarios",
    "get_scenario",
    "run_scenario",
    "render_scenario",
    "parse_scenario",
    "load_scenario",
    "apply_overrides",
    "zero_initial_variant",
]

_SECTIONS = ("plant", "controller", "predictor", "observer", "disturbance",
             "integrator", "initial", "checks")
_CONTROLLER_KINDS = ("state-chain", "output-chain", "direct", "open-loop")


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario definition."""


@dataclass(frozen=True)
class Scenario:
    name: str
    plant: dict
    controller: dict
    integrator: dict
    initial: dict
    predictor: dict | None = None
    observer: dict | None = None
    disturbance: dict | None = None
    checks: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.name:
            raise ScenarioError("scenario needs a name")
        kind = self.controller.get("kind")
        if kind not in _CONTROLLER_KINDS:
            raise ScenarioError(f"unknown controller kind {kind!r}; expected one of {_CONTROLLER_KINDS}")
        if kind == "state-chain" and self.predictor is None:
            raise ScenarioError("state-chain controller requires a [predictor] section")
        if kind == "output-chain" and self.observer is None:
            raise ScenarioError("output-chain controller requires an [observer] section")
        if "x" not in self.initial:
            raise ScenarioError("initial section must provide x")
        for key in ("step", "t_end"):
            if key not in self.integrator:
                raise ScenarioError(f"integrator section must provide {key!r}")


# ----------------------------------------------------------------------
# Plant construction
# ----------------------------------------------------------------------

_PHI_PRESETS = {"none": None, "delayed_sin_x1": "delayed_sin_x1"}


def _build_plant(spec: Mapping):
    """Return (plant, bundled_feedback, bundled_observer) for a plant table."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    declared_lf = spec.pop("lipschitz_f", None)
    declared_lh = spec.pop("lipschitz_h", None)
    if kind == "pendulum":
        plant = systems.make_pendulum(
            M=spec.pop("M"), l=spec.pop("l"), g=spec.pop("g", 9.8),
            zeta=spec.pop("zeta", 0.5), delta=spec.pop("delta", 1.0),
            d=spec.pop("d", 2.0), tau=spec.pop("tau", 0.0),
        )
        bundled_fb, bundled_obs = None, None
    elif kind == "scalar_iss":
        plant = systems.make_scalar_iss_example(d=spec.pop("d", 0.0))
        bundled_fb, bundled_obs = plant.feedback, None
    elif kind == "strict_feedback":
        n = spec.pop("n")
        preset = spec.pop("phi_preset", "none")
        gain = spec.pop("phi_gain", 0.0)
        delta = spec.pop("delta", 0.0)
        if preset not in _PHI_PRESETS:
            raise ScenarioError(f"unknown phi preset {preset!r}")
        phis = [None] * n
        if preset == "delayed_sin_x1":
            g = float(gain)
            lag = float(delta)
            phis[n - 1] = (lambda seg: g * math.sin(seg.value(lag)[0]), abs(g))
        design = systems.make_strict_feedback(
            n=n, phis=phis, K=spec.pop("K"), L=spec.pop("L"),
            delta=delta, d=spec.pop("d", 0.0), tau=spec.pop("tau", 0.0),
        )
        plant, bundled_fb, bundled_obs = design.plant, design.feedback, design.observer
    else:
        raise ScenarioError(f"unknown plant kind {kind!r}; expected pendulum, scalar_iss or strict_feedback")
    if spec:
        raise ScenarioError(f"unknown plant keys: {sorted(spec)}")
    if declared_lf is not None or declared_lh is not None:
        plant = dataclasses.replace(
            plant,
            lipschitz_f=declared_lf if declared_lf is not None else plant.lipschitz_f,
            lipschitz_h=declared_lh if declared_lh is not None else plant.lipschitz_h,
        )
    return plant, bundled_fb, bundled_obs


def _resolve_feedback(scenario: Scenario, plant, bundled):
    gain = scenario.controller.get("gain")
    if gain is not None:
        return systems.linear_feedback(gain)
    if bundled is not None:
        return bundled
    if scenario.controller.get("kind") == "open-loop":
        return systems.linear_feedback([[0.0] * plant.n] * plant.p)
    raise ScenarioError(f"scenario {scenario.name!r} has no feedback gain and the plant bundles none")


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------

@dataclass
class SupCheckReport:
    channel: str
    window: float
    observed: float
    limit: float

    @property
    def passed(self) -> bool:
        return self.observed < self.limit

    def as_dict(self) -> dict:
        return {"channel": self.channel, "window": self.window,
                "observed": self.observed, "limit": self.limit, "passed": self.passed}


@dataclass
class IdentityReport:
    residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.residual < self.tol

    def as_dict(self) -> dict:
        return {"residual": self.residual, "tol": self.tol, "passed": self.passed}


@dataclass
class ScenarioResult:
    scenario: Scenario
    trace: SimulationTrace
    reports: dict

    @property
    def passed(self) -> bool:
        return all(_report_passed(r) for r in self.reports.values())

    def report_dict(self) -> dict:
        return {name: r.as_dict() for name, r in self.reports.items()}


def _report_passed(report) -> bool:
    if hasattr(report, "passed"):
        return bool(report.passed)
    if hasattr(report, "holds"):
        return bool(report.holds)
    raise TypeError(f"report {report!r} has no pass flag")


def final_window_sup(trace: SimulationTrace, channel: str, window: float) -> float:
    """Sup of the channel norm over the final `window` seconds of defined data.

    Channels produced by grid shifting (prediction errors) are NaN past
    their domain; the window is anchored at the last defined sample.
    """
    col = trace.channel(channel)
    norms = np.linalg.norm(col, axis=1)
    valid = ~np.isnan(norms)
    if not valid.any():
        raise ScenarioError(f"channel {channel!r} has no defined samples")
    t = trace.times[valid]
    n = norms[valid]
    return float(n[t >= t[-1] - window].max())


# ----------------------------------------------------------------------
# Execution
# ----------------------------------------------------------------------

def _auto_m(value, fallback: int):
    return fallback if value in (None, "auto") else int(value)


def run_scenario(scenario: Scenario) -> ScenarioResult:
    """Assemble, integrate, extract error channels, and grade the checks."""
    scenario.validate()
    plant, bundled_fb, bundled_obs = _build_plant(scenario.plant)
    feedback = _resolve_feedback(scenario, plant, bundled_fb)
    kind = scenario.controller["kind"]
    config = IntegratorConfig(
        step=scenario.integrator["step"],
        t_end=scenario.integrator["t_end"],
        record_stride=scenario.integrator.get("record_stride", 1),
    )
    x0 = tuple(float(v) for v in scenario.initial["x"])
    initial = {"x": x0}
    chain = None
    out_chain = None

    if kind == "state-chain":
        p = scenario.predictor
        m = _auto_m(p.get("m"), predictor_mod.min_chain_length(
            plant.lipschitz_f, p.get("epsilon", 0.3), plant.input_delay))
        chain = predictor_mod.build_state_chain(plant, feedback, m, p.get("epsilon", 0.3))
        system = predictor_mod.assemble_closed_loop(plant, chain)
        stage0 = tuple(float(v) for v in p.get("initial", x0))
        for name in chain.stage_names:
            initial[name] = stage0
    elif kind == "output-chain":
        o = scenario.observer
        obs = bundled_obs
        if plant.meta.get("kind") == "pendulum":
            obs = observer_mod.make_pendulum_observer(plant, o.get("gain", (1.0, 1.5)))
        if obs is None:
            raise ScenarioError(f"no observer available for plant {plant.name!r}")
        L_eff = obs.lipschitz_F * (1.0 + plant.lipschitz_h)
        m = _auto_m(o.get("m"), predictor_mod.min_chain_length(
            L_eff, o.get("epsilon", 0.1), plant.input_delay + plant.output_delay))
        out_chain = observer_mod.build_output_chain(plant, obs, feedback, m, o.get("epsilon", 0.1))
        system = observer_mod.assemble_output_closed_loop(plant, out_chain)
        stage0 = tuple(float(v) for v in o.get("initial", x0))
        for name in out_chain.stage_names:
            initial[name] = stage0
    elif kind in ("direct", "open-loop"):
        amp = (scenario.disturbance or {}).get("amplitude", 0.0)
        system = analysis.assemble_direct_loop(plant, feedback, amp)
    else:  # pragma: no cover - validate() already rejects
        raise ScenarioError(f"unhandled controller kind {kind!r}")

    meta = {
        "scenario": scenario.name,
        "plant": dict(scenario.plant),
        "controller": dict(scenario.controller),
        "config": dict(scenario.integrator),
    }
    if chain is not None:
        meta["chain"] = {"m": chain.m, "gain": chain.gain, "sub_delay": chain.sub_delay,
                         "epsilon": chain.epsilon}
    if out_chain is not None:
        meta["chain"] = {"m": out_chain.m, "gain": out_chain.gain,
                         "sub_delay": out_chain.sub_delay, "epsilon": out_chain.epsilon}

    trace = integrate(system, initial, config, metadata=meta)
    if chain is not None:
        trace.columns.update(predictor_mod.extract_stage_errors(trace, chain))
    if out_chain is not None:
        trace.columns.update(observer_mod.extract_output_stage_errors(trace, out_chain))

    reports: dict = {}
    checks = scenario.checks or {}
    if "gas" in checks:
        c = checks["gas"]
        reports["gas"] = analysis.check_gas(
            trace, channel=c.get("channel", "x"),
            settle_fraction=c.get("settle_fraction", 0.05),
            horizon_fraction=c.get("horizon_fraction", 1.0 / 6.0),
        )
    for c in checks.get("final_sup", []):
        name = f"final_sup_{c['channel']}"
        reports[name] = SupCheckReport(
            channel=c["channel"], window=c.get("window", 10.0),
            observed=final_window_sup(trace, c["channel"], c.get("window", 10.0)),
            limit=c["max"],
        )
    if "identity" in checks:
        tol = checks["identity"].get("tol", 1e-9)
        if chain is not None:
            resid = predictor_mod.prediction_identity_residual(trace, chain)
        elif out_chain is not None:
            resid = observer_mod.output_identity_residual(trace, out_chain)
        else:
            raise ScenarioError("identity check requires a predictor or output chain")
        reports["identity"] = IdentityReport(residual=resid, tol=tol)
    if "iss" in checks:
        c = checks["iss"]
        amp_config = IntegratorConfig(
            step=c.get("step", config.step), t_end=c.get("t_end", config.t_end),
            record_stride=c.get("record_stride", config.record_stride),
        )
        reports["iss"] = analysis.check_iss(
            plant, feedback, initial=x0, amp_config=amp_config,
            amplitudes=tuple(c.get("amplitudes", (0.1, 0.5, 1.0))),
            settle_threshold=c.get("settle_threshold", 1e-3),
            zero_t_end=c.get("zero_t_end"),
        )
    return ScenarioResult(scenario=scenario, trace=trace, reports=reports)


# ----------------------------------------------------------------------
# Built-ins
# ----------------------------------------------------------------------

def builtin_scenarios() -> list:
    """The benchmark scenario suite (see module docstring)."""
    pendulum = {"kind": "pendulum", "M": 0.1, "l": 10.0, "g": 9.8, "zeta": 0.5}
    ten_sec = [  # final-10-second windows used by the pendulum studies
        {"channel": "x", "window": 10.0, "max": 0.05},
        {"channel": "u", "window": 10.0, "max": 0.5},
        {"channel": "P", "window": 10.0, "max": 0.02},
    ]
    sf_d2 = Scenario(
        name="pendulum-sf-d2",
        plant={**pendulum, "delta": 1.0, "d": 2.0, "tau": 0.0},
        controller={"kind": "state-chain", "gain": [[-25.0, -25.0]]},
        predictor={"m": 4, "epsilon": 0.3, "initial": [0.2, 0.1]},
        integrator={"step": 0.005, "t_end": 60.0, "record_stride": 10},
        initial={"x": [1.0, 0.0]},
        checks={
            "gas": {"channel": "x", "settle_fraction": 0.05,
                    "horizon_fraction": 10.0 / 60.0},
            "final_sup": ten_sec,
            "identity": {"tol": 1e-9},
        },
    )
    sf_d4 = Scenario(
        name="pendulum-sf-d4",
        plant={**pendulum, "delta": 2.0, "d": 4.0, "tau": 0.0},
        controller={"kind": "state-chain", "gain": [[-25.0, -25.0]]},
        predictor={"m": 8, "epsilon": 0.3, "initial": [0.2, 0.1]},
        integrator={"step": 0.005, "t_end": 60.0, "record_stride": 10},
        initial={"x": [1.0, 0.0]},
        checks={
            "gas": {"channel": "x", "settle_fraction": 0.05,
                    "horizon_fraction": 10.0 / 60.0},
            "final_sup": [
                {"channel": "x", "window": 10.0, "max": 0.05},
                {"channel": "u", "window": 10.0, "max": 0.5},
                {"channel": "P", "window": 10.0, "max": 0.05},
            ],
            "identity": {"tol": 1e-9},
        },
    )
    of = Scenario(
        name="pendulum-of-d1t1",
        plant={**pendulum, "delta": 2.0, "d": 1.0, "tau": 1.0},
        controller={"kind": "output-chain", "gain": [[-25.0, -25.0]]},
        observer={"gain": [1.0, 1.5], "m": 20, "epsilon": 0.1, "initial": [0.2, 0.1]},
        integrator={"step": 0.005, "t_end": 60.0, "record_stride": 10},
        initial={"x": [1.0, 0.0]},
        checks={
            "gas": {"channel": "x", "settle_fraction": 0.05,
                    "horizon_fraction": 10.0 / 60.0},
            "final_sup": [{"channel": "Ph", "window": 10.0, "max": 0.05}],
            "identity": {"tol": 1e-9},
        },
    )
    # The scalar loop settles like 1/sqrt(t) (cubic feedback through the
    # input channel), so the zero-disturbance settle leg needs a horizon
    # of order 1/threshold^2; check_iss integrates that leg adaptively.
    iss = Scenario(
        name="scalar-iss",
        plant={"kind": "scalar_iss", "d": 0.0},
        controller={"kind": "direct", "gain": [[-1.0]]},
        integrator={"step": 0.01, "t_end": 40.0, "record_stride": 10},
        initial={"x": [4.0]},
        checks={
            "iss": {"amplitudes": [0.1, 0.5, 1.0], "settle_threshold": 0.001,
                    "step": 0.01, "t_end": 40.0, "record_stride": 10,
                    "zero_t_end": 34000.0},
        },
    )
    strict = Scenario(
        name="strict-feedback-demo",
        plant={"kind": "strict_feedback", "n": 2, "K": [-2.0, -3.0], "L": [3.0, 2.0],
               "delta": 0.5, "d": 1.0, "tau": 0.0,
               "phi_preset": "delayed_sin_x1", "phi_gain": 0.25},
        controller={"kind": "state-chain"},
        predictor={"m": "auto", "epsilon": 0.3, "initial": [0.2, 0.1]},
        integrator={"step": 0.0125, "t_end": 40.0, "record_stride": 4},
        initial={"x": [1.0, 0.0]},
        checks={
            "gas": {"channel": "x", "settle_fraction": 0.05, "horizon_fraction": 0.25},
            "final_sup": [{"channel": "x", "window": 10.0, "max": 0.05}],
            "identity": {"tol": 1e-9},
        },
    )
    return [sf_d2, sf_d4, of, iss, strict]


def get_scenario(name: str) -> Scenario:
    for s in builtin_scenarios():
        if s.name == name:
            return s
    known = ", ".join(s.name for s in builtin_scenarios())
    raise ScenarioError(f"unknown scenario {name!r}; built-ins: {known}")


# ----------------------------------------------------------------------
# Serialization (flat TOML)
# ----------------------------------------------------------------------

def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(x) for x in v) + "]"
    raise ScenarioError(f"cannot serialize value {v!r}")


def _render_table(name: str, table: Mapping, out: list) -> None:
    plain = {k: v for k, v in table.items() if not isinstance(v, (dict, list)) or
             (isinstance(v, list) and not any(isinstance(x, dict) for x in v))}
    nested = {k: v for k, v in table.items() if isinstance(v, dict)}
    arrays = {k: v for k, v in table.items()
              if isinstance(v, list) and any(isinstance(x, dict) for x in v)}
    out.append(f"[{name}]")
    for k, v in plain.items():
        out.append(f"{k} = {_toml_scalar(v)}")
    out.append("")
    for k, v in nested.items():
        _render_table(f"{name}.{k}", v, out)
    for k, items in arrays.items():
        for item in items:
            out.append(f"[[{name}.{k}]]")
            for kk, vv in item.items():
                out.append(f"{kk} = {_toml_scalar(vv)}")
            out.append("")


def render_scenario(s: Scenario) -> str:
    out = [f"name = {_toml_scalar(s.name)}", ""]
    for section in _SECTIONS:
        table = getattr(s, section)
        if table:
            _render_table(section, table, out)
    return "\n".join(out)


def parse_scenario(text: str) -> Scenario:
    data = _toml.loads(text)
    if "name" not in data:
        raise ScenarioError("scenario file must set a top-level name")
    known = set(_SECTIONS) | {"name"}
    unknown = set(data) - known
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    kwargs = {sec: data.get(sec) for sec in _SECTIONS}
    for required in ("plant", "controller", "integrator", "initial"):
        if kwargs[required] is None:
            raise ScenarioError(f"scenario file is missing the [{required}] section")
    if kwargs["checks"] is None:
        kwargs["checks"] = {}
    s = Scenario(name=data["name"], **kwargs)
    s.validate()
    return s


def load_scenario(path) -> Scenario:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_scenario(data.decode("utf-8"))


# ----------------------------------------------------------------------
# Overrides
# ----------------------------------------------------------------------

def _parse_override_value(text: str):
    try:
        return _toml.loads(f"v = {text}")["v"]
    except Exception:
        return text


def apply_overrides(s: Scenario, overrides: Mapping) -> Scenario:
    """Return a copy with dotted-key overrides applied (e.g. predictor.m=3)."""
    parts = dataclasses.asdict(s)
    for key, raw in overrides.items():
        value = _parse_override_value(raw) if isinstance(raw, str) else raw
        path = key.split(".")
        node = parts
        for p in path[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
            if not isinstance(node, dict):
                raise ScenarioError(f"override key {key!r} does not address a table")
        node[path[-1]] = value
    name = parts.pop("name")
    return Scenario(name=name, **parts)


def zero_initial_variant(s: Scenario, t_end: float | None = None) -> Scenario:
    """Variant with all-zero initial data (plant, stages, control)."""
    plant, _, _ = _build_plant(s.plant)
    zeros = [0.0] * plant.n
    over = {"initial.x": zeros}
    if s.predictor is not None:
        over["predictor.initial"] = zeros
    if s.observer is not None:
        over["observer.initial"] = zeros
    if t_end is not None:
        over["integrator.t_end"] = t_end
    out = apply_overrides(s, over)
    return dataclasses.replace(out, name=s.name + "-zero", checks={})
