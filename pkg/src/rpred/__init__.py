"""Sequential-predictor delay compensation toolkit for retarded systems.

Simulation of nonlinear systems with constant state, input, and output
delays; state- and output-feedback controllers built from chains of
sequential predictors; and the Halanay/class-KL analysis utilities used
to grade the closed loops.
"""

from .analysis import (
    DecayEnvelope,
    HalanayParams,
    KLBound,
    check_gas,
    check_halanay_envelope,
    check_iss,
    compose_kl,
    halanay_rate,
)
from .dde import (
    AuxChannel,
    Block,
    ConfigError,
    CoupledSystem,
    DivergenceError,
    IntegratorConfig,
    SimulationTrace,
    integrate,
)
from .history import HistoryError, HistorySignal, SegmentView
from .observer import (
    ObserverFunctional,
    OutputPredictorChain,
    assemble_output_closed_loop,
    build_output_chain,
    extract_output_stage_errors,
    make_pendulum_observer,
    output_identity_residual,
)
from .predictor import (
    ChainLengthError,
    StatePredictorChain,
    assemble_closed_loop,
    build_state_chain,
    extract_stage_errors,
    min_chain_length,
    prediction_identity_residual,
)
from .scenarios import (
    Scenario,
    ScenarioError,
    ScenarioResult,
    builtin_scenarios,
    get_scenario,
    parse_scenario,
    render_scenario,
    run_scenario,
)
from .systems import (
    FeedbackLaw,
    RetardedPlant,
    linear_feedback,
    make_pendulum,
    make_scalar_iss_example,
    make_strict_feedback,
    verify_lipschitz,
)

__version__ = "0.1.0"
