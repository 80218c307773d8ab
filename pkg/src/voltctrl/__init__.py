"""Distributed feedback voltage control on radial distribution feeders."""

__version__ = "0.1.0"

from .certificate import Certificate, certified_params, step_size_certificate
from .controller import (
    AgentMessage,
    AgentStates,
    CapacityLimits,
    ControllerParams,
    CostModel,
    agent_step,
    broadcast_values,
    dense_equivalence_step,
    init_states,
    soft_threshold,
    subset_step,
)
from .network import (
    ControllableSet,
    Line,
    RadialNetwork,
    SensitivityMatrices,
    build_paths,
    build_rx,
    build_y,
    closed_form_y,
    comm_graph,
    load_network,
    reduce_controllable,
    save_network,
    sensitivity_matrices,
)
from .oracle import (
    AugLagrangian,
    KKTReport,
    VoltageProblem,
    K_penalty,
    kkt_residual,
    reference_solve,
    split_capacity_multiplier,
)
from .powerflow import (
    FlowSolution,
    InjectionProfile,
    LinearPlant,
    lin_voltage,
    make_vpar,
    nonlinear_solve,
    simplified_solve,
)
from .sim import Profiles, Scenario, SimulationTrace, run, run_until, synth_profiles
