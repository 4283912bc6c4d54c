"""Simulated microservice mesh plus an SLA-to-resource allocation engine.

Typical flow: load a scenario, profile each service's backpressure-free
utilization, explore load-per-replica rows, solve for scaling thresholds, and
hand them to the per-bucket controller.
"""
from .controller import (
    ControllerConfig,
    ControllerState,
    autoscaler_decision,
    control_loop_step,
    detect_anomalies,
    request_ratio_deviation,
    scaling_decision,
)
from .experiments import Planner, estimation_accuracy, explore, run_closed_loop
from .exploration import ExplorationConfig, assemble_model_inputs, explore_service
from .model import (
    LprProfile,
    QuantileTable,
    Topology,
    build_topology,
    enumerate_chains,
    replica_count,
    resource_cost,
)
from .optimizer import (
    AllocationPlan,
    OptimizerInputs,
    brute_force_allocation,
    calibrate_overestimation,
    check_decomposition,
    solve_allocation,
    tightest_upper_bound,
)
from .profiler import BpProfileConfig, profile_backpressure_threshold
from .scenario import load_preset, load_scenario
from .simulator import SimConfig, Simulation, ThrottleEvent, run_simulation
from .stats import empirical_quantile, welch_t_test
from .workload import ArrivalStream, LoadPattern, make_stream, replay_trace

__version__ = "0.1.0"
