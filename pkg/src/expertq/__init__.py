"""Capacity analysis and discrete-time simulation for expert request queues."""

from .analysis import (
    DriftReport,
    StabilityVerdict,
    SweepResult,
    analytic_boundary,
    capacity_boundary_sweep,
    classify_stability,
    drift_check,
    misestimation_check,
    with_load,
)
from .capacity import (
    CapacityResult,
    LossPolicy,
    RoutingPolicy,
    degraded_capacity,
    duality_gap,
    loss_capacity,
    multi_capacity_dual,
    multi_capacity_primal,
    routing_lp,
    routing_policy_violations,
    simplex_grid,
    single_capacity,
)
from .lp import LinearProgram, LpSolution, brute_force_lp, solve_lp
from .model import (
    ArrivalSpec,
    ExpertProfile,
    Instance,
    expertise,
    instance_from_dict,
    instance_to_dict,
    load_instance,
    merged_pmf,
    save_instance,
    validate_instance,
)
from .rng import RngStreams
from .sched import (
    Scheduler,
    mismatch_baseline,
    offline_loss_scheduler,
    offline_routing_scheduler,
    work_conserving_single,
)
from .sim import (
    QueueState,
    SimConfig,
    SlotEvents,
    TraceStats,
    geometric_service_check,
    initial_state,
    run,
    step,
    write_trace_csv,
)

__version__ = "0.1.0"
