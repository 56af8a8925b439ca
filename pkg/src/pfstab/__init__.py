"""pfstab: optimal almost-everywhere stabilization of stochastic nonlinear
systems via box-discretized transfer operators and occupation-measure
linear programming."""

from .certificate import (
    LyapunovMeasure,
    StabilityCertificate,
    VerificationProblem,
    neumann_partial_sums,
    spectral_radius,
    verify_stability,
)
from .config import (
    RunConfig,
    load_config,
    parse_config,
    serialize_config,
)
from .errors import (
    ConfigurationError,
    CorruptFileError,
    DegenerateSolutionError,
    MissingArtifactError,
    ModelError,
    NumericError,
    PfstabError,
    SolverError,
    StaleArtifactError,
    UsageError,
)
from .estimator import OptimalStabilizer
from .lp_core import (
    LPSolution,
    LPTolerances,
    StabilizationLP,
    assemble_lp,
    export_lp,
    feasibility_probe,
    largest_feasible_gamma,
    leak_diagnostic,
    solve_by_policy_enumeration,
    solve_lp,
)
from .models import (
    ControlGrid,
    NoiseModel,
    StageCost,
    SystemModel,
    bernoulli_noise,
    no_noise,
    pendulum_acceleration,
    pendulum_model,
    pendulum_step,
    quadratic_cost,
    quadratic_stage_cost,
    quantize_uniform_noise,
)
from .partition import (
    OUTSIDE,
    Partition,
    build_grid,
    cell_samples,
    default_attractor_region,
    locate,
    locate_many,
)
from .pf_builder import (
    TransferEnsemble,
    TransferMatrix,
    average_over_noise,
    build_cost_table,
    build_ensemble,
    build_pf_matrix,
    ensemble_from_matrices,
    load_ensemble,
    restrict,
    save_ensemble,
)
from .policy import (
    NO_ACTION,
    Policy,
    certify_policy,
    closed_loop_matrix,
    evaluate_policy,
    extract_policy,
    lyapunov_measure,
    uniform_policy,
)
from .verify import (
    Trajectory,
    VerificationReport,
    basin_fraction,
    local_controller,
    simulate_trajectory,
    trajectory_seed_sequence,
    uniform_noise_sampler,
    zero_policy,
)
from .cli import export_grid_csv, export_policy_csv, run_pipeline

__version__ = "0.1.0"
