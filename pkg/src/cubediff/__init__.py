"""Exact simulation and score machinery for diffusion on the binary hypercube.

The package provides the forward heat flow on {0,1}^d, exact and learned
discrete score functions, an event-driven exact reverse sampler with a
compiled fast path, brute-force dense oracles, and the loss estimators used
to validate all of it.
"""

from ._backend import COMPILED_AVAILABLE, available_backends
from .hypercube import (
    DenseDistribution,
    DimensionError,
    HypercubeState,
    InfiniteRateError,
    ZeroMassError,
    entropy,
    evolve_exact,
    exact_score,
    exact_score_all,
    flip_probability,
    heat_kernel,
    kl,
    max_neighbor_ratio,
    score_envelope,
    stationary_distribution,
    tv,
)
from .oracle import (
    GeneratorMatrix,
    IntegrationInfo,
    RateBoundViolation,
    expm,
    hypercube_generator,
    integrate_forward,
    reverse_generator,
    uniformize_generic,
)
from .reverse_sampler import (
    BatchResult,
    LambdaSchedule,
    RateBoundError,
    SamplerConfig,
    TimePartition,
    TrajectoryStats,
    build_lambda_schedule,
    build_partition,
    clamp_score,
    sample_forward_conditional,
    sample_forward_conditional_batch,
    sample_forward_path,
    sample_reverse,
    sample_reverse_batch,
)
from .scores import (
    CallableScore,
    ClampedScore,
    ConstantScore,
    ExactScore,
    PerturbedScore,
    ScoreFunction,
    TableScore,
    as_score_function,
    geometric_edges,
)
from .losses import (
    LossReport,
    bregman,
    dse_estimate,
    dse_population_value,
    expected_loss_at,
    ise_estimate,
    measure_score_error,
    path_kl,
)
from .score_train import (
    SGDParams,
    ScoreTable,
    TrainConfig,
    TrainReport,
    TrainingDiverged,
    clamp_effect_report,
    dse_gradient,
    dse_objective,
    exact_score_table,
    perturb_score,
    table_as_score_fn,
    train_tabular,
)
from .verify import CriterionResult, criterion_ids, run_all, run_criterion

__version__ = "0.1.0"
