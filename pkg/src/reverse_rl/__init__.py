"""Reverse returns, Reverse GVFs and their TD-family learners on finite MDPs."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AssumptionViolated,
    CoverageViolation,
    IncompleteGrid,
    NotErgodic,
    RankDeficientFeatures,
    ReverseRLError,
    SingularSystem,
    SupportExplosion,
)
from .mdp import (  # noqa: E402
    FiniteMdp,
    Policy,
    Trajectory,
    Transition,
    build_microdrone,
    build_random_mdp,
    load_mdp,
    sample_trajectory,
    save_mdp,
    stationary_distribution,
    transition_matrix,
    validate,
)
from .oracle import (  # noqa: E402
    DiscreteDistribution,
    backward_kernel,
    contraction_weights,
    cramer_distance,
    density_ratio,
    distributional_fixed_point,
    distributional_operator,
    forward_gvf,
    is_ratio,
    linear_fixed_point,
    mc_reverse_gvf,
    oracle_report,
    reverse_bellman,
    reverse_gvf,
)
from .reverse_td import (  # noqa: E402
    LearnerConfig,
    LinearValueModel,
    ReverseReturnTracker,
    StepSchedule,
    off_policy_reverse_td_step,
    reverse_td_lambda_step,
    reverse_td_step,
    run_learner,
)
from .distributional import (  # noqa: E402
    GaussianMixture,
    QuantileModel,
    anomaly_probability,
    interval_probability,
    quantile_update_step,
)
from .anomaly import AnomalySpec, StreamingDetector, parse_spec, run_phase1, run_phase2  # noqa: E402
