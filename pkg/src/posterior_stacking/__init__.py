"""Stack ensembles of approximate posterior inferences by optimizing proper
scoring rules over combination weights."""

from .ensemble import (
    IntervalTable,
    MomentSummary,
    PosteriorEnsemble,
    RankTable,
    SimplexWeights,
    SimulationTable,
    compute_intervals,
    compute_moments,
    compute_ranks,
    validate,
)
from .errors import (
    CapacityError,
    ConfigurationError,
    DimensionError,
    DomainError,
    EvaluationError,
    NumericalError,
    ParameterError,
    SchemaError,
    StackingError,
)
from .evaluation import (
    EvaluationReport,
    baseline_comparison,
    evaluate,
    qmc_sample_mixture,
    rank_histogram,
)
from .intervals import (
    IntervalFit,
    IntervalFitOptions,
    coverage_error,
    fit_intervals,
    stacked_intervals,
)
from .mixture import (
    FitOptions,
    LocalWeightModel,
    MixtureFit,
    fit_local_mixture,
    fit_mixture,
    mixed_ranks,
    mixture_moments,
)
from .samples import (
    AffineAggregator,
    Discriminator,
    SampleFit,
    SampleFitOptions,
    aggregate_draws,
    build_classification_set,
    class_weights,
    discriminative_gap,
    first_moment_fit,
    fit_sample_stacking,
)
from .scores import (
    HybridSpec,
    SmoothingConfig,
    hybrid_score,
    interval_score,
    log_score,
    moment_score,
    rank_cvm_distance,
    rank_moment_penalties,
    smooth_heaviside,
)
from .synthetic import (
    GaussianComponent,
    GaussianScenario,
    SCENARIOS,
    generate,
    gaussian_kl,
    grid_search_weights,
    kl_to_truth,
    scenario_from_name,
    true_moments,
    true_quantiles,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
