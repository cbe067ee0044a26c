"""Design-based effect estimation for experiments on networks.

Exposure mappings and propensities, Horvitz-Thompson and Hajek estimators,
HAC variances over graph distance, variance-minimizing regression
adjustment with auxiliary regressors, and a simulation harness.
"""

from .netgraph import Graph, bandwidth_matrix, bfs_distances, rgg_generate
from .design import (
    Design,
    Direct,
    EligibleNeighborAny,
    NeighborCountThreshold,
    CustomExposure,
    propensity_exact,
    propensity_mc,
    overlap_check,
    sample_assignment,
)
from .estimators import Dataset, AdjustedEstimate, fisher_wls, lin_wls, tau_adjusted, tau_unadjusted
from .hac import hac_sigma2, influence_terms, nd_solve, nd_system, wald_ci
from .auxiliary import (
    ExposureInteracted,
    InteractedLinearInMeansSet,
    LinearInMeansSet,
    RawCovariates,
    phi0_apply,
    phi0_exact,
    phi0_fit,
)
from .dgp import LinearInMeans, NonlinearContagion, SutvaCounterexample, ground_truth_tau
from .sim import Report, Scenario, bundled_scenario, emit_report, run_study

__version__ = "0.1.0"
