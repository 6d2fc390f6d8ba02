"""Scalable Bayesian image-on-scalar regression with low-rank GP priors."""

from .basis import BasisSystem, build_basis_system, nystrom_decompose, select_inducing
from .baselines import BMLResult, GLMResult, bh_adjust, bml_fit, glm_fit
from .diagnostics import (
    cross_site_pmse,
    gelman_rubin,
    loocv_pmse,
    ppc_draw,
    select_num_basis,
)
from .domain import SpatialDomain
from .errors import ConfigError, DataError, DecompositionError, NumericalError, SimbaError
from .gibbs import ChainOutput, GibbsConfig, run_chain, run_gibbs
from .kernels import KernelConfig, gram, matern_kernel
from .model import (
    Dataset,
    ParameterState,
    PriorConfig,
    TransformedDataset,
    apply_identifiability,
    init_state,
    transform_dataset,
)
from .simstudy import (
    MetricsTable,
    SimScenario,
    evaluate_replicate,
    make_truth,
    phantom_mask,
    run_study,
    simulate_dataset,
)
from .summaries import (
    EffectMap,
    evidence_from_pplus,
    evidence_score,
    pool_draws,
    reconstruct_effect,
    summarize_gibbs,
    summarize_vi,
)
from .vi import VariationalState, VIConfig, VIResult, cavi_update, run_vi

__version__ = "0.1.0"

__all__ = [
    "BasisSystem", "build_basis_system", "nystrom_decompose", "select_inducing",
    "BMLResult", "GLMResult", "bh_adjust", "bml_fit", "glm_fit",
    "cross_site_pmse", "gelman_rubin", "loocv_pmse", "ppc_draw", "select_num_basis",
    "SpatialDomain",
    "ConfigError", "DataError", "DecompositionError", "NumericalError", "SimbaError",
    "ChainOutput", "GibbsConfig", "run_chain", "run_gibbs",
    "KernelConfig", "gram", "matern_kernel",
    "Dataset", "ParameterState", "PriorConfig", "TransformedDataset",
    "apply_identifiability", "init_state", "transform_dataset",
    "MetricsTable", "SimScenario", "evaluate_replicate", "make_truth",
    "phantom_mask", "run_study", "simulate_dataset",
    "EffectMap", "evidence_from_pplus", "evidence_score", "pool_draws",
    "reconstruct_effect", "summarize_gibbs", "summarize_vi",
    "VariationalState", "VIConfig", "VIResult", "cavi_update", "run_vi",
]
