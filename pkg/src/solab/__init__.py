"""solab: a laboratory for solenoidal skew-product attractors.

Builds skew products T(x,y) = (E x mod 1, C y + f(x)) on the solid torus,
codes their inverse branches by Markov words, certifies transversality of
branch pairs, discretizes the transfer operator to estimate SRB densities,
measures fractional Sobolev norms of the resulting measures, and fits
correlation-decay rates — all behind a reproducible CLI (`solab`).
"""

from .model import (
    Contraction,
    ConditionReport,
    ExpandingMap,
    SkewModel,
    TrigForcing,
    check_conditions,
    deriv_f,
    eval_T,
    preimages,
)
from .coding import (
    LeafEval,
    MarkovPartition,
    Word,
    WordTable,
    build_partition,
)
from .transversality import (
    BudgetExceededError,
    PairCertificate,
    TransversalityReport,
    certify_pair,
    condition_margin,
    leaf_lipschitz,
    norm_clause_margin,
    random_f_scan,
    separation_threshold,
    smallest_dth_singular,
    tau_upper_bound,
)
from .transfer import (
    BoxGrid,
    GridDensity,
    SpectralReport,
    UlamFixedPoint,
    UlamOperator,
    apply_L_exact,
    build_ulam,
    spectral_gap_estimate,
    srb_density_ulam,
    srb_histogram_mc,
)
from .norms import (
    AffineLeaf,
    BoundaryMassError,
    DaggerLowerBound,
    LeafDictionary,
    MollifiedDensity,
    NormReport,
    SpectralGrid,
    TestProfile,
    dagger_norm_lower,
    default_dictionary,
    l2_norm,
    ly_ratio_track,
    sobolev_norm,
    sobolev_norm_dq,
)
from .experiments import (
    CorrelationTable,
    DecayFit,
    FitRefusedError,
    Observable,
    ZetaInterval,
    fit_decay,
    measure_correlations,
    zeta_interval,
)
from .config import ExperimentConfig, SchemaError, load_config

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # model
    "ExpandingMap", "Contraction", "TrigForcing", "SkewModel",
    "ConditionReport", "eval_T", "preimages", "check_conditions", "deriv_f",
    # coding
    "MarkovPartition", "Word", "WordTable", "LeafEval", "build_partition",
    # transversality
    "BudgetExceededError", "PairCertificate", "TransversalityReport", "certify_pair",
    "tau_upper_bound", "condition_margin", "norm_clause_margin",
    "separation_threshold", "leaf_lipschitz", "smallest_dth_singular",
    "random_f_scan",
    # transfer
    "BoxGrid", "GridDensity", "UlamOperator", "UlamFixedPoint",
    "SpectralReport", "apply_L_exact", "build_ulam", "srb_density_ulam",
    "srb_histogram_mc", "spectral_gap_estimate",
    # norms
    "SpectralGrid", "sobolev_norm", "sobolev_norm_dq", "l2_norm",
    "BoundaryMassError", "AffineLeaf", "TestProfile", "LeafDictionary",
    "default_dictionary", "MollifiedDensity", "DaggerLowerBound",
    "dagger_norm_lower", "NormReport", "ly_ratio_track",
    # experiments
    "Observable", "CorrelationTable", "measure_correlations", "DecayFit",
    "FitRefusedError", "fit_decay", "ZetaInterval", "zeta_interval",
    # config
    "ExperimentConfig", "SchemaError", "load_config",
]
