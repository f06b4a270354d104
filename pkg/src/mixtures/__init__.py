"""Analyte co-occurrence structure and mixture effects."""

from src.mixtures.cooccurrence import (
    CorrelationMatrix,
    MdsResult,
    correlation_matrix,
    correlation_network,
    dissimilarity,
    mds_embed,
    mds_from_correlation,
)
from src.mixtures.qgcomp import (
    MixtureResult,
    MixtureSpec,
    QgcompSettings,
    load_mixture_specs,
    mixture_index,
    qgcomp_fit,
    quantize,
    run_mixtures,
    save_mixture_specs,
    year_spline,
)

__all__ = [
    "CorrelationMatrix",
    "MdsResult",
    "correlation_matrix",
    "correlation_network",
    "dissimilarity",
    "mds_embed",
    "mds_from_correlation",
    "MixtureResult",
    "MixtureSpec",
    "QgcompSettings",
    "load_mixture_specs",
    "mixture_index",
    "qgcomp_fit",
    "quantize",
    "run_mixtures",
    "save_mixture_specs",
    "year_spline",
]
