"""Synthetic panels with planted effects and a dense reference estimator."""

from src.synth.generator import SynthSpec, SynthTruth, generate_panel, write_inputs
from src.synth.oracle import dense_design, oracle_fit, oracle_fit_dense

__all__ = [
    "SynthSpec",
    "SynthTruth",
    "generate_panel",
    "write_inputs",
    "dense_design",
    "oracle_fit",
    "oracle_fit_dense",
]
