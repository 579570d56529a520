"""Synthetic benchmark sequences, OTB-style metrics, timing and ablation runs."""
from .metrics import EvalResult, evaluate
from .synthetic import SyntheticSpec, generate_sequence, standard_suite

__all__ = ["EvalResult", "evaluate", "SyntheticSpec", "generate_sequence", "standard_suite"]
