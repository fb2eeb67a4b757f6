"""Data model, file formats, synthetic data, cross-validation and experiments."""

from .bundle import load_posterior, save_posterior
from .cv import CvPlan, CvResult, build_spec, cv_select, split
from .data import Axis, ConditionGrid, Dataset, read_dataset, read_moments, write_dataset, write_moments
from .experiment import load_config, run_experiment
from .synthetic import SyntheticParams, generate_synthetic

__all__ = [
    "Axis",
    "ConditionGrid",
    "Dataset",
    "read_dataset",
    "write_dataset",
    "read_moments",
    "write_moments",
    "SyntheticParams",
    "generate_synthetic",
    "CvPlan",
    "CvResult",
    "split",
    "build_spec",
    "cv_select",
    "save_posterior",
    "load_posterior",
    "load_config",
    "run_experiment",
]
