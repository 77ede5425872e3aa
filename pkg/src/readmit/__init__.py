"""Potentially avoidable readmission labeling and phase-type survival forests."""

__version__ = "0.1.0"

from .forest import ForestConfig, SurvivalForest, oob_error, oob_predict, predict, train, variable_importance
from .frame import ModelFrame, build_frame, outcomes_from_labels
from .metrics import auroc, calibration_table, classification_metrics, roc_curve, split_sample_validation
from .par_engine import LabelReport, ParConfig, RuleTables, default_rule_tables, label, par_rate
from .phase_type import CoxianPH, EmConfig, ObservationSet, density, fit_em, mean, sample_sojourn, survival
from .preprocess import PreprocessConfig, breiman_replace, preprocess
from .records import AdmissionRecord, CovariateVector, Dataset, build_timelines, ingest, serialize
from .synth import CohortSpec, generate, two_regime_spec

__all__ = [
    "AdmissionRecord",
    "CohortSpec",
    "CovariateVector",
    "CoxianPH",
    "Dataset",
    "EmConfig",
    "ForestConfig",
    "LabelReport",
    "ModelFrame",
    "ObservationSet",
    "ParConfig",
    "PreprocessConfig",
    "RuleTables",
    "SurvivalForest",
    "auroc",
    "breiman_replace",
    "build_frame",
    "build_timelines",
    "calibration_table",
    "classification_metrics",
    "default_rule_tables",
    "density",
    "fit_em",
    "generate",
    "ingest",
    "label",
    "mean",
    "oob_error",
    "oob_predict",
    "outcomes_from_labels",
    "par_rate",
    "predict",
    "preprocess",
    "roc_curve",
    "sample_sojourn",
    "serialize",
    "split_sample_validation",
    "survival",
    "train",
    "two_regime_spec",
    "variable_importance",
]
