"""Censored C-learning: tree-based dynamic treatment regimes for censored survival data."""

from .costtree import CostMatrix, ExpandedDataset, RegimeTree, TreeParams, expand_dataset, fit_cost_sensitive_tree
from .engine import DynamicRegime, FitConfig, StageModels, backward_fit
from .errors import CCLearnError, DegenerateFitError, DegenerateFitWarning, InvalidArgumentError
from .regressors import DesignSpec, PropensityModel, QModel
from .trajectory import CompletedTrajectory, KMCurve, StageRecord, Trajectory, kaplan_meier

__version__ = "0.1.0"

__all__ = [
    "CCLearnError",
    "CompletedTrajectory",
    "CostMatrix",
    "DegenerateFitError",
    "DegenerateFitWarning",
    "DesignSpec",
    "DynamicRegime",
    "ExpandedDataset",
    "FitConfig",
    "InvalidArgumentError",
    "KMCurve",
    "PropensityModel",
    "QModel",
    "RegimeTree",
    "StageModels",
    "StageRecord",
    "Trajectory",
    "TreeParams",
    "backward_fit",
    "expand_dataset",
    "fit_cost_sensitive_tree",
    "kaplan_meier",
]
