"""
Core functionality for ba2kit.
"""

from .engine import BudgetBench
from .layers import Backbone, DomainAdapter, MultiDomainModel
from .models import BudgetSpec, ConstraintMode, ConstraintTrace, TrainConfig

__all__ = [
    "BudgetBench",
    "Backbone",
    "DomainAdapter",
    "MultiDomainModel",
    "BudgetSpec",
    "ConstraintMode",
    "ConstraintTrace",
    "TrainConfig",
]
