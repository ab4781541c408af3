"""
ba2kit - Budget-Aware Adapters for multi-domain learning

Channel-switching adapters over a frozen convolutional backbone, trained
under a complexity budget, with exact cost accounting and a desk-scale
multi-domain benchmark.
"""

__version__ = "1.0.0"
__author__ = "ba2kit Contributors"
__license__ = "GPL-3.0"

from .core.engine import BudgetBench
from .core.layers import Backbone, DomainAdapter, MultiDomainModel
from .core.models import BudgetSpec, ConstraintMode, TrainConfig

__all__ = [
    "BudgetBench",
    "Backbone",
    "DomainAdapter",
    "MultiDomainModel",
    "BudgetSpec",
    "ConstraintMode",
    "TrainConfig",
]
