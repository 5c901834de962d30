"""
proxfed - federated proximal point simulation

Simulates FedProx and its minibatch variant FedMSPP on synthetic
heterogeneous instances, with certified inexact local solvers, stationarity
and heterogeneity diagnostics, and empirical checks of the convergence and
stability guarantees.
"""

__version__ = "1.0.0"
__author__ = "proxfed Team"

from proxfed.pipeline import ExperimentPipeline
from proxfed.utils.config import Config

__all__ = ["ExperimentPipeline", "Config"]
