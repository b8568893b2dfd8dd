"""Personalized federated cluster models on a from-scratch numpy CNN."""
from .config import ExperimentConfig
from .estimators import (DeltaAgglomerativeClustering, FedAvgClassifier, MatrixPreprocessor,
                         PFCMClassifier)

__all__ = ["ExperimentConfig", "DeltaAgglomerativeClustering", "FedAvgClassifier",
           "MatrixPreprocessor", "PFCMClassifier"]
__version__ = "0.1.0"
