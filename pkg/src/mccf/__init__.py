"""Multi-component graph convolutional collaborative filtering."""
from .graph import BipartiteGraph, FeatureMatrices, RatingEdge, build_features, split_train_test
from .model import MCCF, ModelConfig

__version__ = "0.1.0"

__all__ = ["BipartiteGraph", "FeatureMatrices", "RatingEdge", "build_features",
           "split_train_test", "MCCF", "ModelConfig", "__version__"]
