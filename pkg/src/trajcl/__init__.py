"""Continual learning for interaction-aware vehicle trajectory prediction.

Trains a trajectory predictor through a sequence of divergent traffic
scenarios without re-training on old data: a bounded scenario repository,
Monte-Carlo conditional-KL divergence measuring between scenarios, a
divergence-proportional memory allocator, and gradient-projection continual
training.
"""

__version__ = "0.1.0"
