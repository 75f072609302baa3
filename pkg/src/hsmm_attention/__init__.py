"""HSMM-structured attention for sequence-to-sequence frame generation.

An encoder predicts per-unit HSMM emission and duration parameters, the
forward-backward occupancies serve as attention weights, and the whole model
is trained on an evidence lower bound.
"""
from .datagen import GenSpec, Utterance, generate_corpus
from .elbo import compute_elbo
from .hsmm import HsmmParams, InfeasibleError, StateSequence, enumerate_posterior, forward_backward
from .networks import ModelBundle, NetworkConfig
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "GenSpec", "Utterance", "generate_corpus", "compute_elbo", "HsmmParams", "InfeasibleError",
    "StateSequence", "enumerate_posterior", "forward_backward", "ModelBundle", "NetworkConfig",
    "TrainConfig", "train", "__version__",
]
