"""Continual representation learning: supervised and self-supervised encoders
trained on task streams, with k-NN/NMC/CKA/spectrum evaluation."""

__version__ = "0.1.0"

from .estimator import ContinualEncoder  # noqa: E402
