"""Adversarial removal of protected-variable dependence from learned features."""

__version__ = "0.1.0"
