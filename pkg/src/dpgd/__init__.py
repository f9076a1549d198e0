"""Adversarial attacks on trained image denoisers, at desk scale."""

__version__ = "0.1.0"
