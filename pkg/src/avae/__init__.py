"""Adversarial attacks on variational autoencoders, scored by AUDDC."""

__version__ = "0.1.0"
