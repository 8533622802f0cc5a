"""Exact feature-pair attributions for Siamese encoders via integrated Jacobians."""

__version__ = "0.1.0"
