"""Simulation-based inference with test-time adaptation for agent-based models."""

__version__ = "0.1.0"
