"""Prompt-informed reinforcement learning for UAV visual coverage path planning."""

__version__ = "0.1.0"
