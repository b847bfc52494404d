"""Transferable pedestrian motion prediction with semantic-context inverse reinforcement learning."""

__version__ = "0.1.0"
