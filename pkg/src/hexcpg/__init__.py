"""CPG-modulated reinforcement learning for hexapod locomotion on rough terrain."""

__version__ = "0.1.0"
