"""Task-oriented dialogue with a small trainable backbone, an emotional user
simulator, and hierarchical reinforcement learning."""

__version__ = "0.1.0"
