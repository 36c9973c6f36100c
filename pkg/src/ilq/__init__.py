"""Low-bit imitation and reinforcement learning for small control policies."""

__version__ = "0.1.0"
