"""Distilled Replay: continual learning with a distilled one-pattern-per-class replay buffer."""

__version__ = "0.1.0"
