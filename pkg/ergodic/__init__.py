"""Relative value iteration for ergodic control of controlled diffusions."""

__version__ = "0.1.0"
