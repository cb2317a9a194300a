"""Federated continual learning for vision-based obstacle avoidance, at desk scale."""

__version__ = "0.1.0"
