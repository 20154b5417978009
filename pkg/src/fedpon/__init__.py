"""Federated PPO with per-agent observation normalization."""

__version__ = "0.1.0"
