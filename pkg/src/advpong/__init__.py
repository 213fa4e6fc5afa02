"""Adversarial-attack laboratory for a pixel-based mini-Pong actor-critic agent."""

__version__ = "0.1.0"
