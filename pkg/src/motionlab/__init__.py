"""Desk-scale pipeline coupling a diffusion motion planner, a physics
tracking policy, online policy adaptation, and signal-space plan guidance."""

__version__ = "0.1.0"
