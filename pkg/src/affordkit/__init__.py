"""Affordance transfer and affordance-guided diffusion policies, exercised in
a synthetic kinematic manipulation environment."""

__version__ = "0.1.0"
