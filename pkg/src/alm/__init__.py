"""Approximate latent model RL: joint encoder/model/policy objective, plus exact tabular checks."""

__version__ = "0.1.0"
