"""Conditional diffusion forecasting of relation-structured stock panels."""

__version__ = "0.1.0"
