"""Masked discrete diffusion world model and policy-evaluation harness on a toy tabletop."""

__version__ = "0.1.0"
