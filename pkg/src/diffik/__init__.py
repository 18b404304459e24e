"""Generative inverse kinematics: diffusion sampling plus iterative refinement."""

__version__ = "0.1.0"
