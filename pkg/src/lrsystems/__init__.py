"""Nonholonomic LR systems on SO(n), their Chaplygin reductions, and the
correspondences with the Neumann system and geodesic flows."""

__version__ = "0.1.0"
