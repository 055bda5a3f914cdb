"""Concept-guided diffusion sampling and surrogate-set evaluation on a
synthetic shapes benchmark, trained from scratch on CPU."""

__version__ = "0.1.0"
