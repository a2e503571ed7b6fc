"""Computational modules: environment, walk, harmonic, conditioned, limits."""
