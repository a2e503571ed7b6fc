"""Random walks in time-random environments: harmonic functions, conditioned walks and limit checks."""

__version__ = "0.1.0"
