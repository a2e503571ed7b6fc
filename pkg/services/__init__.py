"""
Services package: random streams, the worker pool, serialization and run artifacts.
"""

from .rng import RandomStream, plan_chunks, stream_generator
from .service_manager import service_manager

__all__ = ['RandomStream', 'plan_chunks', 'stream_generator', 'service_manager']
