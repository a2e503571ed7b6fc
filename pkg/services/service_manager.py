"""
Service manager for the worker pool.
This provides a centralized way to run chunked sampling work throughout the
application.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, List, Optional, Sequence, Tuple

from config import get_config

logger = logging.getLogger(__name__)


class ServiceManager:
    """Owns the process pool used for parallel sampling."""

    _instance: Optional['ServiceManager'] = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance._executor = None
            cls._instance._workers = 1
            cls._instance._chunk_size = 4096
            cls._instance._initialized = False
        return cls._instance

    def initialize(self, workers: Optional[int] = None, chunk_size: Optional[int] = None):
        """Initialize (or resize) the pool."""
        config = get_config()
        workers = workers or config.simulation.workers
        chunk_size = chunk_size or config.simulation.chunk_size
        if self._initialized and workers == self._workers and chunk_size == self._chunk_size:
            return
        self.shutdown()
        self._workers = workers
        self._chunk_size = chunk_size
        if workers > 1:
            self._executor = ProcessPoolExecutor(max_workers=workers)
        self._initialized = True
        logger.info(f"Worker pool ready: workers={workers} chunk_size={chunk_size}")

    def _ensure_initialized(self):
        if not self._initialized:
            self.initialize()

    @property
    def workers(self) -> int:
        self._ensure_initialized()
        return self._workers

    @property
    def chunk_size(self) -> int:
        self._ensure_initialized()
        return self._chunk_size

    def map_chunks(self, fn: Callable[..., Any], tasks: Sequence[Tuple]) -> List[Any]:
        """
        Apply fn to every task tuple; results come back in task order.

        fn and its arguments must be picklable when more than one worker is
        configured.
        """
        self._ensure_initialized()
        if self._executor is None or len(tasks) <= 1:
            return [fn(*task) for task in tasks]
        logger.debug(f"Dispatching {len(tasks)} chunks to {self._workers} workers")
        return list(self._executor.map(fn, *zip(*tasks)))

    def shutdown(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
        self._executor = None
        self._initialized = False

    def reset_for_tests(self, workers: int = 1, chunk_size: Optional[int] = None):
        """Reset the service manager for testing with a specific pool size."""
        self.shutdown()
        self.initialize(workers=workers, chunk_size=chunk_size)


# Global service manager instance
service_manager = ServiceManager()
