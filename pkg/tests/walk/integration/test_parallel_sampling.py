"""
Worker-count invariance of the chunked samplers.
These tests start a process pool.
"""
import numpy as np
import pytest

from rwre_toolkit.tools.walk import first_passage_batch, sample_paths
from services.rng import RandomStream
from services.service_manager import service_manager

CHUNK = 64


@pytest.mark.integration
class TestWorkerInvariance:
    """Same seeds, different worker counts, identical samples."""

    def test_sample_paths(self, mixed_env):
        """
        Test free paths with one and three workers.
        Expected result: identical position arrays.
        Mock values: mixed environment, y = 1, horizon 25, 300 paths, chunks of 64.
        Why: Randomness is keyed by chunk index, not by worker.
        """
        stream = RandomStream.named(99, "parallel-paths")
        service_manager.reset_for_tests(workers=1, chunk_size=CHUNK)
        serial = sample_paths(mixed_env, 1.0, 25, 300, stream)
        service_manager.reset_for_tests(workers=3, chunk_size=CHUNK)
        parallel = sample_paths(mixed_env, 1.0, 25, 300, stream)

        assert np.array_equal(serial.positions, parallel.positions)

    def test_first_passage(self, markov_env):
        """
        Test first-passage samples with one and two workers.
        Expected result: identical tau and terminal arrays.
        Mock values: Markov environment, y = 2, n_max 500, 400 samples, chunks of 64.
        Why: Monte Carlo estimates must not depend on the pool size.
        """
        stream = RandomStream.named(5, "parallel-first-passage")
        service_manager.reset_for_tests(workers=1, chunk_size=CHUNK)
        tau_a, terminal_a = first_passage_batch(markov_env, 2.0, 500, 400, stream)
        service_manager.reset_for_tests(workers=2, chunk_size=CHUNK)
        tau_b, terminal_b = first_passage_batch(markov_env, 2.0, 500, 400, stream)

        assert np.array_equal(tau_a, tau_b)
        assert np.array_equal(terminal_a, terminal_b)
