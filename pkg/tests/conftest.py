"""Shared fixtures.

The full Monte Carlo check of the closed-form transition density costs about
a minute, so it runs once per session and is shared between the oracle unit
tests and the acceptance gate.
"""

import time

import pytest

from sdepath import oracle


@pytest.fixture(scope="session")
def benes_validation_report():
    """(report, elapsed_seconds) from the full sampled-transition check."""
    t0 = time.perf_counter()
    report = oracle.validate_benes_transition()
    elapsed = time.perf_counter() - t0
    return report, elapsed
