"""Shared test fixtures."""
import pytest

from servobot import kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the jit kernels once so timed tests measure steady state."""
    return kernels.warmup()
