import contextlib
from unittest import mock

import numpy as np
import pytest

from qsparse import tensor as T


def central_difference(f, x: np.ndarray, index, step: float = 1e-5) -> float:
    """d f / d x[index] by central differences; restores x afterwards."""
    orig = x[index]
    x[index] = orig + step
    up = f()
    x[index] = orig - step
    down = f()
    x[index] = orig
    return (up - down) / (2 * step)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@contextlib.contextmanager
def extended_precision():
    """Build tensors as long doubles, for finite differences below float64 noise."""
    with mock.patch.object(T, "DTYPE", np.longdouble):
        yield
