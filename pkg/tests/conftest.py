"""Shared helpers for building randomized test instances."""

import numpy as np
import pytest

from mslds.linalg import symmetrize
from mslds.model import StateDynamics, StateGaussian, shift_from_mean


def random_spd(rng: np.random.Generator, d: int, scale: float = 1.0) -> np.ndarray:
    """Random well-conditioned symmetric positive definite matrix."""
    m = rng.standard_normal((d, d))
    return scale * symmetrize(m @ m.T / d + np.eye(d))


def random_contraction(rng: np.random.Generator, d: int, norm: float) -> np.ndarray:
    """Random matrix rescaled to a prescribed spectral norm."""
    m = rng.standard_normal((d, d))
    return m * (norm / np.linalg.norm(m, 2))


def lyapunov_fixed_point(a: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Solve sigma = q + a sigma a^T exactly via the Kronecker linear system."""
    d = a.shape[0]
    vec = np.linalg.solve(np.eye(d * d) - np.kron(a, a), q.reshape(-1))
    return symmetrize(vec.reshape(d, d))


def stable_instance(
    rng: np.random.Generator,
    d: int,
    a_norm: float = 0.8,
    margin: float = 0.2,
) -> tuple[StateDynamics, StateGaussian]:
    """Dynamics/envelope pair that satisfies the stability conditions.

    sigma is the Lyapunov fixed point of (a, q) inflated by `margin`, so
    sigma - q - a sigma a^T = margin * q is positive definite by construction.
    """
    a = random_contraction(rng, d, a_norm)
    q = random_spd(rng, d, scale=0.5)
    sigma = (1.0 + margin) * lyapunov_fixed_point(a, q)
    mu = 2.0 * rng.standard_normal(d)
    b = shift_from_mean(a, mu)
    return StateDynamics(a, b, q), StateGaussian(mu, sigma)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20260823)
