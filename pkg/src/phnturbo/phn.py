"""Oscillator phase-noise model.

Phase noise is a stationary first-order autoregressive Gaussian process with
autocorrelation ``sigma_theta**2 * p**|k|`` where
``p = exp(-2*pi*omega_3db*t_sample)``. All angles are radians.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import toeplitz
from scipy.stats import norm


class PhnParameterError(ValueError):
    pass


@dataclass(frozen=True)
class PhnParams:
    sigma_theta: float
    omega_3db: float
    t_sample: float

    def __post_init__(self):
        if not self.sigma_theta >= 0:
            raise PhnParameterError(f"sigma_theta must be >= 0, got {self.sigma_theta}")
        if not self.omega_3db > 0:
            raise PhnParameterError(f"omega_3db must be > 0, got {self.omega_3db}")
        if not self.t_sample > 0:
            raise PhnParameterError(f"t_sample must be > 0, got {self.t_sample}")
        p = self.correlation
        if not 0.0 < p < 1.0:
            raise PhnParameterError(f"correlation {p} outside (0, 1)")

    @property
    def correlation(self) -> float:
        """Lag-one correlation coefficient ``p``."""
        return float(np.exp(-2.0 * np.pi * self.omega_3db * self.t_sample))

    @classmethod
    def from_degrees(cls, sigma_deg: float, omega_3db: float = 100e3, t_sample: float = 50e-9):
        return cls(np.deg2rad(sigma_deg), omega_3db, t_sample)


#: Oscillator used throughout the simulations: 3 degrees RMS, 100 kHz, 20 MHz sampling.
DEFAULT_PHN = PhnParams.from_degrees(3.0, 100e3, 50e-9)


def _check_n(n):
    if int(n) != n or n < 1:
        raise PhnParameterError(f"sequence length must be a positive integer, got {n}")
    return int(n)


def phn_covariance(params: PhnParams, n: int) -> np.ndarray:
    """Toeplitz covariance ``sigma**2 * p**|i-j|`` of a length-``n`` sequence."""
    n = _check_n(n)
    col = params.sigma_theta ** 2 * params.correlation ** np.arange(n)
    return toeplitz(col)


def sample_phn(params: PhnParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one stationary AR(1) phase sequence.

    theta[0] ~ N(0, s^2); theta[k] = p*theta[k-1] + w[k], w ~ N(0, s^2 (1 - p^2)).
    Consumes exactly ``n`` standard normals from ``rng``.
    """
    n = _check_n(n)
    p = params.correlation
    z = rng.standard_normal(n)
    if params.sigma_theta == 0.0:
        return np.zeros(n)
    w = z * params.sigma_theta
    w[1:] *= np.sqrt(1.0 - p * p)
    theta = np.empty(n)
    acc = w[0]
    theta[0] = acc
    for k in range(1, n):
        acc = p * acc + w[k]
        theta[k] = acc
    return theta


def sample_phn_batch(params: PhnParams, n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` independent sequences as rows of a ``(size, n)`` array."""
    n = _check_n(n)
    p = params.correlation
    w = rng.standard_normal((size, n)) * params.sigma_theta
    w[:, 1:] *= np.sqrt(1.0 - p * p)
    theta = np.empty_like(w)
    theta[:, 0] = w[:, 0]
    for k in range(1, n):
        theta[:, k] = p * theta[:, k - 1] + w[:, k]
    return theta


def cpe_variance(params: PhnParams, n: int) -> float:
    """Variance of the sample mean of ``n`` consecutive phase samples, 1'Phi1/n^2."""
    n = _check_n(n)
    p = params.correlation
    lags = np.arange(1, n)
    # sum of a Toeplitz matrix: n on the diagonal plus 2*(n-k) copies of lag k
    total = n + 2.0 * np.sum((n - lags) * p ** lags)
    return float(params.sigma_theta ** 2 * total / n ** 2)


def cpe_tail_probability(params: PhnParams, n: int, angle: float, two_sided: bool = False) -> float:
    """P(mean phase > angle), or P(|mean phase| > angle) when ``two_sided``."""
    if angle < 0:
        raise PhnParameterError("angle must be non-negative")
    var = cpe_variance(params, n)
    if var == 0.0:
        tail = 0.5 if angle == 0 else 0.0
    else:
        tail = float(norm.sf(angle / np.sqrt(var)))
    return 2.0 * tail if two_sided else tail
