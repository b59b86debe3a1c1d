"""OFDM forward model after cyclic-prefix removal.

``r = diag(exp(j*theta)) F^H diag(h) d + n`` with the unitary DFT ``F`` and
``n ~ CN(0, 2*noise_var*I)`` (``noise_var`` per real dimension).
"""
from dataclasses import dataclass

import numpy as np


def dft(x, axis=-1):
    return np.fft.fft(x, axis=axis, norm="ortho")


def idft(x, axis=-1):
    return np.fft.ifft(x, axis=axis, norm="ortho")


def dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


@dataclass(frozen=True)
class ChannelProfile:
    num_taps: int = 10
    decay: float = 3.0
    n_subcarriers: int = 64

    def __post_init__(self):
        if not 1 <= self.num_taps <= self.n_subcarriers:
            raise ValueError("need 1 <= num_taps <= n_subcarriers")
        if self.decay <= 0:
            raise ValueError("decay must be positive")

    @property
    def tap_powers(self) -> np.ndarray:
        q = np.exp(-np.arange(self.num_taps) / self.decay)
        return q / q.sum()


@dataclass(frozen=True)
class ChannelRealization:
    h: np.ndarray
    taps: np.ndarray

    @classmethod
    def from_taps(cls, taps, n: int):
        padded = np.zeros(n, dtype=complex)
        padded[: len(taps)] = taps
        return cls(h=np.fft.fft(padded), taps=np.asarray(taps, dtype=complex))

    @classmethod
    def flat(cls, n: int, gain: complex = 1.0):
        return cls.from_taps(np.array([gain], dtype=complex), n)

    @property
    def n(self) -> int:
        return self.h.size


def sample_channel(profile: ChannelProfile, rng: np.random.Generator) -> ChannelRealization:
    q = profile.tap_powers
    g = rng.standard_normal((2, profile.num_taps))
    taps = np.sqrt(q / 2.0) * (g[0] + 1j * g[1])
    return ChannelRealization.from_taps(taps, profile.n_subcarriers)


def complex_noise(shape, noise_var: float, rng: np.random.Generator) -> np.ndarray:
    """CN(0, 2*noise_var) samples."""
    g = rng.standard_normal((2,) + tuple(np.atleast_1d(shape)))
    return np.sqrt(noise_var) * (g[0] + 1j * g[1])


def apply_impairments(d, ch: ChannelRealization, theta, noise_var: float,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Time-domain received vector with exact phase rotation and AWGN."""
    d = np.asarray(d, dtype=complex)
    theta = np.asarray(theta, dtype=float)
    if not (d.shape == ch.h.shape == theta.shape):
        raise ValueError(f"length mismatch: d {d.shape}, h {ch.h.shape}, theta {theta.shape}")
    r = np.exp(1j * theta) * idft(ch.h * d)
    if noise_var > 0:
        if rng is None:
            raise ValueError("rng required when noise_var > 0")
        r = r + complex_noise(d.shape, noise_var, rng)
    return r


def ici_spectrum(theta) -> np.ndarray:
    """Frequency-domain phase-noise kernel ``c = F exp(j*theta) / sqrt(N)``; c[0] is the CPE."""
    theta = np.asarray(theta, dtype=float)
    return dft(np.exp(1j * theta)) / np.sqrt(theta.size)


def ici_receive(d, h, c) -> np.ndarray:
    """Noise-free DFT output ``R_k = sum_l d_l h_l c_{(k-l) mod N}``.

    The kernel index runs ``k - l`` for the DFT sign convention used here.
    """
    x = np.asarray(d) * np.asarray(h)
    n = x.size
    k = np.arange(n)
    return (c[(k[:, None] - k[None, :]) % n] * x[None, :]).sum(axis=1)


def snr_to_noise_var(snr_db: float, m: int) -> float:
    """Per-dimension noise variance for Es/N0 = E|d|^2 / (2 noise_var), unit-power channel."""
    from .qam import mean_energy
    return mean_energy(m) / (2.0 * 10.0 ** (snr_db / 10.0))
