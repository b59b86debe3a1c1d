"""Gray-labelled square M-QAM on integer levels, driven by real bit means.

A row of ``L = log2(M)`` bits is split into a real half ``b_r1..b_rK`` and an
imaginary half ``b_i1..b_iK`` (``K = L/2``). Each axis amplitude is

    a = sum_{l=1..K} 2**(l-1) * prod_{p=l..K} b_p

which for hard bits in {-1, +1} walks the levels -(sqrt(M)-1)..(sqrt(M)-1)
in Gray order. Every term is multilinear in the bits, so feeding posterior
bit *means* gives the posterior mean symbol under independent bits.

LLR convention: positive LLR favours bit +1, ``mean = tanh(llr / 2)``.
"""
import itertools

import numpy as np
from scipy.special import logsumexp

CLAMP_EPS = 1e-12


class ConstellationError(ValueError):
    pass


def bits_per_axis(num_bits: int) -> int:
    if num_bits < 2 or num_bits % 2:
        raise ConstellationError(f"need an even number of bits per symbol, got {num_bits}")
    return num_bits // 2


def order_to_bits(m: int) -> int:
    L = int(round(np.log2(m)))
    if 2 ** L != m or L % 2:
        raise ConstellationError(f"M={m} is not a square power of two")
    return L


def mean_energy(m: int) -> float:
    """Average symbol energy of the integer-level square constellation, 2(M-1)/3."""
    order_to_bits(m)
    return 2.0 * (m - 1) / 3.0


def _as_bits(b):
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[None, :]
    bits_per_axis(b.shape[1])
    return b


# --- single-axis primitives on an (N, K) block -------------------------------

def axis_amplitude(bh: np.ndarray) -> np.ndarray:
    """Real amplitude of one axis from its ``(N, K)`` bit-mean block."""
    K = bh.shape[1]
    # tail[:, l] = prod_{p>=l} b_p
    tail = np.cumprod(bh[:, ::-1], axis=1)[:, ::-1]
    return tail @ (2.0 ** np.arange(K))


def axis_second_moment(bh: np.ndarray) -> np.ndarray:
    """E[a^2] under independent bits with means ``bh``."""
    N, K = bh.shape
    nu = np.full(N, float(np.sum(4.0 ** np.arange(K))))
    for i in range(1, K):
        prod = np.ones(N)
        for j in range(i, K):
            prod = prod * bh[:, j - 1]
            nu += 2.0 ** (i + j) * prod
    return nu


def axis_derivatives(bh: np.ndarray):
    """Partials of the amplitude and second moment w.r.t. each bit.

    Returns ``(alpha, delta)``, both ``(N, K)``: ``alpha[:, k-1]`` is
    d a / d b_k and ``delta[:, k-1]`` is d E[a^2] / d b_k. Both are
    independent of ``b_k`` itself.
    """
    N, K = bh.shape
    alpha = np.zeros((N, K))
    delta = np.zeros((N, K))
    for k in range(1, K + 1):
        for l in range(1, k + 1):
            prod = np.ones(N)
            for p in range(l, K + 1):
                if p != k:
                    prod = prod * bh[:, p - 1]
            alpha[:, k - 1] += 2.0 ** (l - 1) * prod
        for i in range(1, k + 1):
            for j in range(k, K):
                prod = np.ones(N)
                for p in range(i, j + 1):
                    if p != k:
                        prod = prod * bh[:, p - 1]
                delta[:, k - 1] += 2.0 ** (i + j) * prod
    return alpha, delta


def axis_row(bits):
    """Scalar version for one row: ``(amplitude, alpha, delta)`` as Python floats/lists.

    Used inside per-element coordinate updates where numpy call overhead dominates.
    """
    K = len(bits)
    amp = 0.0
    alpha = [0.0] * K
    delta = [0.0] * K
    for l in range(K):
        prod = 1.0
        for p in range(l, K):
            prod *= bits[p]
        amp += 2.0 ** l * prod
    for k in range(K):
        acc = 0.0
        for l in range(k + 1):
            prod = 1.0
            for p in range(l, K):
                if p != k:
                    prod *= bits[p]
            acc += 2.0 ** l * prod
        alpha[k] = acc
        acc = 0.0
        for i in range(k + 1):
            for j in range(k, K - 1):
                prod = 1.0
                for p in range(i, j + 1):
                    if p != k:
                        prod *= bits[p]
                acc += 2.0 ** (i + j + 2) * prod
        delta[k] = acc
    return amp, alpha, delta


# --- full-symbol API ----------------------------------------------------------

def map_bits(b) -> np.ndarray:
    """Map an ``(N, L)`` matrix of bits or bit means to ``N`` complex symbols."""
    b = _as_bits(b)
    K = b.shape[1] // 2
    return axis_amplitude(b[:, :K]) + 1j * axis_amplitude(b[:, K:])


def map_real(b) -> np.ndarray:
    b = _as_bits(b)
    return axis_amplitude(b[:, : b.shape[1] // 2])


def map_imag(b) -> np.ndarray:
    """Imaginary-axis contribution, returned as a complex (purely imaginary) vector."""
    b = _as_bits(b)
    return 1j * axis_amplitude(b[:, b.shape[1] // 2:])


def symbol_moments(b):
    """Posterior second moments ``(nu_r, nu_i)`` of the real and imaginary parts."""
    b = _as_bits(b)
    K = b.shape[1] // 2
    return axis_second_moment(b[:, :K]), axis_second_moment(b[:, K:])


def map_derivatives(b, k: int, axis: str = "real"):
    """Derivative vectors for bit column ``k`` (1-based) of one axis.

    ``axis='real'`` gives ``(alpha_k, delta_k)``: d Re f / d b_rk and
    d nu_r / d b_rk. ``axis='imag'`` gives ``(beta_k, omega_k)`` where
    ``beta_k`` carries the factor ``1j``.
    """
    b = _as_bits(b)
    K = b.shape[1] // 2
    if not 1 <= k <= K:
        raise IndexError(f"bit column {k} outside 1..{K}")
    if axis == "real":
        alpha, delta = axis_derivatives(b[:, :K])
        return alpha[:, k - 1], delta[:, k - 1]
    if axis == "imag":
        beta, omega = axis_derivatives(b[:, K:])
        return 1j * beta[:, k - 1], omega[:, k - 1]
    raise ValueError(f"axis must be 'real' or 'imag', got {axis!r}")


def all_bit_rows(num_bits: int) -> np.ndarray:
    """Every hard-bit row, shape ``(2**num_bits, num_bits)``, entries +-1."""
    return np.array(list(itertools.product((1.0, -1.0), repeat=num_bits)))


def constellation(m: int):
    """``(points, labels)`` for all ``M`` hard-bit rows."""
    labels = all_bit_rows(order_to_bits(m))
    return map_bits(labels), labels


# --- LLR helpers --------------------------------------------------------------

def llr_to_mean(llr):
    return np.tanh(np.asarray(llr, dtype=float) / 2.0)


def mean_to_llr(mean, eps: float = CLAMP_EPS):
    m = np.clip(np.asarray(mean, dtype=float), -1.0 + eps, 1.0 - eps)
    return 2.0 * np.arctanh(m)


def hard_decision(llr):
    """+1 where the LLR is non-negative, else -1."""
    return np.where(np.asarray(llr) >= 0, 1.0, -1.0)


def demap_soft(y, gain, noise_var: float, prior_llr=None, num_bits: int | None = None):
    """Exact per-subcarrier extrinsic LLRs, ignoring phase noise.

    Model: ``y_n = gain_n * d_n + CN(0, 2 * noise_var)``. Bit priors enter as
    LLRs; the returned array is posterior minus prior, shape ``(N, L)``.
    Subcarriers with zero gain get zero extrinsic information.
    """
    y = np.asarray(y, dtype=complex).ravel()
    gain = np.broadcast_to(np.asarray(gain, dtype=complex), y.shape)
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    if prior_llr is None:
        if num_bits is None:
            raise ValueError("need prior_llr or num_bits")
        prior_llr = np.zeros((y.size, num_bits))
    prior_llr = np.asarray(prior_llr, dtype=float)
    L = prior_llr.shape[1]
    labels = all_bit_rows(L)
    points = map_bits(labels)

    metric = -np.abs(y[:, None] - gain[:, None] * points[None, :]) ** 2 / (2.0 * noise_var)
    metric += 0.5 * prior_llr @ labels.T
    pos = labels > 0
    post = np.empty((y.size, L))
    for l in range(L):
        post[:, l] = logsumexp(metric[:, pos[:, l]], axis=1) - logsumexp(metric[:, ~pos[:, l]], axis=1)
    ext = post - prior_llr
    ext[gain == 0] = 0.0
    return ext
