import numpy as np
import pytest

from phnturbo import qam
from phnturbo.channel import (ChannelProfile, ChannelRealization, apply_impairments, complex_noise, dft, dft_matrix,
                              ici_receive, ici_spectrum, idft, sample_channel, snr_to_noise_var)
from phnturbo.phn import DEFAULT_PHN, sample_phn


def test_dft_impulse_and_parseval(rng):
    e0 = np.zeros(16)
    e0[0] = 1
    np.testing.assert_allclose(dft(e0), np.full(16, 0.25))
    x = rng.standard_normal(64) + 1j * rng.standard_normal(64)
    assert np.linalg.norm(dft(x)) == pytest.approx(np.linalg.norm(x), rel=1e-12)
    np.testing.assert_allclose(idft(dft(x)), x, atol=1e-12)


def test_dft_matches_direct_sum(rng):
    n = 64
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    direct = np.array([sum(x[m] * np.exp(-2j * np.pi * k * m / n) for m in range(n)) for k in range(n)])
    np.testing.assert_allclose(dft(x), direct / np.sqrt(n), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(dft_matrix(n) @ x, dft(x), atol=1e-12)


def test_profile_validation():
    with pytest.raises(ValueError):
        ChannelProfile(0, 3.0, 64)
    with pytest.raises(ValueError):
        ChannelProfile(4, -1.0, 64)
    assert ChannelProfile(10, 3.0).tap_powers.sum() == pytest.approx(1.0)


def test_single_tap_is_flat(rng):
    ch = sample_channel(ChannelProfile(1, 3.0, 32), rng)
    np.testing.assert_allclose(np.abs(ch.h), np.abs(ch.h[0]))


def test_unit_average_power():
    rng = np.random.default_rng(1)
    prof = ChannelProfile(10, 3.0, 64)
    h = np.array([sample_channel(prof, rng).h for _ in range(100_000)])
    np.testing.assert_allclose(np.mean(np.abs(h) ** 2, axis=0), 1.0, rtol=0.02)


def test_frequency_correlation_matches_delay_profile():
    rng = np.random.default_rng(2)
    prof = ChannelProfile(10, 3.0, 64)
    draws = 40_000
    h = np.array([sample_channel(prof, rng).h for _ in range(draws)])
    lags = np.arange(8)
    emp = np.array([np.mean(h[:, lag] * h[:, 0].conj()) for lag in lags])
    q = prof.tap_powers
    expect = np.array([np.sum(q * np.exp(-2j * np.pi * lag * np.arange(10) / 64)) for lag in lags])
    se = np.sqrt(1.0 / draws)
    assert np.all(np.abs(emp - expect) <= 3.5 * se * np.sqrt(2))


def _instance(rng, n=64, m=64):
    bits = rng.choice([-1.0, 1.0], (n, qam.order_to_bits(m)))
    d = qam.map_bits(bits)
    ch = sample_channel(ChannelProfile(min(10, n), 3.0, n), rng)
    return d, ch


def test_clean_roundtrip(rng):
    d, ch = _instance(rng)
    r = apply_impairments(d, ch, np.zeros(64), 0.0)
    np.testing.assert_allclose(dft(r), ch.h * d, atol=1e-10)


def test_constant_phase_is_pure_rotation(rng):
    d, ch = _instance(rng)
    phi = 0.3
    r = apply_impairments(d, ch, np.full(64, phi), 0.0)
    np.testing.assert_allclose(dft(r), np.exp(1j * phi) * ch.h * d, atol=1e-10)


def test_matches_dense_matrix_model(rng):
    d, ch = _instance(rng, n=32, m=16)
    theta = sample_phn(DEFAULT_PHN, 32, rng)
    noise_rng = np.random.default_rng(9)
    r = apply_impairments(d, ch, theta, 0.01, noise_rng)
    f = dft_matrix(32)
    noise = complex_noise(32, 0.01, np.random.default_rng(9))
    dense = np.diag(np.exp(1j * theta)) @ f.conj().T @ np.diag(ch.h) @ d + noise
    np.testing.assert_allclose(r, dense, rtol=1e-10, atol=1e-12)


def test_noise_requires_rng(rng):
    d, ch = _instance(rng, n=8, m=4)
    with pytest.raises(ValueError):
        apply_impairments(d, ch, np.zeros(8), 0.1)
    with pytest.raises(ValueError):
        apply_impairments(d, ch, np.zeros(7), 0.0)


def test_ici_kernel_without_phase_noise():
    c = ici_spectrum(np.zeros(16))
    np.testing.assert_allclose(c, np.eye(16)[0], atol=1e-15)


def test_ici_reconstruction(rng):
    d, ch = _instance(rng)
    theta = sample_phn(DEFAULT_PHN, 64, rng) * 5
    c = ici_spectrum(theta)
    r = apply_impairments(d, ch, theta, 0.0)
    np.testing.assert_allclose(ici_receive(d, ch.h, c), dft(r), rtol=1e-10, atol=1e-10)


def test_common_phase_term_taylor_bound():
    rng = np.random.default_rng(3)
    for _ in range(200):
        theta = sample_phn(DEFAULT_PHN, 64, rng)
        c0 = ici_spectrum(theta)[0]
        # remainder of 1 + j*mean(theta) is bounded by mean(theta^2)/2 <= ||theta||^2 / (2N)
        assert abs(c0 - (1 + 1j * theta.mean())) <= np.sum(theta ** 2) / (2 * 64) + 1e-15


def test_noise_scale():
    z = complex_noise(200_000, 0.3, np.random.default_rng(4))
    assert np.var(z.real) == pytest.approx(0.3, rel=0.02)
    assert np.mean(np.abs(z) ** 2) == pytest.approx(0.6, rel=0.02)


def test_snr_definition():
    s2 = snr_to_noise_var(20.0, 64)
    assert qam.mean_energy(64) / (2 * s2) == pytest.approx(100.0)


def test_flat_realization():
    ch = ChannelRealization.flat(8, 2.0)
    np.testing.assert_allclose(ch.h, 2.0)
