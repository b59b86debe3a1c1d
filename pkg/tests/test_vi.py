import numpy as np
import pytest
from scipy.stats import chi2

from phnturbo import qam
from phnturbo.channel import ChannelProfile, ChannelRealization, apply_impairments, dft, sample_channel, snr_to_noise_var
from phnturbo.phn import DEFAULT_PHN, PhnParams, phn_covariance
from phnturbo.vi import (_central_diff, DetectorConfig, NumericalDomainError, Observation, PhnPosterior, PosteriorState,
                         assemble_workspace, bit_gradient, default_f2_threshold, detect, exact_posterior_oracle,
                         f2_term, free_energy, gradient_check, phn_gradients, quadrature_oracle, random_instance,
                         signal_power, trace_to_csv, update_bit_means, update_m_theta, update_s_theta)


def _obs(rng, n, m, snr_db, theta=None, taps=4, bits=None):
    L = qam.order_to_bits(m)
    bits = rng.choice([-1.0, 1.0], (n, L)) if bits is None else bits
    ch = sample_channel(ChannelProfile(min(taps, n), 2.0, n), rng)
    theta = np.zeros(n) if theta is None else theta
    s2 = snr_to_noise_var(snr_db, m)
    return Observation(apply_impairments(qam.map_bits(bits), ch, theta, s2, rng), ch.h, s2), bits


# --- workspace -----------------------------------------------------------------

def test_workspace_without_phase_uncertainty(rng):
    obs, _ = _obs(rng, 8, 16, 15)
    state = PosteriorState(np.zeros(8), np.zeros((8, 8)), np.zeros((8, 4)))
    ws = assemble_workspace(state, obs)
    np.testing.assert_allclose(ws.z, obs.g)
    np.testing.assert_array_equal(ws.psi, 0)
    np.testing.assert_allclose(ws.m0, np.diag(np.abs(obs.h) ** 2), atol=1e-12)
    np.testing.assert_allclose(ws.m1, 0, atol=1e-12)


def test_workspace_split_and_psi(rng):
    obs, state, _, _ = random_instance(rng)
    ws = assemble_workspace(state, obs)
    np.testing.assert_array_equal(ws.m1 + ws.m2, ws.m0)
    g = obs.g
    n = obs.n
    psi = np.zeros((n, n), dtype=complex)
    for k in range(n):
        for l in range(n):
            psi[k, l] = sum(np.conj(g[i, k]) * state.s_theta[i, i] * g[i, l] for i in range(n))
    np.testing.assert_allclose(ws.psi, psi, rtol=1e-10, atol=1e-12)


# --- free energy -----------------------------------------------------------------

def _enumerated_free_energy(state, obs, prior_llr, phi):
    """E_Q[log Q] - E_Q[log p(B, theta, r)] by enumerating B and integrating theta in closed form."""
    n, L = state.t_bits.shape
    q_plus = (1 + np.tanh(state.t_bits)) / 2
    hyp = qam.all_bit_rows(n * L).reshape(-1, n, L)
    weights = np.prod(np.where(hyp > 0, q_plus, 1 - q_plus), axis=(1, 2))
    m, s = state.m_theta, state.s_theta
    s2 = obs.noise_var
    phi_inv = np.linalg.inv(phi)
    e_log_joint = 0.0
    for w, hb in zip(weights, hyp):
        sig = obs.g @ qam.map_bits(hb)
        resid = np.sum(np.abs(obs.r - sig * (1 + 1j * m)) ** 2) + np.sum(np.abs(sig) ** 2 * np.diag(s))
        log_lik = -n * np.log(2 * np.pi * s2) - resid / (2 * s2)
        log_bits = -np.sum(np.logaddexp(0, -hb * prior_llr))
        e_log_joint += w * (log_lik + log_bits)
    e_log_joint += -0.5 * (np.trace(phi_inv @ s) + m @ phi_inv @ m + n * np.log(2 * np.pi)
                           + np.linalg.slogdet(phi)[1])
    ent_q = np.sum(q_plus * np.log(q_plus) + (1 - q_plus) * np.log(1 - q_plus)) \
        - 0.5 * (n * (np.log(2 * np.pi) + 1) + np.linalg.slogdet(s)[1])
    return ent_q - e_log_joint


def test_free_energy_matches_enumeration_and_bounds_evidence():
    rng = np.random.default_rng(8)
    params = PhnParams.from_degrees(5.0)
    phi = phn_covariance(params, 2)
    cfg = DetectorConfig(phn_params=params)
    obs, _ = _obs(rng, 2, 4, 8, theta=np.deg2rad([4.0, 5.0]), taps=2)
    prior_llr = rng.normal(0, 1, (2, 2))
    ref = exact_posterior_oracle(obs, phi, prior_llr)
    gaps = []
    for _ in range(5):
        a = rng.standard_normal((2, 2)) * 0.03
        state = PosteriorState(rng.normal(0, 0.05, 2), a @ a.T + 1e-4 * np.eye(2), rng.normal(0, 1, (2, 2)))
        f = free_energy(state, obs, prior_llr, cfg).total
        assert f == pytest.approx(_enumerated_free_energy(state, obs, prior_llr, phi), rel=1e-10)
        gaps.append(f + ref.log_evidence)
    # F = KL(Q || posterior) - log p(r) >= -log p(r)
    assert min(gaps) > 0


def test_free_energy_bit_terms_cancel_at_uniform(rng):
    obs, _ = _obs(rng, 4, 4, 10)
    cfg = DetectorConfig(phn_params=DEFAULT_PHN)
    phi = phn_covariance(DEFAULT_PHN, 4)
    state = PosteriorState(np.zeros(4), phi.copy(), np.zeros((4, 2)))
    fe = free_energy(state, obs, np.zeros((4, 2)), cfg)
    assert fe.prior_bits == pytest.approx(8 * np.log(2))
    assert fe.entropy_bits == pytest.approx(-8 * np.log(2))
    # identical Gaussians: cross entropy minus entropy is zero
    assert fe.prior_phn + fe.entropy_phn == pytest.approx(0.0, abs=1e-9)


def test_saturated_bits_are_finite(rng):
    obs, state, prior_llr, cfg = random_instance(rng)
    state.t_bits[:] = 30.0
    fe = free_energy(state, obs, prior_llr * 100, cfg)
    assert np.isfinite(fe.total)


# --- closed-form updates ---------------------------------------------------------------

def test_s_update_with_hard_bits(rng):
    obs, bits = _obs(rng, 8, 16, 15)
    cfg = DetectorConfig(phn_params=DEFAULT_PHN)
    state = PosteriorState(np.zeros(8), np.eye(8), np.where(bits > 0, 30.0, -30.0))
    s = update_s_theta(state, obs, cfg)
    x = obs.g @ qam.map_bits(bits)
    ref = np.linalg.inv(np.linalg.inv(phn_covariance(DEFAULT_PHN, 8)) + np.diag(np.abs(x) ** 2) / obs.noise_var)
    np.testing.assert_allclose(s, ref, rtol=1e-8)
    np.testing.assert_allclose(signal_power(state.bit_means, obs.g), np.abs(x) ** 2, rtol=1e-9)


def test_s_update_prior_dominates_without_signal(rng):
    obs, _ = _obs(rng, 8, 16, 15)
    quiet = Observation(obs.r, obs.h, 1e12)
    cfg = DetectorConfig(phn_params=DEFAULT_PHN)
    state = PosteriorState(np.zeros(8), np.eye(8), rng.normal(0, 1, (8, 4)))
    np.testing.assert_allclose(update_s_theta(state, quiet, cfg), phn_covariance(DEFAULT_PHN, 8), rtol=1e-6)


def test_updates_are_stationary_points(rng):
    obs, state, prior_llr, cfg = random_instance(rng)
    state.s_theta = update_s_theta(state, obs, cfg)
    state.m_theta = update_m_theta(state, obs, cfg)
    grad_m, grad_p = phn_gradients(state, obs, cfg)
    assert np.max(np.abs(grad_m)) <= 1e-6
    assert np.max(np.abs(grad_p)) <= 1e-6
    # finite differences of F agree that both blocks are stationary
    from dataclasses import replace
    energy = lambda st: free_energy(st, obs, prior_llr, cfg).total
    fd_m = _central_diff(lambda m: energy(replace(state, m_theta=m)), state.m_theta, 1e-4)
    p0 = np.linalg.inv(state.s_theta)
    fd_p = _central_diff(lambda p: energy(replace(state, s_theta=np.linalg.inv(0.5 * (p + p.T)))), p0,
                         1e-5 * np.max(np.abs(p0)))
    assert np.max(np.abs(fd_m)) <= 1e-6
    assert np.max(np.abs(fd_p)) <= 1e-6


def test_m_update_without_phase_evidence(rng):
    n = 8
    ch = sample_channel(ChannelProfile(4, 2.0, n), rng)
    t = rng.normal(0, 1, (n, 4))
    d = qam.map_bits(np.tanh(t))
    obs = Observation(apply_impairments(d, ch, np.zeros(n), 0.0), ch.h, 0.1)
    cfg = DetectorConfig(phn_params=DEFAULT_PHN)
    state = PosteriorState(np.zeros(n), phn_covariance(DEFAULT_PHN, n), t)
    np.testing.assert_allclose(update_m_theta(state, obs, cfg), 0.0, atol=1e-12)


def test_m_update_recovers_common_rotation(rng):
    n = 16
    bits = rng.choice([-1.0, 1.0], (n, 4))
    ch = sample_channel(ChannelProfile(4, 2.0, n), rng)
    phi_rot = np.deg2rad(2.0)
    obs = Observation(apply_impairments(qam.map_bits(bits), ch, np.full(n, phi_rot), 0.0), ch.h,
                      snr_to_noise_var(40, 16))
    cfg = DetectorConfig(phn_params=DEFAULT_PHN)
    state = PosteriorState(np.zeros(n), np.zeros((n, n)), np.where(bits > 0, 30.0, -30.0))
    state.s_theta = update_s_theta(state, obs, cfg)
    m = update_m_theta(state, obs, cfg)
    np.testing.assert_allclose(m, phi_rot, rtol=0.1)


def test_bit_update_reproduces_demapper_without_phase_noise(rng):
    n = 8
    ch = ChannelRealization.flat(n, 0.8 - 0.3j)
    bits = rng.choice([-1.0, 1.0], (n, 2))
    s2 = 0.3
    obs = Observation(apply_impairments(qam.map_bits(bits), ch, np.zeros(n), s2, rng), ch.h, s2)
    cfg = DetectorConfig(phn_params=DEFAULT_PHN)
    prior_llr = rng.normal(0, 1, (n, 2))
    state = PosteriorState(np.zeros(n), np.zeros((n, n)), prior_llr / 2)
    update_bit_means(state, obs, prior_llr, 1, "real", cfg)
    update_bit_means(state, obs, prior_llr, 1, "imag", cfg)
    ext = 2 * state.t_bits - prior_llr
    np.testing.assert_allclose(ext, qam.demap_soft(dft(obs.r), obs.h, s2, prior_llr), atol=1e-8)


def test_bit_update_passes_prior_without_observation(rng):
    obs, state, prior_llr, cfg = random_instance(rng)
    quiet = Observation(obs.r, obs.h, 1e14)
    col = update_bit_means(state, quiet, prior_llr, 2, "imag", cfg)
    np.testing.assert_allclose(col, prior_llr[:, 3] / 2, atol=1e-6)


def test_sweeps_reach_a_bit_fixed_point():
    rng = np.random.default_rng(21)
    obs, _ = _obs(rng, 4, 16, 8, theta=np.deg2rad([2.0, 3.0, 1.0, 2.5]))
    prior = np.zeros((4, 4))
    cfg = DetectorConfig(num_iter=200, phn_params=DEFAULT_PHN, use_guard=False)
    res = detect(obs, prior, cfg)
    st = res.state
    assert np.max(np.abs(st.t_bits)) < 30
    ws = assemble_workspace(st, obs)
    st.s_theta = update_s_theta(st, obs, cfg)
    st.m_theta = update_m_theta(st, obs, cfg)
    ws = assemble_workspace(st, obs)
    assert np.max(np.abs(bit_gradient(st, obs, prior, ws))) <= 1e-5


# --- F2 guard ---------------------------------------------------------------------

def test_f2_at_prior_mean():
    cfg = DetectorConfig(phn_params=DEFAULT_PHN)
    n = 6
    phi = phn_covariance(DEFAULT_PHN, n)
    state = PosteriorState(np.zeros(n), np.zeros((n, n)), np.zeros((n, 2)))
    expect = 0.5 * np.log((2 * np.pi) ** n * np.linalg.det(phi))
    assert f2_term(state, cfg) == pytest.approx(expect, rel=1e-10)


def test_f2_quadratic_part_is_half_chi_square():
    n = 16
    cfg = DetectorConfig(phn_params=DEFAULT_PHN)
    phi = phn_covariance(DEFAULT_PHN, n)
    rng = np.random.default_rng(5)
    base = f2_term(PosteriorState(np.zeros(n), np.zeros((n, n)), np.zeros((n, 2))), cfg)
    prior = cfg.phn_prior(n)
    quad = np.array([f2_term(PosteriorState(m, np.zeros((n, n)), np.zeros((n, 2))), cfg, prior) - base
                     for m in rng.multivariate_normal(np.zeros(n), phi, 10_000)])
    se = np.sqrt(n / 2) / np.sqrt(len(quad))        # std of chi2_n / 2 is sqrt(2n)/2
    assert abs(quad.mean() - n / 2) <= 3 * se


def test_guard_threshold_and_trip():
    n = 64
    cfg = DetectorConfig(phn_params=DEFAULT_PHN)
    phi = phn_covariance(DEFAULT_PHN, n)
    thr = default_f2_threshold(cfg, n)
    base = 0.5 * (n * np.log(2 * np.pi) + np.linalg.slogdet(phi)[1])
    assert thr == pytest.approx(base + 0.5 * chi2.ppf(0.999, n) + 0.5 * n)
    m = np.random.default_rng(3).multivariate_normal(np.zeros(n), phi)
    s = phi * 0.05
    assert f2_term(PosteriorState(m, s, np.zeros((n, 2))), cfg) < thr
    assert f2_term(PosteriorState(10 * m, s, np.zeros((n, 2))), cfg) > thr


def test_guard_fallback_uses_demapper(rng):
    obs, _ = _obs(rng, 16, 16, 15)
    prior = rng.normal(0, 1, (16, 4))
    cfg = DetectorConfig(phn_params=DEFAULT_PHN, f2_threshold=-1e9)
    res = detect(obs, prior, cfg)
    assert res.fell_back
    np.testing.assert_allclose(res.extrinsic, qam.demap_soft(dft(obs.r), obs.h, obs.noise_var, prior))


# --- gradient checks -------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_check_passes(seed):
    obs, state, prior_llr, cfg = random_instance(np.random.default_rng(seed))
    rep = gradient_check(obs, state, prior_llr, cfg)
    assert rep.passed, str(rep)
    assert "PASS" in str(rep)


def test_gradient_check_quadratic_in_m():
    rng = np.random.default_rng(4)
    obs, state, prior_llr, cfg = random_instance(rng, n=4, m=4, snr_db=0.0)
    rep = gradient_check(obs, state, prior_llr, cfg, tolerance=1e-10, blocks=("m_theta",))
    assert rep.passed, str(rep)


def test_swapped_pairing_is_caught():
    obs, state, prior_llr, cfg = random_instance(np.random.default_rng(0))
    rep = gradient_check(obs, state, prior_llr, cfg, pairing="swapped", blocks=("bits",))
    assert not rep.passed


# --- detector behaviour -------------------------------------------------------------

def test_descent_within_sweeps():
    rng = np.random.default_rng(31)
    for _ in range(5):
        obs, _ = _obs(rng, 8, 16, 15, theta=rng.normal(0, np.deg2rad(3), 8))
        res = detect(obs, rng.normal(0, 1, (8, 4)), DetectorConfig(phn_params=DEFAULT_PHN), track=True)
        f = np.array([t["F"] for t in res.trace])
        assert np.all(np.diff(f) <= 1e-9 * np.abs(f[1:]))


def test_trace_csv(rng):
    obs, _ = _obs(rng, 8, 4, 15)
    res = detect(obs, np.zeros((8, 2)), DetectorConfig(num_iter=2, phn_params=DEFAULT_PHN), track=True)
    lines = trace_to_csv(res.trace).splitlines()
    assert lines[0].startswith("sweep,step,F")
    assert len(lines) == 1 + 2 * (2 + 2)
    assert trace_to_csv([]) == ""


def test_pure_common_phase_is_estimated():
    rng = np.random.default_rng(6)
    n = 64
    rot = np.deg2rad(6.0)
    obs, _ = _obs(rng, n, 16, 25, theta=np.full(n, rot), taps=10)
    res = detect(obs, np.zeros((n, 4)), DetectorConfig(phn_params=DEFAULT_PHN))
    assert res.phn.m_theta.mean() == pytest.approx(rot, rel=0.2)


def test_parallel_schedule_and_warm_start(rng):
    obs, bits = _obs(rng, 16, 16, 25)
    cfg = DetectorConfig(phn_params=DEFAULT_PHN, schedule="parallel")
    res = detect(obs, np.zeros((16, 4)), cfg)
    assert np.mean(np.sign(res.extrinsic) == bits) > 0.95
    warm = detect(obs, np.zeros((16, 4)), DetectorConfig(phn_params=DEFAULT_PHN, num_iter=1),
                  warm_start=PhnPosterior(res.phn.m_theta, res.phn.s_theta))
    assert np.all(np.isfinite(warm.extrinsic))


def test_saturated_priors_keep_observation_evidence(rng):
    obs, bits = _obs(rng, 16, 16, 25)
    res = detect(obs, 1000.0 * bits, DetectorConfig(phn_params=DEFAULT_PHN))
    assert res.clamp_events > 0
    # priors are pinned at the cap, yet the observation's own evidence comes back
    assert np.mean(np.sign(res.extrinsic) == bits) > 0.95


def test_contract_errors(rng):
    obs, _ = _obs(rng, 8, 16, 15)
    cfg = DetectorConfig(phn_params=DEFAULT_PHN)
    with pytest.raises(ValueError):
        detect(obs, np.zeros((7, 4)), cfg)
    with pytest.raises(ValueError):
        DetectorConfig(num_iter=0)
    with pytest.raises(ValueError):
        DetectorConfig(phn_params=DEFAULT_PHN, schedule="random")
    with pytest.raises(NumericalDomainError):
        detect(obs, np.zeros((8, 4)), DetectorConfig(prior_cov=np.zeros((8, 8))))
    with pytest.raises(ValueError):
        Observation(np.zeros(4), np.zeros(5), 1.0)


# --- oracles --------------------------------------------------------------------------

def test_oracle_without_phase_noise_is_demapper(rng):
    obs, _ = _obs(rng, 2, 4, 5, taps=2)
    prior = rng.normal(0, 1, (2, 2))
    ref = exact_posterior_oracle(obs, 1e-18 * np.eye(2), prior)
    post = qam.demap_soft(dft(obs.r), obs.h, obs.noise_var, prior) + prior
    np.testing.assert_allclose(ref.marginal_llr, post, atol=1e-8)
    np.testing.assert_allclose(ref.prob_plus, 1 / (1 + np.exp(-ref.marginal_llr)), atol=1e-12)
    assert np.all((ref.prob_plus >= 0) & (ref.prob_plus <= 1))


def test_oracle_matches_quadrature(rng):
    params = PhnParams.from_degrees(8.0)
    obs, _ = _obs(rng, 2, 4, 10, theta=np.deg2rad([6.0, 9.0]), taps=2)
    prior = rng.normal(0, 0.5, (2, 2))
    phi = phn_covariance(params, 2)
    exact = exact_posterior_oracle(obs, phi, prior)
    quad = quadrature_oracle(obs, phi, prior)
    np.testing.assert_allclose(exact.prob_plus, quad.prob_plus, atol=1e-4)
    assert exact.log_evidence == pytest.approx(quad.log_evidence, abs=1e-4)


def test_oracle_size_guard(rng):
    obs, _ = _obs(rng, 8, 4, 10)
    with pytest.raises(ValueError):
        exact_posterior_oracle(obs, np.eye(8), np.zeros((8, 2)))
