"""Bit-level variational-inference detector for OFDM with phase noise.

The joint posterior over the bit matrix ``B`` and the phase sequence
``theta`` is approximated by independent Bernoulli factors per bit (means
``tanh(t)``) times a Gaussian ``N(m_theta, S_theta)``. The detector runs
coordinate descent on the variational free energy under the small-angle
likelihood ``r ~ CN(diag(1 + j theta) s, 2 sigma^2 I)`` with the noiseless
time-domain signal ``s = F^H H f(B)``.

Notation used in code: ``G = F^H diag(h)`` so ``s = G d``; ``a`` and ``b``
are the real and imaginary axis amplitudes of the mean symbol ``d = a + j b``.
Expectations of quadratic forms split by diagonal: for a Hermitian ``M``,
``E[d^H M d] = a'Re(M1)a + b'Re(M1)b - 2 a'Im(M0)b + diag(M0).(nu_r + nu_i)``
with ``M1`` the off-diagonal part, so the diagonal pairs with the second
moments ``nu`` and the off-diagonal part with the means.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.stats import chi2

from . import qam
from .channel import ChannelRealization, dft, dft_matrix
from .phn import PhnParams, phn_covariance

logger = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


class NumericalDomainError(ValueError):
    pass


# --- containers ---------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    """One OFDM symbol after CP removal: time-domain ``r``, channel ``h``, noise variance per dimension."""
    r: np.ndarray
    h: np.ndarray
    noise_var: float

    def __post_init__(self):
        h = self.h.h if isinstance(self.h, ChannelRealization) else self.h
        object.__setattr__(self, "h", np.asarray(h, dtype=complex))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=complex))
        if self.r.shape != self.h.shape:
            raise ValueError(f"r {self.r.shape} and h {self.h.shape} differ")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be positive")

    @property
    def n(self) -> int:
        return self.r.size

    @property
    def g(self) -> np.ndarray:
        """``F^H diag(h)``."""
        return dft_matrix(self.n).conj().T * self.h[None, :]


@dataclass(frozen=True)
class PhnPosterior:
    m_theta: np.ndarray
    s_theta: np.ndarray


@dataclass
class PosteriorState:
    """Variational parameters. ``t_bits`` is ``atanh`` of the bit means, columns ``[r1..rK, i1..iK]``."""
    m_theta: np.ndarray
    s_theta: np.ndarray
    t_bits: np.ndarray

    @property
    def bit_means(self) -> np.ndarray:
        return np.tanh(self.t_bits)

    @property
    def phn(self) -> PhnPosterior:
        return PhnPosterior(self.m_theta.copy(), self.s_theta.copy())

    def copy(self) -> "PosteriorState":
        return PosteriorState(self.m_theta.copy(), self.s_theta.copy(), self.t_bits.copy())


@dataclass(frozen=True)
class DetectorWorkspace:
    z: np.ndarray
    psi: np.ndarray
    m0: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    x_m: np.ndarray


@dataclass(frozen=True)
class DetectorConfig:
    """Detector settings.

    The phase prior defaults to zero mean and the AR(1) covariance of
    ``phn_params``; ``prior_cov`` overrides it. ``f2_threshold=None`` selects
    :func:`default_f2_threshold`.
    """
    num_iter: int = 5
    phn_params: PhnParams | None = None
    prior_mean: np.ndarray | None = None
    prior_cov: np.ndarray | None = None
    f2_threshold: float | None = None
    clamp_eps: float = qam.CLAMP_EPS
    t_max: float = 30.0
    schedule: str = "sequential"
    use_guard: bool = True

    def __post_init__(self):
        if self.num_iter < 1:
            raise ValueError("num_iter must be >= 1")
        if self.schedule not in ("sequential", "parallel"):
            raise ValueError("schedule must be 'sequential' or 'parallel'")
        if self.f2_threshold is not None and not np.isfinite(self.f2_threshold):
            raise ValueError("f2_threshold must be finite")

    def phn_prior(self, n: int):
        if self.prior_cov is not None:
            phi = np.asarray(self.prior_cov, dtype=float)
        elif self.phn_params is not None:
            phi = phn_covariance(self.phn_params, n)
        else:
            raise ValueError("DetectorConfig needs phn_params or prior_cov")
        mu = np.zeros(n) if self.prior_mean is None else np.asarray(self.prior_mean, dtype=float)
        if phi.shape != (n, n) or mu.shape != (n,):
            raise ValueError(f"phase prior dimensions do not match N={n}")
        return _GaussianPrior(mu, phi)


class _GaussianPrior:
    def __init__(self, mu, phi):
        self.mu = mu
        self.phi = phi
        try:
            self.chol = linalg.cho_factor(phi, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalDomainError("phase prior covariance is not positive definite") from exc
        self.inv = linalg.cho_solve(self.chol, np.eye(phi.shape[0]))
        self.inv = 0.5 * (self.inv + self.inv.T)
        self.logdet = 2.0 * np.sum(np.log(np.diag(self.chol[0])))
        self.inv_mu = self.inv @ mu


@dataclass(frozen=True)
class FreeEnergy:
    """Free-energy contributions, each with the sign it carries in the total.

    ``prior_bits``  = -E[log p(B)]          (term i)
    ``prior_phn``   = -E[log p(theta)]      (term ii, the F2 guard statistic)
    ``entropy_bits``=  E[log Q(B)]          (term iii)
    ``entropy_phn`` =  E[log Q(theta)]      (term iv)
    ``likelihood``  = -E[log p(r|B,theta)]  (term v)
    """
    prior_bits: float
    prior_phn: float
    entropy_bits: float
    entropy_phn: float
    likelihood: float

    @property
    def total(self) -> float:
        return self.prior_bits + self.prior_phn + self.entropy_bits + self.entropy_phn + self.likelihood


@dataclass
class DetectionResult:
    extrinsic: np.ndarray
    phn: PhnPosterior
    fell_back: bool
    f2: float
    threshold: float
    state: PosteriorState
    trace: list = field(default_factory=list)
    clamp_events: int = 0


# --- expectation helpers --------------------------------------------------------

def _axes(bit_means):
    K = bit_means.shape[1] // 2
    return bit_means[:, :K], bit_means[:, K:]


def symbol_statistics(bit_means):
    """Mean amplitudes ``a``, ``b`` and second moments ``nu_r``, ``nu_i``."""
    br, bi = _axes(bit_means)
    return (qam.axis_amplitude(br), qam.axis_amplitude(bi),
            qam.axis_second_moment(br), qam.axis_second_moment(bi))


def signal_power(bit_means, g):
    """E|s_n|^2 = |G d_hat|^2 + |G|^2 (nu_r + nu_i - |d_hat|^2)."""
    a, b, nu_r, nu_i = symbol_statistics(bit_means)
    d = a + 1j * b
    var = np.maximum(nu_r + nu_i - np.abs(d) ** 2, 0.0)
    return np.abs(g @ d) ** 2 + (np.abs(g) ** 2) @ var


def assemble_workspace(state: PosteriorState, obs: Observation, g=None) -> DetectorWorkspace:
    g = obs.g if g is None else g
    m = state.m_theta
    s_diag = np.diag(state.s_theta)
    z = (1.0 + 1j * m)[:, None] * g
    psi = (g.conj().T * s_diag[None, :]) @ g
    m0 = psi + z.conj().T @ z
    m2 = np.diag(np.diag(m0))
    m1 = m0 - m2
    a, b, _, _ = symbol_statistics(state.bit_means)
    x_m = np.diag(g @ (a + 1j * b))
    return DetectorWorkspace(z=z, psi=psi, m0=m0, m1=m1, m2=m2, x_m=x_m)


def _softplus(x):
    return np.logaddexp(0.0, x)


def bit_prior_energy(t_bits, prior_llr) -> float:
    q = 0.5 * (1.0 + np.tanh(t_bits))
    return float(np.sum(q * _softplus(-prior_llr) + (1.0 - q) * _softplus(prior_llr)))


def bit_entropy_energy(t_bits) -> float:
    """Sum of q log q + (1-q) log(1-q) with q = (1 + tanh t)/2, evaluated stably."""
    q = 0.5 * (1.0 + np.tanh(t_bits))
    return float(-np.sum(q * _softplus(-2.0 * t_bits) + (1.0 - q) * _softplus(2.0 * t_bits)))


def f2_term(state: PosteriorState, cfg: DetectorConfig, prior=None) -> float:
    """-E_Q[log p(theta)] for the Gaussian phase prior."""
    n = state.m_theta.size
    prior = cfg.phn_prior(n) if prior is None else prior
    dm = state.m_theta - prior.mu
    quad = np.sum(prior.inv * state.s_theta) + dm @ prior.inv @ dm
    return float(0.5 * quad + 0.5 * (n * LOG2PI + prior.logdet))


def default_f2_threshold(cfg: DetectorConfig, n: int, quantile: float = 0.999) -> float:
    """0.5 log((2 pi)^N |phi|) + 0.5 chi2_N(quantile) + 0.5 N."""
    prior = cfg.phn_prior(n)
    return float(0.5 * (n * LOG2PI + prior.logdet) + 0.5 * chi2.ppf(quantile, n) + 0.5 * n)


def _logdet_pd(s):
    try:
        c = linalg.cholesky(s, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalDomainError("S_theta is not positive definite") from exc
    return 2.0 * np.sum(np.log(np.diag(c)))


def expected_residual(state: PosteriorState, obs: Observation, ws: DetectorWorkspace) -> float:
    """E_Q ||r - diag(1 + j theta) G f(B)||^2 from the workspace matrices."""
    a, b, nu_r, nu_i = symbol_statistics(state.bit_means)
    d = a + 1j * b
    r = obs.r
    val = np.vdot(r, r).real - 2.0 * np.real(np.vdot(r, ws.z @ d))
    re_m1 = ws.m1.real
    val += a @ re_m1 @ a + b @ re_m1 @ b - 2.0 * a @ ws.m0.imag @ b
    val += np.real(np.diag(ws.m2)) @ (nu_r + nu_i)
    return float(val)


def free_energy(state: PosteriorState, obs: Observation, prior_llr, cfg: DetectorConfig,
                ws: DetectorWorkspace | None = None, prior=None, g=None) -> FreeEnergy:
    """Variational free energy, including every additive constant.

    With all constants kept, ``F = KL(Q || p(B, theta | r)) - log p(r)`` under
    the small-angle model, so ``F >= -log p(r)``.
    """
    n = obs.n
    prior = cfg.phn_prior(n) if prior is None else prior
    ws = assemble_workspace(state, obs, g) if ws is None else ws
    logdet_s = _logdet_pd(state.s_theta)
    prior_llr = np.asarray(prior_llr, dtype=float)
    resid = expected_residual(state, obs, ws)
    return FreeEnergy(
        prior_bits=bit_prior_energy(state.t_bits, prior_llr),
        prior_phn=f2_term(state, cfg, prior),
        entropy_bits=bit_entropy_energy(state.t_bits),
        entropy_phn=float(-0.5 * (n * (LOG2PI + 1.0) + logdet_s)),
        likelihood=float(n * np.log(2.0 * np.pi * obs.noise_var) + resid / (2.0 * obs.noise_var)),
    )


# --- closed-form updates --------------------------------------------------------

def update_s_theta(state: PosteriorState, obs: Observation, cfg: DetectorConfig, prior=None, g=None):
    """Minimise F over S_theta: [phi^-1 + diag(E|s|^2)/sigma^2]^-1, symmetrised."""
    n = obs.n
    prior = cfg.phn_prior(n) if prior is None else prior
    g = obs.g if g is None else g
    w = signal_power(state.bit_means, g)
    prec = prior.inv + np.diag(w / obs.noise_var)
    try:
        s = linalg.cho_solve(linalg.cho_factor(prec, lower=True), np.eye(n))
    except linalg.LinAlgError:
        eps = 1e-10 * np.trace(prec) / n
        logger.warning("S_theta precision not PD; adding %.3g*I", eps)
        s = linalg.inv(prec + eps * np.eye(n))
    return 0.5 * (s + s.T)


def update_m_theta(state: PosteriorState, obs: Observation, cfg: DetectorConfig, prior=None, g=None):
    """m_theta = S_theta [-Im(r^H X_m)^T / sigma^2 + phi^-1 mu_theta]."""
    prior = cfg.phn_prior(obs.n) if prior is None else prior
    g = obs.g if g is None else g
    a, b, _, _ = symbol_statistics(state.bit_means)
    s_hat = g @ (a + 1j * b)
    proj = np.imag(obs.r.conj() * s_hat)
    return state.s_theta @ (-proj / obs.noise_var + prior.inv_mu)


def _bit_field_terms(ws: DetectorWorkspace, obs: Observation):
    zr = ws.z.conj().T @ obs.r
    return zr, ws.m1.real, ws.m0.imag, np.real(np.diag(ws.m0))


def bit_gradient(state: PosteriorState, obs: Observation, prior_llr, ws: DetectorWorkspace,
                 pairing: str = "first_principles") -> np.ndarray:
    """dF/d(bit mean), shape ``(N, L)``.

    ``pairing='swapped'`` pairs the diagonal ``M2`` with the mean quadratic
    forms and ``M1`` with the second moments; it exists only as a negative
    control for gradient checks.
    """
    bm = state.bit_means
    br, bi = _axes(bm)
    K = br.shape[1]
    a, b = qam.axis_amplitude(br), qam.axis_amplitude(bi)
    alpha_r, delta_r = qam.axis_derivatives(br)
    alpha_i, delta_i = qam.axis_derivatives(bi)
    zr, re_m1, im_m0, m0d = _bit_field_terms(ws, obs)
    if pairing == "first_principles":
        quad, diag_w = re_m1, m0d
    elif pairing == "swapped":
        quad, diag_w = ws.m2.real, np.real(ws.m1.T @ np.ones(obs.n))
    else:
        raise ValueError(pairing)
    c_r = -2.0 * zr.real + 2.0 * quad @ a - 2.0 * im_m0 @ b
    c_i = -2.0 * zr.imag + 2.0 * quad @ b + 2.0 * im_m0 @ a
    grad_g = np.empty_like(bm)
    grad_g[:, :K] = alpha_r * c_r[:, None] + delta_r * diag_w[:, None]
    grad_g[:, K:] = alpha_i * c_i[:, None] + delta_i * diag_w[:, None]
    return state.t_bits - 0.5 * np.asarray(prior_llr) + grad_g / (2.0 * obs.noise_var)


class _BitSweeper:
    """Keeps the amplitude, moment, derivative and matrix-vector caches coherent while bits change."""

    def __init__(self, state, obs, ws, t_prior, cfg):
        self.state = state
        self.t_prior = t_prior
        self.cfg = cfg
        self.sigma2 = obs.noise_var
        bm = state.bit_means
        self.K = bm.shape[1] // 2
        br, bi = _axes(bm)
        self.a = qam.axis_amplitude(br)
        self.b = qam.axis_amplitude(bi)
        self.alpha_r, self.delta_r = qam.axis_derivatives(br)
        self.alpha_i, self.delta_i = qam.axis_derivatives(bi)
        zr, self.re_m1, self.im_m0, self.m0d = _bit_field_terms(ws, obs)
        self.zr_re, self.zr_im = zr.real.copy(), zr.imag.copy()
        self.u_r = self.re_m1 @ self.a
        self.v_r = self.im_m0 @ self.b
        self.u_i = self.re_m1 @ self.b
        self.v_i = self.im_m0 @ self.a
        self.clamps = 0
        # likelihood evidence -g/sigma^2 per bit, kept before the |t| cap
        self.evidence = 2.0 * (state.t_bits - t_prior)

    def _new_t(self, t_mu, gval):
        t = t_mu - gval / (2.0 * self.sigma2)
        tm = self.cfg.t_max
        if abs(t) > tm:
            self.clamps += 1
            t = tm if t > 0 else -tm
        return t

    def _refresh_row(self, n, axis):
        K = self.K
        if axis == "real":
            amp, al, de = qam.axis_row(np.tanh(self.state.t_bits[n, :K]).tolist())
            self.alpha_r[n], self.delta_r[n] = al, de
            da = amp - self.a[n]
            self.a[n] = amp
            if da:
                self.u_r += self.re_m1[:, n] * da
                self.v_i += self.im_m0[:, n] * da
        else:
            amp, al, de = qam.axis_row(np.tanh(self.state.t_bits[n, K:]).tolist())
            self.alpha_i[n], self.delta_i[n] = al, de
            db = amp - self.b[n]
            self.b[n] = amp
            if db:
                self.u_i += self.re_m1[:, n] * db
                self.v_r += self.im_m0[:, n] * db

    def _field(self, n, kk, axis):
        if axis == "real":
            c = -2.0 * self.zr_re[n] + 2.0 * self.u_r[n] - 2.0 * self.v_r[n]
            return self.alpha_r[n, kk] * c + self.delta_r[n, kk] * self.m0d[n]
        c = -2.0 * self.zr_im[n] + 2.0 * self.u_i[n] + 2.0 * self.v_i[n]
        return self.alpha_i[n, kk] * c + self.delta_i[n, kk] * self.m0d[n]

    def update_column(self, k, axis):
        kk = k - 1
        col = kk if axis == "real" else self.K + kk
        t = self.state.t_bits
        N = t.shape[0]
        if self.cfg.schedule == "sequential":
            for n in range(N):
                gval = self._field(n, kk, axis)
                self.evidence[n, col] = -gval / self.sigma2
                t[n, col] = self._new_t(self.t_prior[n, col], gval)
                self._refresh_row(n, axis)
        else:
            fields = [self._field(n, kk, axis) for n in range(N)]
            for n in range(N):
                self.evidence[n, col] = -fields[n] / self.sigma2
                t[n, col] = self._new_t(self.t_prior[n, col], fields[n])
            for n in range(N):
                self._refresh_row(n, axis)
        return t[:, col]


def update_bit_means(state: PosteriorState, obs: Observation, prior_llr, k: int, axis: str,
                     cfg: DetectorConfig, ws: DetectorWorkspace | None = None, g=None):
    """Mean-field update of bit column ``k`` (1-based) on ``axis``.

    Modifies ``state.t_bits`` in place and returns the new column. With the
    default sequential schedule each subcarrier's bit is set to its exact
    conditional minimiser given all current values, so F never increases.
    """
    ws = assemble_workspace(state, obs, g) if ws is None else ws
    t_prior = _prior_t(prior_llr, cfg)
    return _BitSweeper(state, obs, ws, t_prior, cfg).update_column(k, axis).copy()


def _prior_t(prior_llr, cfg):
    return np.clip(0.5 * np.asarray(prior_llr, dtype=float), -cfg.t_max, cfg.t_max)


# --- Algorithm ------------------------------------------------------------------

def initial_state(n: int, prior_llr, cfg: DetectorConfig, warm: PhnPosterior | None = None) -> PosteriorState:
    t = _prior_t(prior_llr, cfg).copy()
    if warm is None:
        return PosteriorState(np.zeros(n), np.zeros((n, n)), t)
    return PosteriorState(np.array(warm.m_theta, dtype=float), np.array(warm.s_theta, dtype=float), t)


def _trace_record(sweep, step, state, obs, prior_llr, cfg, prior, g, clamps):
    fe = free_energy(state, obs, prior_llr, cfg, prior=prior, g=g)
    return {
        "sweep": sweep, "step": step, "F": fe.total,
        "prior_bits": fe.prior_bits, "prior_phn": fe.prior_phn,
        "entropy_bits": fe.entropy_bits, "entropy_phn": fe.entropy_phn,
        "likelihood": fe.likelihood,
        "m_norm": float(np.linalg.norm(state.m_theta)),
        "s_min_eig": float(np.linalg.eigvalsh(state.s_theta)[0]),
        "clamps": clamps,
    }


def detect(obs: Observation, prior_llr, cfg: DetectorConfig, *, warm_start: PhnPosterior | None = None,
           track: bool = False) -> DetectionResult:
    """Run the VI detector on one OFDM symbol and return extrinsic bit LLRs.

    Sweep order: S_theta, m_theta, then bit columns k = K..1 (real then
    imaginary for each k). If the phase-prior statistic F2 exceeds the
    threshold, the VI output is discarded and the PHN-ignoring demapper is
    used instead (``fell_back=True``).
    """
    n = obs.n
    prior_llr = np.asarray(prior_llr, dtype=float)
    if prior_llr.ndim != 2 or prior_llr.shape[0] != n:
        raise ValueError(f"prior_llr must be (N, L) with N={n}, got {prior_llr.shape}")
    qam.bits_per_axis(prior_llr.shape[1])
    prior = cfg.phn_prior(n)
    g = obs.g
    K = prior_llr.shape[1] // 2
    state = initial_state(n, prior_llr, cfg, warm_start)
    t_prior = _prior_t(prior_llr, cfg)
    trace = []
    clamps = 0
    evidence = np.zeros_like(t_prior)

    for sweep in range(cfg.num_iter):
        state.s_theta = update_s_theta(state, obs, cfg, prior, g)
        if track:
            trace.append(_trace_record(sweep, "s_theta", state, obs, prior_llr, cfg, prior, g, 0))
        state.m_theta = update_m_theta(state, obs, cfg, prior, g)
        if track:
            trace.append(_trace_record(sweep, "m_theta", state, obs, prior_llr, cfg, prior, g, 0))
        ws = assemble_workspace(state, obs, g)
        sweeper = _BitSweeper(state, obs, ws, t_prior, cfg)
        for k in range(K, 0, -1):
            for axis in ("real", "imag"):
                before = sweeper.clamps
                sweeper.update_column(k, axis)
                if track:
                    trace.append(_trace_record(sweep, f"bits_{axis[0]}{k}", state, obs, prior_llr, cfg,
                                               prior, g, sweeper.clamps - before))
        clamps += sweeper.clamps
        evidence = sweeper.evidence
    if clamps:
        logger.debug("t clamped at +-%g on %d bit updates", cfg.t_max, clamps)

    f2 = f2_term(state, cfg, prior)
    threshold = cfg.f2_threshold if cfg.f2_threshold is not None else default_f2_threshold(cfg, n)
    if cfg.use_guard and f2 > threshold:
        ext = qam.demap_soft(dft(obs.r), obs.h, obs.noise_var, prior_llr)
        fell_back = True
    else:
        # equals 2 (t_post - t_prior) whenever the cap is inactive; under the cap a
        # saturated bit still reports the evidence the observation gave it
        ext = evidence.copy()
        fell_back = False
    return DetectionResult(extrinsic=ext, phn=state.phn, fell_back=fell_back, f2=f2, threshold=threshold,
                           state=state, trace=trace, clamp_events=clamps)


def trace_to_csv(trace) -> str:
    """Per-step convergence records as CSV text."""
    if not trace:
        return ""
    keys = list(trace[0])
    lines = [",".join(keys)]
    for rec in trace:
        lines.append(",".join(repr(rec[k]) if isinstance(rec[k], float) else str(rec[k]) for k in keys))
    return "\n".join(lines) + "\n"


# --- validation oracles ------------------------------------------------------------

def phn_gradients(state: PosteriorState, obs: Observation, cfg: DetectorConfig, prior=None, g=None):
    """Analytic ``(dF/dm_theta, dF/dS_theta^-1)``."""
    prior = cfg.phn_prior(obs.n) if prior is None else prior
    g = obs.g if g is None else g
    w = signal_power(state.bit_means, g)
    a, b, _, _ = symbol_statistics(state.bit_means)
    proj = np.imag(obs.r.conj() * (g @ (a + 1j * b)))
    grad_m = prior.inv @ (state.m_theta - prior.mu) + (proj + w * state.m_theta) / obs.noise_var
    s = state.s_theta
    grad_s = 0.5 * prior.inv - 0.5 * linalg.inv(s) + np.diag(w) / (2.0 * obs.noise_var)
    return grad_m, -s @ grad_s @ s


def _central_diff(fun, x0, h):
    """Fourth-order central differences of a scalar function over every entry of ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    out = np.empty(x0.size)
    flat = x0.ravel()
    for i in range(flat.size):
        vals = []
        for step in (-2, -1, 1, 2):
            x = flat.copy()
            x[i] += step * h
            vals.append(fun(x.reshape(x0.shape)))
        out[i] = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
    return out.reshape(x0.shape)


@dataclass
class GradientReport:
    errors: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def __str__(self):
        lines = [f"{name:>10s}  max rel err {err:.3e}  {'ok' if err <= self.tolerance else 'FAIL'}"
                 for name, err in self.errors.items()]
        return "\n".join(lines + [("PASS" if self.passed else "FAIL") + f" (tol {self.tolerance:g})"])


def _rel_err(num, ana):
    scale = max(np.max(np.abs(ana)), np.max(np.abs(num)), 1e-300)
    return float(np.max(np.abs(num - ana)) / scale)


def gradient_check(obs: Observation, state: PosteriorState, prior_llr, cfg: DetectorConfig,
                   tolerance: float = 1e-6, pairing: str = "first_principles",
                   blocks=("m_theta", "s_inv", "bits")) -> GradientReport:
    """Compare analytic free-energy gradients to finite differences of :func:`free_energy`.

    Blocks: ``m_theta``, ``s_inv`` (w.r.t. the precision matrix, perturbing
    single entries) and one block per bit column of ``t_bits``.
    """
    prior = cfg.phn_prior(obs.n)
    g = obs.g
    prior_llr = np.asarray(prior_llr, dtype=float)

    def energy(st):
        return free_energy(st, obs, prior_llr, cfg, prior=prior, g=g).total

    errors = {}
    grad_m, grad_p = phn_gradients(state, obs, cfg, prior, g)
    if "m_theta" in blocks:
        num = _central_diff(lambda m: energy(replace(state, m_theta=m)), state.m_theta, 1e-4)
        errors["m_theta"] = _rel_err(num, grad_m)
    if "s_inv" in blocks:
        p0 = linalg.inv(state.s_theta)
        h = 1e-5 * np.max(np.abs(p0))
        # F is evaluated on symmetric matrices only; symmetrising makes d/dP_ij equal G_ij
        num = _central_diff(lambda p: energy(replace(state, s_theta=linalg.inv(0.5 * (p + p.T)))), p0, h)
        errors["s_inv"] = _rel_err(num, grad_p)
    if "bits" in blocks:
        ws = assemble_workspace(state, obs, g)
        gb = bit_gradient(state, obs, prior_llr, ws, pairing=pairing)
        ana = gb * (1.0 - np.tanh(state.t_bits) ** 2)
        num = _central_diff(lambda t: energy(replace(state, t_bits=t)), state.t_bits, 1e-4)
        K = state.t_bits.shape[1] // 2
        for col in range(state.t_bits.shape[1]):
            name = f"t_r{col + 1}" if col < K else f"t_i{col - K + 1}"
            errors[name] = _rel_err(num[:, col], ana[:, col])
    return GradientReport(errors, tolerance)


def random_instance(rng: np.random.Generator, n: int = 8, m: int = 16, snr_db: float = 15.0,
                    phn_params: PhnParams | None = None, interior: bool = True):
    """Random observation, interior posterior point and prior LLRs for checks.

    Returns ``(obs, state, prior_llr, cfg)``.
    """
    from .channel import ChannelProfile, apply_impairments, sample_channel, snr_to_noise_var
    from .phn import DEFAULT_PHN, sample_phn
    phn_params = DEFAULT_PHN if phn_params is None else phn_params
    L = qam.order_to_bits(m)
    bits = rng.choice([-1.0, 1.0], size=(n, L))
    ch = sample_channel(ChannelProfile(min(4, n), 2.0, n), rng)
    theta = sample_phn(phn_params, n, rng)
    sigma2 = snr_to_noise_var(snr_db, m)
    r = apply_impairments(qam.map_bits(bits), ch, theta, sigma2, rng)
    obs = Observation(r, ch.h, sigma2)
    cfg = DetectorConfig(phn_params=phn_params)
    phi = phn_covariance(phn_params, n)
    means = rng.uniform(-0.9, 0.9, size=(n, L))
    a = rng.standard_normal((n, n)) * phn_params.sigma_theta * 0.3
    state = PosteriorState(
        m_theta=rng.multivariate_normal(np.zeros(n), phi),
        s_theta=0.5 * phi + a @ a.T / n,
        t_bits=np.arctanh(means),
    )
    prior_llr = rng.normal(0.0, 2.0, size=(n, L))
    return obs, state, prior_llr, cfg


def _linearized_loglik(obs: Observation, symbols, mu, phi):
    """log p(r | B) for each row of ``symbols`` after integrating theta out exactly.

    Under r = s + j diag(s) theta + n with real Gaussian theta the observation
    is a 2N-dimensional real Gaussian with covariance
    ``sigma^2 I + A phi A^T``, ``A = [-diag(Im s); diag(Re s)]``.
    """
    n = obs.n
    s = symbols @ obs.g.T                          # (H, N)
    y = np.concatenate([obs.r.real, obs.r.imag])
    amat = np.zeros((s.shape[0], 2 * n, n))
    idx = np.arange(n)
    amat[:, idx, idx] = -s.imag
    amat[:, n + idx, idx] = s.real
    mean = np.concatenate([s.real, s.imag], axis=1) + amat @ mu
    cov = obs.noise_var * np.eye(2 * n) + amat @ phi @ amat.transpose(0, 2, 1)
    resid = y[None, :] - mean
    _, logdet = np.linalg.slogdet(cov)
    quad = np.einsum("hi,hi->h", resid, np.linalg.solve(cov, resid[..., None])[..., 0])
    return -0.5 * (2 * n * LOG2PI + logdet + quad)


@dataclass
class OraclePosterior:
    marginal_llr: np.ndarray       # (N, L) exact posterior LLRs
    prob_plus: np.ndarray          # (N, L) P(b = +1 | r)
    map_bits: np.ndarray           # (N, L) bitwise MAP decisions
    joint_map: np.ndarray          # (N, L) most probable bit matrix
    log_evidence: float            # log p(r)


def exact_posterior_oracle(obs: Observation, phi, prior_llr, mu=None, max_bits: int = 12) -> OraclePosterior:
    """Exact bit posteriors under the small-angle model by enumerating every bit matrix."""
    n = obs.n
    prior_llr = np.asarray(prior_llr, dtype=float)
    L = prior_llr.shape[1]
    if n * L > max_bits:
        raise ValueError(f"N*L = {n * L} exceeds the enumeration bound {max_bits}")
    mu = np.zeros(n) if mu is None else np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    hyp = qam.all_bit_rows(n * L).reshape(-1, n, L)
    symbols = qam.map_bits(hyp.reshape(-1, L)).reshape(-1, n)
    logp = _linearized_loglik(obs, symbols, mu, phi)
    logp = logp - _softplus(-hyp * prior_llr[None]).sum(axis=(1, 2))
    return _summarize(hyp, logp)


def _summarize(hyp, logp):
    from scipy.special import logsumexp
    lz = logsumexp(logp)
    w = np.exp(logp - lz)
    plus = np.einsum("h,hnl->nl", w, (hyp > 0).astype(float))
    pos = hyp > 0
    llr = np.empty(hyp.shape[1:])
    for idx in np.ndindex(*hyp.shape[1:]):
        sel = pos[(slice(None),) + idx]
        llr[idx] = logsumexp(logp[sel]) - logsumexp(logp[~sel])
    return OraclePosterior(marginal_llr=llr, prob_plus=plus, map_bits=qam.hard_decision(llr),
                           joint_map=hyp[np.argmax(logp)], log_evidence=float(lz))


def quadrature_oracle(obs: Observation, phi, prior_llr, mu=None, points: int = 401, width: float = 9.0):
    """Bit posteriors for N <= 2 by integrating the small-angle likelihood over a dense theta grid."""
    n = obs.n
    if n > 2:
        raise ValueError("quadrature oracle supports N <= 2")
    from scipy.integrate import simpson
    prior_llr = np.asarray(prior_llr, dtype=float)
    L = prior_llr.shape[1]
    mu = np.zeros(n) if mu is None else np.asarray(mu, dtype=float)
    sd = np.sqrt(np.diag(phi))
    axes = [np.linspace(mu[i] - width * sd[i], mu[i] + width * sd[i], points) for i in range(n)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    phi_inv = linalg.inv(phi)
    dg = grid - mu
    log_prior_theta = -0.5 * np.einsum("ki,ij,kj->k", dg, phi_inv, dg) \
        - 0.5 * (n * LOG2PI + np.linalg.slogdet(phi)[1])
    hyp = qam.all_bit_rows(n * L).reshape(-1, n, L)
    symbols = qam.map_bits(hyp.reshape(-1, L)).reshape(-1, n)
    s = symbols @ obs.g.T
    logp = np.empty(len(hyp))
    for hi in range(len(hyp)):
        mean = s[hi][None, :] * (1.0 + 1j * grid)
        ll = -np.sum(np.abs(obs.r[None, :] - mean) ** 2, axis=1) / (2 * obs.noise_var) \
            - n * np.log(2 * np.pi * obs.noise_var)
        f = ll + log_prior_theta
        top = f.max()
        vals = np.exp(f - top).reshape((points,) * n)
        for ax in reversed(range(n)):
            vals = simpson(vals, x=axes[ax], axis=ax)
        logp[hi] = top + np.log(vals) + np.sum(-_softplus(-hyp[hi] * prior_llr))
    return _summarize(hyp, logp)
