"""Turbo receiver: VI detector and LDPC decoder exchanging extrinsic LLRs over one frame.

A frame is one LDPC codeword, interleaved and spread over several OFDM
symbols. Bit ``i`` of the interleaved codeword lands on symbol
``i // (N*L)``, subcarrier ``(i // L) % N``, bit column ``i % L``.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import fec, qam
from .channel import dft
from .vi import DetectorConfig, Observation, detect


@dataclass(frozen=True)
class FrameConfig:
    n_subcarriers: int = 64
    qam_order: int = 64
    symbols_per_frame: int = 6
    outer_iters: int = 3
    decoder_iters: int = 6
    detector_iters: int = 5
    standalone_decoder_iters: int = 18

    @property
    def bits_per_symbol(self) -> int:
        return qam.order_to_bits(self.qam_order)

    @property
    def code_length(self) -> int:
        return self.symbols_per_frame * self.n_subcarriers * self.bits_per_symbol

    def check(self, pc: fec.ParityCheck):
        if pc.n != self.code_length:
            raise ValueError(f"code length {pc.n} != {self.symbols_per_frame}*{self.n_subcarriers}"
                             f"*{self.bits_per_symbol} = {self.code_length}")


@dataclass
class IterationStats:
    bit_errors: int | None
    frame_error: bool | None
    fallbacks: int
    decoder_converged: bool
    decoder_iters: int


@dataclass
class TurboResult:
    decoded_bits: np.ndarray                   # final message decisions (+-1)
    per_outer_iteration: list = field(default_factory=list)
    decisions: list = field(default_factory=list)  # message decisions after each outer iteration
    first_pass_extrinsic: np.ndarray | None = None


def to_symbol_bits(code_bits, cfg: FrameConfig) -> np.ndarray:
    """Interleaved code-domain vector -> ``(symbols, N, L)``."""
    return np.asarray(code_bits).reshape(cfg.symbols_per_frame, cfg.n_subcarriers, cfg.bits_per_symbol)


def from_symbol_bits(sym_bits) -> np.ndarray:
    return np.asarray(sym_bits).reshape(-1)


def _stats(dec, pc, message, fallbacks):
    bits = fec.message_bits(dec.hard_bits, pc)
    if message is None:
        errs, ferr = None, None
    else:
        errs = int(np.sum(bits != message))
        ferr = errs > 0
    return bits, IterationStats(errs, ferr, fallbacks, dec.converged, dec.iters_used)


def detect_frame(observations, priors, det_cfg: DetectorConfig):
    """Run the detector on every OFDM symbol; returns ``(extrinsic (S, N, L), fallback count)``."""
    ext = np.empty_like(priors)
    fallbacks = 0
    for s, obs in enumerate(observations):
        res = detect(obs, priors[s], det_cfg)
        ext[s] = res.extrinsic
        fallbacks += res.fell_back
    return ext, fallbacks


def run_turbo(observations, cfg: FrameConfig, pc: fec.ParityCheck, perm: fec.Permutation,
              det_cfg: DetectorConfig, message=None) -> TurboResult:
    """Iterate detector -> deinterleave -> decoder -> interleave for ``cfg.outer_iters`` rounds.

    The detector sees only the decoder's extrinsic LLRs (zero on the first
    round) and the decoder sees only the detector's extrinsic LLRs.
    """
    cfg.check(pc)
    det_cfg = _with_iters(det_cfg, cfg.detector_iters)
    shape = (cfg.symbols_per_frame, cfg.n_subcarriers, cfg.bits_per_symbol)
    priors = np.zeros(shape)
    result = TurboResult(decoded_bits=np.empty(0))
    for it in range(cfg.outer_iters):
        det_ext, fallbacks = detect_frame(observations, priors, det_cfg)
        if it == 0:
            result.first_pass_extrinsic = det_ext.copy()
        code_llr = fec.deinterleave(from_symbol_bits(det_ext), perm)
        dec = fec.decode_bp(code_llr, pc, cfg.decoder_iters)
        bits, stats = _stats(dec, pc, message, fallbacks)
        result.per_outer_iteration.append(stats)
        result.decisions.append(bits)
        priors = to_symbol_bits(fec.interleave(dec.extrinsic, perm), cfg)
    result.decoded_bits = result.decisions[-1]
    return result


def run_one_pass(observations, cfg: FrameConfig, pc: fec.ParityCheck, perm: fec.Permutation,
                 det_cfg: DetectorConfig, message=None, detector_extrinsic=None,
                 detector_fallbacks: int = 0) -> TurboResult:
    """Detector once with uniform priors, then a standalone decode.

    ``detector_extrinsic`` lets a caller reuse the first-round detector output of a turbo run
    on the same frame (identical by construction).
    """
    cfg.check(pc)
    if detector_extrinsic is None:
        det_cfg = _with_iters(det_cfg, cfg.detector_iters)
        shape = (cfg.symbols_per_frame, cfg.n_subcarriers, cfg.bits_per_symbol)
        detector_extrinsic, fallbacks = detect_frame(observations, np.zeros(shape), det_cfg)
    else:
        fallbacks = detector_fallbacks
    code_llr = fec.deinterleave(from_symbol_bits(detector_extrinsic), perm)
    dec = fec.decode_bp(code_llr, pc, cfg.standalone_decoder_iters)
    bits, stats = _stats(dec, pc, message, fallbacks)
    return TurboResult(decoded_bits=bits, per_outer_iteration=[stats], decisions=[bits],
                       first_pass_extrinsic=detector_extrinsic)


def run_baseline(kind: str, observations, cfg: FrameConfig, pc: fec.ParityCheck, perm: fec.Permutation,
                 message=None) -> TurboResult:
    """PHN-blind receiver: per-subcarrier soft demapper on ``F r`` plus a standalone decode.

    ``kind`` is ``'no_phn'`` (caller supplies observations simulated with zero
    phase noise) or ``'phn_ignored'`` (observations with phase noise). The
    receiver is the same for both.
    """
    if kind not in ("no_phn", "phn_ignored"):
        raise ValueError(f"unknown baseline {kind!r}")
    cfg.check(pc)
    L = cfg.bits_per_symbol
    ext = np.stack([qam.demap_soft(dft(obs.r), obs.h, obs.noise_var, num_bits=L) for obs in observations])
    code_llr = fec.deinterleave(from_symbol_bits(ext), perm)
    dec = fec.decode_bp(code_llr, pc, cfg.standalone_decoder_iters)
    bits, stats = _stats(dec, pc, message, 0)
    return TurboResult(decoded_bits=bits, per_outer_iteration=[stats], decisions=[bits])


def _with_iters(det_cfg: DetectorConfig, n: int) -> DetectorConfig:
    return det_cfg if det_cfg.num_iter == n else replace(det_cfg, num_iter=n)


def transmit(message, cfg: FrameConfig, pc: fec.ParityCheck, perm: fec.Permutation):
    """Encode, interleave and map; returns ``(codeword, symbols (S, N))``."""
    cw = fec.encode(message, pc)
    sym_bits = to_symbol_bits(fec.interleave(cw, perm), cfg)
    symbols = np.stack([qam.map_bits(b) for b in sym_bits])
    return cw, symbols

