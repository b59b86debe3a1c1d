"""Monte Carlo sweeps over the receiver variants, CPE analysis and plot data.

Frames are generated from per-frame substreams (see :mod:`phnturbo.rng`),
so frame ``i`` is the same message, channels, phase noise and unit-variance
noise at every SNR point and for every scheme. Only the noise scale changes
with SNR.
"""
import configparser
import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import fec, qam
from .channel import ChannelProfile, apply_impairments, complex_noise, sample_channel, snr_to_noise_var
from .phn import PhnParams, cpe_tail_probability, cpe_variance, sample_phn
from .rng import substream
from .turbo import FrameConfig, run_baseline, run_one_pass, run_turbo, transmit
from .vi import DetectorConfig, Observation

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CONFIG_VERSION = 1
SCHEMES = ("turbo", "one_pass", "no_phn", "phn_ignored")
OUTPUT_ENV = "PHNTURBO_OUTPUT_DIR"
CSV_COLUMNS = ("schema_version", "snr_db", "scheme", "outer_iter", "frames", "bits", "bit_errors", "ber",
               "frame_errors", "fer", "fallback_rate", "hit_max_frames", "seed", "config_hash")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Link, receiver and sweep parameters.

    Stored on disk as an INI file with one ``[simulation]`` section (or the
    same keys as a flat JSON object). Lists are comma separated in INI.
    """
    n_subcarriers: int = 64
    qam_order: int = 64
    num_taps: int = 10
    decay: float = 3.0
    sigma_theta_deg: float = 3.0
    omega_3db: float = 100e3
    t_sample: float = 50e-9
    snr_grid: tuple = (18.0,)
    schemes: tuple = SCHEMES
    min_frame_errors: int = 200
    max_frames: int = 200
    master_seed: int = 1
    interleaver_seed: int = 0
    symbols_per_frame: int = 6
    outer_iters: int = 3
    decoder_iters: int = 6
    detector_iters: int = 5
    standalone_decoder_iters: int = 18
    f2_threshold: float | None = None
    alist: str | None = None
    output: str | None = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "snr_grid", tuple(float(s) for s in self.snr_grid))
        object.__setattr__(self, "schemes", tuple(self.schemes))
        if not self.snr_grid:
            raise ConfigError("snr_grid must not be empty")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad or not self.schemes:
            raise ConfigError(f"schemes must be a non-empty subset of {SCHEMES}, got {self.schemes}")
        if self.min_frame_errors < 1 or self.max_frames < 1:
            raise ConfigError("stop rule needs min_frame_errors >= 1 and max_frames >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for name in ("outer_iters", "decoder_iters", "detector_iters", "standalone_decoder_iters",
                     "symbols_per_frame"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    # -- derived objects --
    @property
    def phn_params(self) -> PhnParams:
        return PhnParams.from_degrees(self.sigma_theta_deg, self.omega_3db, self.t_sample)

    @property
    def frame(self) -> FrameConfig:
        return FrameConfig(self.n_subcarriers, self.qam_order, self.symbols_per_frame, self.outer_iters,
                           self.decoder_iters, self.detector_iters, self.standalone_decoder_iters)

    @property
    def profile(self) -> ChannelProfile:
        return ChannelProfile(self.num_taps, self.decay, self.n_subcarriers)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(num_iter=self.detector_iters, phn_params=self.phn_params,
                              f2_threshold=self.f2_threshold)

    def parity_check(self) -> fec.ParityCheck:
        return fec.load_bundled() if self.alist is None else fec.read_alist(self.alist)

    # -- serialization --
    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_grid"] = list(self.snr_grid)
        d["schemes"] = list(self.schemes)
        return d

    def config_hash(self) -> str:
        """Hash of everything that affects results (not output path or worker count)."""
        d = self.to_dict()
        d.pop("output")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, raw: dict) -> "SimConfig":
        raw = dict(raw)
        version = int(raw.pop("config_version", CONFIG_VERSION))
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {version}")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        out = {}
        for key, val in raw.items():
            out[key] = _coerce(key, val, known[key].default)
        try:
            return cls(**out)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "SimConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if path.suffix.lower() == ".json":
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: expected a JSON object")
            return cls.from_mapping(raw)
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not parser.has_section("simulation"):
            raise ConfigError(f"{path}: missing [simulation] section")
        return cls.from_mapping(dict(parser["simulation"]))

    def dumps_ini(self) -> str:
        lines = ["[simulation]", f"config_version = {CONFIG_VERSION}"]
        for key, val in self.to_dict().items():
            if val is None:
                continue
            if isinstance(val, list):
                val = ", ".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"


def _coerce(key, val, default):
    if key in ("snr_grid", "schemes"):
        items = val if isinstance(val, (list, tuple)) else [v.strip() for v in str(val).split(",") if v.strip()]
        return tuple(float(v) for v in items) if key == "snr_grid" else tuple(str(v) for v in items)
    if val is None or (isinstance(val, str) and val.strip().lower() in ("", "none")):
        return None
    try:
        if key in ("f2_threshold",):
            return float(val)
        if key in ("alist", "output"):
            return str(val)
        if isinstance(default, bool):
            return str(val).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {val!r}") from exc
    return val


# --- frame generation ---------------------------------------------------------------

@dataclass
class Frame:
    message: np.ndarray
    symbols: np.ndarray      # (S, N) transmitted
    channels: list
    theta: np.ndarray        # (S, N)
    noise: np.ndarray        # (S, N), unit per-dimension variance


def make_frame(cfg: SimConfig, pc: fec.ParityCheck, perm: fec.Permutation, index: int) -> Frame:
    """Draw frame ``index``: message bits, then per symbol channel, phase noise and noise."""
    rng = substream(cfg.master_seed, index)
    msg = np.where(rng.integers(0, 2, pc.k) == 1, 1.0, -1.0)
    _, symbols = transmit(msg, cfg.frame, pc, perm)
    channels, theta, noise = [], [], []
    for _ in range(cfg.symbols_per_frame):
        channels.append(sample_channel(cfg.profile, rng))
        theta.append(sample_phn(cfg.phn_params, cfg.n_subcarriers, rng))
        noise.append(complex_noise(cfg.n_subcarriers, 1.0, rng))
    return Frame(msg, symbols, channels, np.array(theta), np.array(noise))


def frame_observations(frame: Frame, noise_var: float, with_phn: bool = True):
    out = []
    for s, ch in enumerate(frame.channels):
        theta = frame.theta[s] if with_phn else np.zeros_like(frame.theta[s])
        r = apply_impairments(frame.symbols[s], ch, theta, 0.0) + np.sqrt(noise_var) * frame.noise[s]
        out.append(Observation(r, ch.h, noise_var))
    return out


def simulate_frame(cfg: SimConfig, snr_db: float, index: int, schemes, pc=None, perm=None) -> dict:
    """Run the requested schemes on one frame.

    Returns ``{(scheme, outer_iter): (bit_errors, frame_error, fallbacks)}``.
    """
    pc = cfg.parity_check() if pc is None else pc
    perm = fec.Permutation.random(pc.n, cfg.interleaver_seed) if perm is None else perm
    frame = make_frame(cfg, pc, perm, index)
    s2 = snr_to_noise_var(snr_db, cfg.qam_order)
    fcfg = cfg.frame
    det = cfg.detector_config()
    obs = frame_observations(frame, s2, True)
    out = {}
    first = None
    if "turbo" in schemes:
        tr = run_turbo(obs, fcfg, pc, perm, det, frame.message)
        for it, st in enumerate(tr.per_outer_iteration, 1):
            out[("turbo", it)] = (st.bit_errors, st.frame_error, st.fallbacks)
        first = (tr.first_pass_extrinsic, tr.per_outer_iteration[0].fallbacks)
    if "one_pass" in schemes:
        ext, fb = first if first is not None else (None, 0)
        st = run_one_pass(obs, fcfg, pc, perm, det, frame.message, ext, fb).per_outer_iteration[0]
        out[("one_pass", 1)] = (st.bit_errors, st.frame_error, st.fallbacks)
    if "phn_ignored" in schemes:
        st = run_baseline("phn_ignored", obs, fcfg, pc, perm, frame.message).per_outer_iteration[0]
        out[("phn_ignored", 1)] = (st.bit_errors, st.frame_error, 0)
    if "no_phn" in schemes:
        obs0 = frame_observations(frame, s2, False)
        st = run_baseline("no_phn", obs0, fcfg, pc, perm, frame.message).per_outer_iteration[0]
        out[("no_phn", 1)] = (st.bit_errors, st.frame_error, 0)
    return out


# --- sweep ------------------------------------------------------------------------

@dataclass
class SweepRecord:
    snr_db: float
    scheme: str
    outer_iter: int
    frames: int
    bits: int
    bit_errors: int
    frame_errors: int
    fallbacks: int
    symbols: int
    hit_max_frames: bool
    seed: int
    config_hash: str
    schema_version: int = SCHEMA_VERSION

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits if self.bits else 0.0

    @property
    def fer(self) -> float:
        return self.frame_errors / self.frames if self.frames else 0.0

    @property
    def fallback_rate(self) -> float:
        return self.fallbacks / self.symbols if self.symbols else 0.0

    def row(self) -> dict:
        return {"schema_version": self.schema_version, "snr_db": self.snr_db, "scheme": self.scheme,
                "outer_iter": self.outer_iter, "frames": self.frames, "bits": self.bits,
                "bit_errors": self.bit_errors, "ber": self.ber, "frame_errors": self.frame_errors,
                "fer": self.fer, "fallback_rate": self.fallback_rate,
                "hit_max_frames": int(self.hit_max_frames), "seed": self.seed, "config_hash": self.config_hash}


@dataclass
class _Tally:
    frames: int = 0
    bit_errors: dict = field(default_factory=dict)
    frame_errors: dict = field(default_factory=dict)
    fallbacks: dict = field(default_factory=dict)
    done: bool = False


def _stop_key(scheme, cfg):
    return (scheme, cfg.outer_iters if scheme == "turbo" else 1)


def _worker(args):
    cfg, snr, idx, schemes = args
    return simulate_frame(cfg, snr, idx, schemes, _cached_pc(cfg), _cached_perm(cfg))


_CACHE = {}


def _cached_pc(cfg):
    key = ("pc", cfg.alist)
    if key not in _CACHE:
        _CACHE[key] = cfg.parity_check()
    return _CACHE[key]


def _cached_perm(cfg):
    pc = _cached_pc(cfg)
    key = ("perm", cfg.alist, cfg.interleaver_seed)
    if key not in _CACHE:
        _CACHE[key] = fec.Permutation.random(pc.n, cfg.interleaver_seed)
    return _CACHE[key]


def run_sweep(cfg: SimConfig, progress=None) -> list:
    """Simulate every (SNR, scheme) pair and return one record per (SNR, scheme, outer iteration).

    Stop rule per scheme: keep adding frames in index order until it has
    ``min_frame_errors`` frame errors (turbo counts its last iteration) or
    ``max_frames`` frames. Frames are evaluated in blocks, possibly in
    parallel, but reduced strictly in index order, so the worker count never
    changes the result.
    """
    pc = _cached_pc(cfg)
    fcfg = cfg.frame
    fcfg.check(pc)
    chash = cfg.config_hash()
    records = []
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for snr in cfg.snr_grid:
            tallies = {s: _Tally() for s in cfg.schemes}
            idx = 0
            block = max(1, cfg.workers)
            while idx < cfg.max_frames and not all(t.done for t in tallies.values()):
                active = tuple(s for s in cfg.schemes if not tallies[s].done)
                jobs = [(cfg, snr, i, active) for i in range(idx, min(idx + block, cfg.max_frames))]
                results = list(pool.map(_worker, jobs)) if pool else [_worker(j) for j in jobs]
                for res in results:
                    for s in active:
                        t = tallies[s]
                        if t.done:
                            continue
                        t.frames += 1
                        for (scheme, it), (be, fe, fb) in res.items():
                            if scheme != s:
                                continue
                            t.bit_errors[it] = t.bit_errors.get(it, 0) + be
                            t.frame_errors[it] = t.frame_errors.get(it, 0) + int(fe)
                            t.fallbacks[it] = t.fallbacks.get(it, 0) + fb
                        if (t.frame_errors.get(_stop_key(s, cfg)[1], 0) >= cfg.min_frame_errors
                                or t.frames >= cfg.max_frames):
                            t.done = True
                idx += len(jobs)
                if progress is not None:
                    progress(snr, idx)
            for s in cfg.schemes:
                t = tallies[s]
                hit_max = t.frame_errors.get(_stop_key(s, cfg)[1], 0) < cfg.min_frame_errors
                for it in sorted(t.bit_errors):
                    records.append(SweepRecord(
                        snr_db=snr, scheme=s, outer_iter=it, frames=t.frames, bits=t.frames * pc.k,
                        bit_errors=t.bit_errors[it], frame_errors=t.frame_errors[it],
                        fallbacks=t.fallbacks[it], symbols=t.frames * cfg.symbols_per_frame,
                        hit_max_frames=hit_max, seed=cfg.master_seed, config_hash=chash))
    finally:
        if pool is not None:
            pool.shutdown()
    return records


def _fmt(v):
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def records_to_csv(records, timestamp: bool = True) -> str:
    """CSV text; the optional first line is a ``#`` comment with the generation time."""
    buf = io.StringIO()
    if timestamp:
        buf.write(f"# generated {datetime.now(timezone.utc).isoformat()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        row = rec.row()
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def csv_body(text: str) -> str:
    """Drop comment lines so two runs can be compared byte for byte."""
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))


def read_records(path) -> list:
    path = Path(path)
    with path.open() as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    out = []
    for r in rows:
        if int(r["schema_version"]) != SCHEMA_VERSION:
            raise ValueError(f"{path}: schema_version {r['schema_version']} not supported")
        frames = int(r["frames"])
        rec = SweepRecord(float(r["snr_db"]), r["scheme"], int(r["outer_iter"]), frames, int(r["bits"]),
                          int(r["bit_errors"]), int(r["frame_errors"]), 0, 0, r["hit_max_frames"] == "1",
                          int(r["seed"]), r["config_hash"])
        out.append(rec)
    return out


def output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "."))


def write_csv(records, path=None) -> Path:
    path = Path(path) if path is not None else output_dir() / "sweep.csv"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(records_to_csv(records))
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


# --- CPE analysis -----------------------------------------------------------------

def rotation_ser(m: int, angle: float) -> float:
    """Fraction of constellation points that a noise-free rotation by ``angle`` moves
    out of their own minimum-distance decision region."""
    points, _ = qam.constellation(m)
    rotated = points * np.exp(1j * angle)
    levels = np.unique(points.real)
    dec_re = levels[np.argmin(np.abs(rotated.real[:, None] - levels[None, :]), axis=1)]
    dec_im = levels[np.argmin(np.abs(rotated.imag[:, None] - levels[None, :]), axis=1)]
    wrong = (dec_re != points.real) | (dec_im != points.imag)
    return float(np.count_nonzero(wrong)) / m


def cpe_report(params: PhnParams, n: int = 64, angle_deg: float = 9.0, m: int = 64,
               two_sided: bool = False) -> dict:
    """Common-phase-error summary: its variance, the chance it exceeds ``angle_deg``
    and the symbol error rate a rotation of that size causes."""
    angle = np.deg2rad(angle_deg)
    var = cpe_variance(params, n)
    return {
        "n_subcarriers": n,
        "sigma_theta_deg": float(np.rad2deg(params.sigma_theta)),
        "cpe_variance_rad2": var,
        "cpe_std_deg": float(np.rad2deg(np.sqrt(var))),
        "angle_deg": float(angle_deg),
        "tail_probability": cpe_tail_probability(params, n, angle, two_sided=two_sided),
        "qam_order": m,
        "rotation_ser": rotation_ser(m, angle),
    }


def format_report(report: dict) -> str:
    width = max(len(k) for k in report)
    return "\n".join(f"{k:<{width}}  {_fmt(v) if isinstance(v, float) else v}" for k, v in report.items())


# --- plot data --------------------------------------------------------------------

def plot_series(records, floor: float = 1e-7):
    """Group records into ``{(scheme, outer_iter): [(snr, ber, plotted_ber, clipped)]}``."""
    if not records:
        raise ValueError("no records to plot")
    order = {s: i for i, s in enumerate(SCHEMES)}
    series = {}
    for rec in sorted(records, key=lambda r: (order.get(r.scheme, 99), r.scheme, r.outer_iter, r.snr_db)):
        clipped = rec.ber < floor
        series.setdefault((rec.scheme, rec.outer_iter), []).append(
            (rec.snr_db, rec.ber, floor if clipped else rec.ber, clipped))
    return series


def emit_plot_data(records, path, floor: float = 1e-7, svg: bool = True):
    """Write a long-format series CSV and, optionally, an SVG line chart beside it.

    BER values below ``floor`` (including zero) are plotted at ``floor`` and
    flagged ``clipped=1``. Returns the list of written paths.
    """
    series = plot_series(records, floor)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "scheme", "outer_iter", "snr_db", "ber", "ber_plot", "clipped"])
    for (scheme, it), pts in series.items():
        for snr, ber, plotted, clipped in pts:
            w.writerow([f"{scheme}:{it}", scheme, it, _fmt(snr), _fmt(ber), _fmt(plotted), int(clipped)])
    path.write_text(buf.getvalue())
    written = [path]
    if svg:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for (scheme, it), pts in series.items():
            label = f"turbo iter {it}" if scheme == "turbo" else scheme.replace("_", " ")
            ax.semilogy([p[0] for p in pts], [p[2] for p in pts], marker="o", label=label)
        ax.axhline(floor, color="0.7", lw=0.8, ls=":")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("BER")
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=8)
        svg_path = path.with_suffix(".svg")
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(svg_path)
    return written


# --- detector instances for the CLI ------------------------------------------------

def dump_instance(path, obs: Observation, prior_llr, phn_params: PhnParams):
    np.savez(path, r=obs.r, h=obs.h, noise_var=obs.noise_var, prior_llr=np.asarray(prior_llr, dtype=float),
             phn=np.array([phn_params.sigma_theta, phn_params.omega_3db, phn_params.t_sample]))


def load_instance(path):
    """Inverse of :func:`dump_instance`: ``(obs, prior_llr, phn_params)``."""
    try:
        with np.load(path) as z:
            obs = Observation(z["r"], z["h"], float(z["noise_var"]))
            return obs, z["prior_llr"], PhnParams(*map(float, z["phn"]))
    except (OSError, KeyError, ValueError) as exc:
        raise ValueError(f"cannot load detector instance {path}: {exc}") from exc
