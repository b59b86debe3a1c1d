"""Phase-noise-aware turbo receiver for OFDM: variational detector, LDPC decoder and Monte Carlo harness."""
from .phn import DEFAULT_PHN, PhnParams
from .turbo import FrameConfig
from .vi import DetectorConfig, Observation, detect

__version__ = "0.1.0"
