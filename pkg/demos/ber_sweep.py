"""A desk-sized version of the BER comparison.

Runs the turbo receiver, the one-pass receiver and both phase-blind
baselines over a few SNR points with a handful of frames each, then writes
the CSV, the plot series and an SVG chart. Raise ``max_frames`` for
smoother curves; 200 frames per point takes a few minutes per SNR value
on one core.
"""
import os
import sys
from dataclasses import replace
from pathlib import Path

from phnturbo.harness import SimConfig, emit_plot_data, run_sweep, write_csv

out = Path(os.environ.get("PHNTURBO_OUTPUT_DIR", "."))
frames = int(sys.argv[1]) if len(sys.argv) > 1 else 10

cfg = SimConfig.load(Path(__file__).resolve().parents[1] / "configs" / "reference_link.cfg")
cfg = replace(cfg, snr_grid=(18.0, 20.0, 22.0), max_frames=frames, min_frame_errors=frames)

records = run_sweep(cfg, progress=lambda snr, k: print(f"  {snr:g} dB: {k} frames", end="\r"))
print()
for r in records:
    label = f"{r.scheme}" + (f" (iter {r.outer_iter})" if r.scheme == "turbo" else "")
    print(f"{r.snr_db:5.1f} dB  {label:18s} BER {r.ber:.2e}  FER {r.fer:.2f}")

write_csv(records, out / "ber_sweep.csv")
for p in emit_plot_data(records, out / "ber_series.csv"):
    print("wrote", p)
