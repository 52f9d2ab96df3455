"""Encode one clip with the base codec at every stream count and tabulate the cost.

Prints code bits, bitrate, .esc file size and encode time per stream count.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from esc_codec import bitstream as bs
from esc_codec import numerics as nx
from esc_codec.csrvq import CodecModel
from esc_codec.dsp import stft


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seconds", type=float, default=3.0, help="clip duration")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    model = CodecModel(seed=args.seed)
    n = int(round(args.seconds * model.config.stft.sample_rate))
    x = 0.3 * np.random.default_rng(args.seed).standard_normal(n)
    X = stft(x, model.config.stft)[None]
    print(f"{'s':>2} {'bits':>8} {'kbps':>6} {'bytes':>7} {'seconds':>8}")
    for s in range(1, model.num_streams + 1):
        t0 = time.perf_counter()
        with nx.no_grad():
            payloads, _ = model.encode(X, s, reconstruct=False)
        dt = time.perf_counter() - t0
        p = payloads[0]
        print(f"{s:>2} {p.num_bits:>8} {bs.bitrate(p, args.seconds):>6.2f} {bs.file_size(p):>7} {dt:>8.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
