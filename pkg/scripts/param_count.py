"""Per-module parameter counts of a codec config against the 8.39 M reference total."""

from __future__ import annotations

import argparse

from esc_codec.config import RunConfig, load_config
from esc_codec.csrvq import CodecModel

REFERENCE_TOTAL = 8.39e6


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", help="run config file (default: base codec)")
    args = ap.parse_args(argv)
    cfg = RunConfig() if args.config is None else load_config(args.config)
    model = CodecModel(cfg.codec)
    counts = model.module_parameter_counts()
    for name, count in counts.items():
        print(f"{name:<16} {count:>12,d}")
    total = sum(counts.values())
    print(f"{'total':<16} {total:>12,d}")
    print(f"relative to 8.39 M: {100 * (total / REFERENCE_TOTAL - 1):+.2f}%")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
