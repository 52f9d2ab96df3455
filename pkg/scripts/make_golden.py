"""Regenerate tests/golden/*.esc from the independent bit-string writer."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "tests"))

from oracle_bits import GOLDEN, esc_reference  # noqa: E402


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=ROOT / "tests" / "golden")
    ap.add_argument("--check", action="store_true", help="compare instead of writing")
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    stale = 0
    for name, kw in sorted(GOLDEN.items()):
        data = esc_reference(kw["streams"], kw["frame_groups"], kw["product_size"], kw["bits"], kw["fingerprint"],
                             kw.get("sample_rate", 16000))
        path = args.out / name
        if args.check:
            same = path.is_file() and path.read_bytes() == data
            stale += not same
            print(f"{name}: {'ok' if same else 'differs'}")
        else:
            path.write_bytes(data)
            print(f"{name}: {len(data)} bytes")
    return 1 if stale else 0


if __name__ == "__main__":
    raise SystemExit(main())
