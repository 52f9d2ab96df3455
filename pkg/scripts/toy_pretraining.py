"""Toy run of the bypass-then-joint schedule, optionally against a no-pretraining run.

Writes per-step and per-eval CSVs plus a JSON summary to --out.
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from esc_codec import checkpoint
from esc_codec import numerics as nx
from esc_codec.training import toy_experiment, toy_train_config


def summarize(hist, seconds: float) -> dict:
    act = hist.activation_step
    at = [e for e in hist.evals if e["step"] == act and e["vq_active"]] if act is not None else []
    final = hist.evals[-1]
    return {
        "activation_step": act,
        "mel_at_activation": at[0]["mel_distance"] if at else None,
        "util_at_activation": at[0]["utilization"] if at else None,
        "final_mel": final["mel_distance"],
        "final_util": final["utilization"],
        "evals": [{k: e[k] for k in ("step", "vq_active", "mel_distance", "utilization")} for e in hist.evals],
        "seconds": seconds,
    }


def run(name: str, pretrain_steps: int, args) -> dict:
    cfg = toy_train_config(seed=args.seed, total_steps=args.steps, pretrain_steps=pretrain_steps)
    log = (lambda msg: print(f"[{name}] {msg}", flush=True)) if args.verbose else None
    t0 = time.monotonic()
    model, hist = toy_experiment(cfg, log=log)
    out = Path(args.out) / name
    out.mkdir(parents=True, exist_ok=True)
    hist.write_csv(out / "history.csv")
    hist.write_eval_csv(out / "evals.csv")
    checkpoint.save(model, out / "model.ckpt", {"activation_step": hist.activation_step})
    return summarize(hist, time.monotonic() - t0)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/toy_pretraining")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--pretrain", type=int, default=400)
    p.add_argument("--skip-baseline", action="store_true", help="only run the pre-trained schedule")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    nx.set_finite_check(False)
    results = {"pretrained": run("pretrained", args.pretrain, args)}
    if not args.skip_baseline:
        results["no_pretraining"] = run("no_pretraining", 0, args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "summary.json").write_text(json.dumps(results, indent=2))
    for name, r in results.items():
        print(f"{name:>15}: mel at activation {r['mel_at_activation']:.4f}  final mel {r['final_mel']:.4f}  "
              f"final util {r['final_util']:.4f}  ({r['seconds'] / 60:.1f} min)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
