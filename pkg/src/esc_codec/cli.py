"""``esc-codec`` command line: train, encode, decode, eval, inspect.

Exit codes: 0 success, 2 usage or input error, 3 data or fingerprint error.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
import wave
from pathlib import Path

import numpy as np

from . import bitstream, checkpoint
from . import numerics as nx
from .config import ConfigError, RunConfig, dump_config, load_config
from .csrvq import CodecModel
from .dsp import MelScaleSet, istft, mel_distance, read_wav, si_sdr, stft, write_wav
from .training import run_schedule, synth_corpus
from .vq import code_histogram, utilization

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return load_config(path)
    except OSError as e:
        raise CliError(f"cannot read config: {e}") from None
    except ConfigError as e:
        raise CliError(f"invalid config key {e.key}: {e}" if e.key else f"invalid config: {e}") from None


def _load_model(path: str) -> CodecModel:
    try:
        model, _ = checkpoint.load(path)
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot load model {path}: {e}") from None
    return model


def _read_audio(path: str, sample_rate: int) -> np.ndarray:
    try:
        return read_wav(path, sample_rate)
    except FileNotFoundError:
        raise CliError(f"no such file: {path}") from None
    except (ValueError, wave.Error, EOFError) as e:
        raise CliError(f"{path}: {e}") from None


def _wav_files(data_dir: str) -> list[Path]:
    d = Path(data_dir)
    if not d.is_dir():
        raise CliError(f"data directory not found: {data_dir}")
    return sorted(d.glob("*.wav"))


def frame_unit(model: CodecModel) -> int:
    """Samples per frame group; inputs are zero-padded to a multiple of this."""
    c = model.config
    return c.stft.hop_length * c.arch.patch_size[1] * c.vq.frames_per_group


def prepare(model: CodecModel, waveform: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    unit = frame_unit(model)
    pad = (-waveform.size) % unit
    x = np.pad(waveform, (0, pad)) if pad else waveform
    return x, stft(x, model.config.stft)


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    train = cfg.train
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["total_steps"] = args.steps
        overrides["pretrain_steps"] = min(train.pretrain_steps, args.steps) if args.pretrain is None else args.pretrain
    elif args.pretrain is not None:
        overrides["pretrain_steps"] = args.pretrain
    if overrides:
        try:
            train = type(train)(**{**train.__dict__, **overrides})
        except ValueError as e:
            raise CliError(str(e)) from None
    sr = cfg.codec.stft.sample_rate
    if args.synth is not None:
        if args.synth < 1:
            raise CliError("--synth needs at least one clip")
        clips = synth_corpus(train.seed, args.synth, args.synth_seconds, sr)
    else:
        files = _wav_files(args.data_dir)
        if not files:
            raise CliError(f"no .wav files in {args.data_dir}")
        clips = [_read_audio(str(f), sr) for f in files]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = print if args.verbose else None
    nx.set_finite_check(False)
    try:
        model, hist = run_schedule(clips, train, cfg.codec, log=log)
    except FloatingPointError as e:
        raise CliError(f"training diverged: {e}", EXIT_DATA) from None
    finally:
        nx.set_finite_check(True)
    checkpoint.save(model, out / "model.ckpt", {"activation_step": hist.activation_step})
    hist.write_csv(out / "history.csv")
    hist.write_eval_csv(out / "evals.csv")
    (out / "config.txt").write_text(dump_config(RunConfig(cfg.codec, train, cfg.eval)))
    report = _train_report(model, hist, clips, train)
    (out / "report.txt").write_text(report)
    print(report, end="")
    return EXIT_OK


def _train_report(model, hist, clips, train) -> str:
    losses = np.array([r["loss"] for r in hist.records])
    first, last = losses[0], losses[-min(len(losses), 10):].mean()
    lines = [f"steps: {len(losses)}  pretrain: {train.pretrain_steps}  activation step: {hist.activation_step}",
             f"loss: first {first:.4f}  last-10 mean {last:.4f}  reduction {100 * (1 - last / first):.1f}%"]
    for e in hist.evals:
        lines.append(f"eval step {e['step']:6d}  vq {'on ' if e['vq_active'] else 'off'}  "
                     f"mel {e['mel_distance']:.4f}  util {e['utilization']:.4f}")
    if model.vq_active:
        unit = frame_unit(model)
        seg = np.stack([prepare(model, c)[0][:max(unit, (c.size // unit) * unit)] for c in clips[:8]])
        specs = np.stack([stft(w, model.config.stft) for w in seg])
        with nx.no_grad():
            out = model.forward(specs, model.num_streams, reconstruct=False)
        v = model.config.vq
        for i, c in enumerate(out.codes):
            u = utilization([code_histogram(c, v.product_size, v.codebook_size)], v.codebook_size)
            lines.append(f"stream {i} utilization {u:.4f}")
    return "\n".join(lines) + "\n"


def cmd_encode(args) -> int:
    model = _load_model(args.model)
    n = model.num_streams
    if not 1 <= args.streams <= n:
        raise CliError(f"--streams {args.streams} outside the valid range 1..{n}")
    sr = model.config.stft.sample_rate
    x = _read_audio(args.input, sr)
    if x.size == 0:
        raise CliError(f"{args.input}: empty audio")
    t0 = time.monotonic()
    _, X = prepare(model, x)
    with nx.no_grad():
        payloads, _ = model.encode(X[None], args.streams, reconstruct=False)
    elapsed = time.monotonic() - t0
    size = bitstream.write_esc(args.output, payloads[0])
    duration = x.size / sr
    print(f"wrote {args.output}: {size} bytes, {args.streams} stream(s), "
          f"{bitstream.bitrate(payloads[0], duration):.2f} kbps, encode RTF {duration / elapsed:.2f}")
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.model)
    try:
        data = Path(args.input).read_bytes()
    except OSError as e:
        raise CliError(f"cannot read {args.input}: {e}") from None
    try:
        payload = bitstream.unpack(data, lenient=args.lenient, expected_fingerprint=model.fingerprint,
                                   strict=not args.lenient)
    except bitstream.BitstreamError as e:
        raise CliError(f"{args.input}: {e}", EXIT_DATA) from None
    if payload.product_size != model.config.vq.product_size or payload.num_streams > model.num_streams:
        raise CliError(f"{args.input}: payload layout does not fit this model", EXIT_DATA)
    t0 = time.monotonic()
    try:
        with nx.no_grad():
            X_hat = model.decode(payload)
            x_hat = istft(X_hat, model.config.stft).data[0]
    except ValueError as e:
        raise CliError(f"{args.input}: {e}", EXIT_DATA) from None
    elapsed = time.monotonic() - t0
    write_wav(args.output, x_hat, model.config.stft.sample_rate)
    duration = x_hat.size / model.config.stft.sample_rate
    print(f"wrote {args.output}: {duration:.3f} s from {payload.num_streams} stream(s), decode RTF {duration / elapsed:.2f}")
    return EXIT_OK


def evaluate_files(model: CodecModel, clips: list[np.ndarray], streams, scales: MelScaleSet = MelScaleSet()) -> list[dict]:
    """One row per stream count: mel distance, SI-SDR, bitrate, utilization, RTFs."""
    sr = model.config.stft.sample_rate
    v = model.config.vq
    rows = []
    for s in streams:
        mel, sdr, kbps = [], [], []
        hists = [np.zeros((v.product_size, v.codebook_size), dtype=np.int64) for _ in range(s)]
        enc_t = dec_t = audio = 0.0
        for x in clips:
            t0 = time.monotonic()
            xp, X = prepare(model, x)
            with nx.no_grad():
                payloads, _ = model.encode(X[None], s, reconstruct=False)
            t1 = time.monotonic()
            payload = bitstream.unpack(bitstream.pack(payloads[0]))
            t2 = time.monotonic()
            with nx.no_grad():
                x_hat = istft(model.decode(payload), model.config.stft).data[0][:x.size]
            t3 = time.monotonic()
            enc_t += t1 - t0
            dec_t += t3 - t2
            dur = x.size / sr
            audio += dur
            mel.append(mel_distance(x, x_hat, scales, sr))
            sdr.append(si_sdr(x, x_hat) if np.any(x) else float("nan"))
            kbps.append(bitstream.bitrate(payload, xp.size / sr))
            for i in range(s):
                hists[i] += code_histogram(payload.codes[i], v.product_size, v.codebook_size)
        rows.append({"streams": s, "bitrate_kbps": float(np.mean(kbps)), "mel_distance": float(np.mean(mel)),
                     "si_sdr_db": float(np.nanmean(sdr)) if np.any(np.isfinite(sdr)) else float("nan"),
                     "utilization": utilization(hists, v.codebook_size),
                     "encode_rtf": audio / enc_t, "decode_rtf": audio / dec_t})
    return rows


EVAL_COLUMNS = ("streams", "bitrate_kbps", "mel_distance", "si_sdr_db", "utilization", "encode_rtf", "decode_rtf")


def format_table(rows: list[dict]) -> str:
    header = f"{'s':>3} {'kbps':>7} {'mel':>8} {'SI-SDR':>8} {'util':>6} {'enc RTF':>8} {'dec RTF':>8}"
    lines = [header]
    for r in rows:
        lines.append(f"{r['streams']:>3d} {r['bitrate_kbps']:>7.2f} {r['mel_distance']:>8.4f} {r['si_sdr_db']:>8.2f} "
                     f"{r['utilization']:>6.3f} {r['encode_rtf']:>8.2f} {r['decode_rtf']:>8.2f}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    cfg = _load_run_config(args.config) if args.config else RunConfig()
    sr = model.config.stft.sample_rate
    files = _wav_files(args.data_dir)
    if cfg.eval.max_clips:
        files = files[:cfg.eval.max_clips]
    if not files:
        raise CliError(f"empty dataset: no .wav files in {args.data_dir}")
    clips = [_read_audio(str(f), sr) for f in files]
    n = model.num_streams
    if args.streams:
        try:
            streams = [int(s) for s in args.streams.split(",")]
        except ValueError:
            raise CliError(f"--streams expects a comma-separated list, got {args.streams!r}") from None
    else:
        streams = list(cfg.eval.streams) or list(range(1, n + 1))
    bad = [s for s in streams if not 1 <= s <= n]
    if bad:
        raise CliError(f"stream counts {bad} outside the valid range 1..{n}")
    scales = cfg.train.mel_scales
    short = [str(f) for f, c in zip(files, clips) if c.size <= max(scales.windows) // 2]
    if short:
        raise CliError(f"clips shorter than half the largest mel window ({max(scales.windows)}): {short}", EXIT_DATA)
    rows = evaluate_files(model, clips, streams, scales)
    print(format_table(rows), end="")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=EVAL_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]) for k in EVAL_COLUMNS})
    return EXIT_OK


def inspect_report(model: CodecModel) -> str:
    counts = model.module_parameter_counts()
    cfg = model.config
    lines = [f"{name:<16} {count:>12,d}" for name, count in counts.items()]
    lines.append(f"{'total':<16} {sum(counts.values()):>12,d}")
    shapes = cfg.arch.scale_shapes(cfg.stft.freq_bins)
    for i, (k, d) in enumerate(zip(cfg.quantizer_scales(), cfg.quantizer_dims())):
        c, h = shapes[k]
        lines.append(f"Q_{i}: scale {k} (C={c}, H={h})  input dim {d}  "
                     f"{cfg.vq.product_size} x {cfg.vq.codebook_size} codes of dim {cfg.vq.code_dim}")
    lines.append(f"scheme {cfg.vq.scheme}, {model.num_streams} streams, {cfg.codebook_bits} bits per code")
    lines.append(f"fingerprint {model.fingerprint:016x}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    if args.model:
        model = _load_model(args.model)
    else:
        model = CodecModel(_load_run_config(args.config).codec, seed=0)
    print(inspect_report(model), end="")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esc-codec", description="Cross-scale residual VQ speech codec")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key=value config file")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--data-dir", help="directory of 16 kHz mono PCM16 .wav files")
    src.add_argument("--synth", type=int, metavar="N", help="train on N synthetic clips")
    t.add_argument("--synth-seconds", type=float, default=0.5)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override train.total_steps")
    t.add_argument("--pretrain", type=int, help="override train.pretrain_steps")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="wav -> .esc")
    e.add_argument("--model", required=True)
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--out", dest="output", required=True)
    e.add_argument("--streams", type=int, required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help=".esc -> wav")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", dest="output", required=True)
    d.add_argument("--lenient", action="store_true", help="accept truncated files and fingerprint mismatches")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="metrics table per stream count")
    v.add_argument("--model", required=True)
    v.add_argument("--data-dir", required=True)
    v.add_argument("--streams", help="comma-separated stream counts (default: all)")
    v.add_argument("--config", help="config file for eval.* settings")
    v.add_argument("--csv", help="also write the table as CSV")
    v.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="parameter counts, quantizer dims, fingerprint")
    g = i.add_mutually_exclusive_group()
    g.add_argument("--model", help="checkpoint to inspect")
    g.add_argument("--config", help="inspect a freshly built model from a config (default: base)")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
