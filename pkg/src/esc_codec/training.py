"""Objective, AdamW, the bypass-then-joint schedule and a synthetic corpus."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .csrvq import CodecConfig, CodecModel, sample_streams, set_bypass
from .dsp import MelScaleSet, istft, loss_mel, loss_stft, mel_distance, stft
from .numerics import Tensor
from .vq import code_histogram, utilization


@dataclass(frozen=True)
class TrainConfig:
    lambda_mel: float = 0.25
    lambda_stft: float = 1.0
    beta: float = 0.25
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    dropout_rate: float = 0.75
    total_steps: int = 1000
    pretrain_steps: int = 200
    batch_size: int = 8
    segment_seconds: float = 0.5
    seed: int = 0
    eval_every: int = 100
    eval_clips: int = 16
    mel_windows: tuple[int, ...] = MelScaleSet().windows
    mel_bins: tuple[int, ...] = MelScaleSet().n_mels

    def __post_init__(self):
        if not 0 <= self.pretrain_steps <= self.total_steps:
            raise ValueError(f"need 0 <= pretrain_steps <= total_steps, got {self.pretrain_steps}/{self.total_steps}")
        for name in ("lambda_mel", "lambda_stft", "beta", "learning_rate", "weight_decay", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout_rate must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def mel_scales(self) -> MelScaleSet:
        return MelScaleSet(tuple(self.mel_windows), tuple(self.mel_bins))


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay.

    Parameters whose gradient is absent from a step (no recorded path to the
    loss) are skipped entirely, decay included.
    """

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = dict(named_params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.state = OptimizerState()

    def step(self, grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        st = self.state
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in st.m:
                st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
                st.steps[name] = 0
            st.steps[name] += 1
            t = st.steps[name]
            if self.weight_decay:
                p.data = p.data - (self.lr * self.weight_decay) * p.data
            st.m[name] = b1 * st.m[name] + (1 - b1) * g
            st.v[name] = b2 * st.v[name] + (1 - b2) * g * g
            m_hat = st.m[name] / (1 - b1 ** t)
            v_hat = st.v[name] / (1 - b2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global l2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# --------------------------------------------------------------------------
# objective


@dataclass
class LossTerms:
    total: Tensor
    mel: Tensor
    stft: Tensor
    vq: Tensor | None

    def floats(self) -> dict[str, float]:
        return {"loss": float(self.total.data), "mel": float(self.mel.data), "stft": float(self.stft.data),
                "vq": 0.0 if self.vq is None else float(self.vq.data)}


def total_loss(X, X_hat, x, x_hat, vq_losses, cfg: TrainConfig, sample_rate: int = 16000) -> LossTerms:
    """``lambda_mel * L_mel + lambda_stft * L_stft + sum(vq_losses)``.

    ``vq_losses`` may be a tensor, a list of tensors, or ``None`` (bypass), in
    which case the VQ term is exactly zero.
    """
    mel = loss_mel(x, x_hat, cfg.mel_scales, sample_rate)
    spec = loss_stft(X, X_hat)
    total = mel * cfg.lambda_mel + spec * cfg.lambda_stft
    vq = None
    if vq_losses is not None:
        parts = vq_losses if isinstance(vq_losses, (list, tuple)) else [vq_losses]
        for part in parts:
            vq = part if vq is None else vq + part
        if vq is not None:
            total = total + vq
    return LossTerms(total, mel, spec, vq)


def _stream_histograms(model: CodecModel, codes, streams: np.ndarray) -> list[np.ndarray]:
    hists = []
    v = model.config.vq
    for i, c in enumerate(codes):
        keep = streams > i
        if keep.any():
            hists.append(code_histogram(c[keep], v.product_size, v.codebook_size))
    return hists


def train_step(batch, model: CodecModel, opt: AdamW, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """One optimizer step on ``batch = (waveforms [B, N], spectra [B, 2, F, T])``."""
    x, X = batch
    b = X.shape[0]
    streams = sample_streams(model.num_streams, cfg.dropout_rate, rng, size=b)
    sr = model.config.stft.sample_rate
    with nx.Tape() as tape:
        out = model.forward(X, streams)
        x_hat = istft(out.X_hat, model.config.stft)
        terms = total_loss(X, out.X_hat, x, x_hat, out.vq_loss if model.vq_active else None, cfg, sr)
    record = terms.floats()
    if not np.isfinite(record["loss"]):
        raise FloatingPointError(f"non-finite training loss: {record}")
    named = dict(model.named_parameters())
    by_id = {id(p): k for k, p in named.items()}
    raw = tape.backward(terms.total)
    grads = {by_id[id(t)]: g for t, g in raw.items() if id(t) in by_id}
    record["grad_norm"] = clip_gradients(grads, cfg.grad_clip)
    if not np.isfinite(record["grad_norm"]):
        raise FloatingPointError(f"non-finite gradient norm at loss {record}")
    opt.step(grads)
    record["streams"] = np.bincount(streams, minlength=model.num_streams + 1)[1:]
    if out.codes is not None:
        hists = _stream_histograms(model, out.codes, streams)
        record["utilization"] = utilization(hists, model.config.vq.codebook_size)
    else:
        record["utilization"] = float("nan")
    return record


# --------------------------------------------------------------------------
# data


def synth_corpus(seed: int, num_clips: int, duration: float, sample_rate: int = 16000) -> list[np.ndarray]:
    """Sinusoid mixtures with smooth envelopes and a faint noise floor."""
    if duration < 0.5:
        raise ValueError(f"clip duration must be >= 0.5 s, got {duration}")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    rng = np.random.default_rng(seed)
    clips = []
    for _ in range(num_clips):
        y = np.zeros(n)
        for _ in range(rng.integers(2, 6)):
            f0 = rng.uniform(100.0, 4000.0)
            phase = rng.uniform(0, 2 * np.pi)
            rate = rng.uniform(0.5, 4.0)
            env = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
            y += rng.uniform(0.2, 1.0) * env * np.sin(2 * np.pi * f0 * t + phase)
        y += 0.003 * rng.standard_normal(n)
        clips.append(0.9 * y / np.max(np.abs(y)))
    return clips


def segment_corpus(waveforms, segment_samples: int) -> np.ndarray:
    """Cut clips into non-overlapping segments; a short clip is zero-padded."""
    segs = []
    for w in waveforms:
        w = np.asarray(w, dtype=np.float64)
        if w.size < segment_samples:
            segs.append(np.pad(w, (0, segment_samples - w.size)))
            continue
        for k in range(w.size // segment_samples):
            segs.append(w[k * segment_samples:(k + 1) * segment_samples])
    if not segs:
        raise ValueError("no training segments")
    return np.stack(segs)


def segment_samples(codec: CodecConfig, seconds: float) -> int:
    """Segment length rounded down to a whole number of frame groups."""
    hop = codec.stft.hop_length
    unit = codec.arch.patch_size[1] * codec.vq.frames_per_group
    frames = int(round(seconds * codec.stft.sample_rate)) // hop
    frames -= frames % unit
    if frames < unit:
        raise ValueError(f"segment of {seconds} s is too short for this model")
    return frames * hop


# --------------------------------------------------------------------------
# schedule


@dataclass
class History:
    records: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    activation_step: int | None = None

    def eval_at(self, step: int) -> dict | None:
        for e in self.evals:
            if e["step"] == step:
                return e
        return None

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "phase", "loss", "mel", "stft", "vq", "grad_norm", "utilization", "streams"])
            for r in self.records:
                w.writerow([r["step"], r["phase"], f"{r['loss']:.6g}", f"{r['mel']:.6g}", f"{r['stft']:.6g}",
                            f"{r['vq']:.6g}", f"{r['grad_norm']:.6g}", f"{r['utilization']:.4f}",
                            "|".join(str(int(c)) for c in r["streams"])])

    def write_eval_csv(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "vq_active", "mel_distance", "utilization"])
            for e in self.evals:
                w.writerow([e["step"], int(e["vq_active"]), f"{e['mel_distance']:.6g}", f"{e['utilization']:.4f}"])


def evaluate(model: CodecModel, waveforms: np.ndarray, spectra: np.ndarray, scales: MelScaleSet,
             num_streams: int | None = None, batch_size: int = 8) -> dict:
    """Mean mel distance at ``num_streams`` and code utilization over all streams used."""
    s = model.num_streams if num_streams is None else num_streams
    mel, hists = [], [[] for _ in range(s)]
    with nx.no_grad():
        for k in range(0, len(spectra), batch_size):
            X = spectra[k:k + batch_size]
            out = model.forward(X, s)
            x_hat = istft(out.X_hat, model.config.stft)
            for j in range(X.shape[0]):
                mel.append(mel_distance(waveforms[k + j], x_hat.data[j], scales, model.config.stft.sample_rate))
            if out.codes is not None:
                v = model.config.vq
                for i, c in enumerate(out.codes):
                    hists[i].append(code_histogram(c, v.product_size, v.codebook_size))
    util = float("nan")
    if model.vq_active:
        util = utilization([np.sum(h, axis=0) for h in hists], model.config.vq.codebook_size)
    return {"mel_distance": float(np.mean(mel)), "utilization": util, "vq_active": model.vq_active}


def run_schedule(dataset, cfg: TrainConfig, codec: CodecConfig, model: CodecModel | None = None,
                 eval_set=None, log=None) -> tuple[CodecModel, History]:
    """Bypassed pre-training for ``pretrain_steps``, then joint training.

    Codebooks are (re)initialized exactly once, at the activation boundary.
    The model is evaluated right before and right after activation, every
    ``eval_every`` steps, and at the end.
    """
    codec = replace(codec, vq=replace(codec.vq, beta=cfg.beta))
    if model is None:
        model = CodecModel(codec, seed=cfg.seed)
    seg = segment_samples(codec, cfg.segment_seconds)
    waves = segment_corpus(dataset, seg)
    specs = np.stack([stft(w, codec.stft) for w in waves])
    if eval_set is None:
        eval_w = waves[:cfg.eval_clips]
    else:
        eval_w = segment_corpus(eval_set, seg)[:cfg.eval_clips]
    eval_X = np.stack([stft(w, codec.stft) for w in eval_w])
    scales = cfg.mel_scales
    rng = np.random.default_rng([cfg.seed, 1])
    opt = AdamW(model.named_parameters(), cfg.learning_rate, (cfg.adam_beta1, cfg.adam_beta2),
                cfg.adam_eps, cfg.weight_decay)
    hist = History()

    def snapshot(step):
        e = evaluate(model, eval_w, eval_X, scales)
        e["step"] = step
        hist.evals.append(e)
        if log:
            log(f"eval step {step}: mel {e['mel_distance']:.4f} util {e['utilization']:.4f}")

    set_bypass(model, cfg.pretrain_steps > 0)
    if cfg.pretrain_steps == 0:
        model.init_codebooks(cfg.seed)
        hist.activation_step = 0
    for step in range(cfg.total_steps):
        if step == cfg.pretrain_steps and step > 0:
            snapshot(step)
            set_bypass(model, False)
            model.init_codebooks(cfg.seed)
            hist.activation_step = step
            snapshot(step)
        elif cfg.eval_every and step % cfg.eval_every == 0:
            snapshot(step)
        idx = rng.choice(len(waves), size=min(cfg.batch_size, len(waves)), replace=len(waves) < cfg.batch_size)
        rec = train_step((waves[idx], specs[idx]), model, opt, cfg, rng)
        rec["step"] = step
        rec["phase"] = "joint" if model.vq_active else "pretrain"
        hist.records.append(rec)
        if log and cfg.eval_every and step % cfg.eval_every == 0:
            log(f"step {step} [{rec['phase']}] loss {rec['loss']:.4f} mel {rec['mel']:.4f} vq {rec['vq']:.4f}")
    snapshot(cfg.total_steps)
    return model, hist


# --------------------------------------------------------------------------
# toy recipe


def toy_codec_config() -> CodecConfig:
    """Desk-scale codec: dims (8, 16, 32), one Swin pair per layer, 3 streams of 2 x 4 bits."""
    from .dsp import StftConfig
    from .transformer import ArchConfig
    from .csrvq import VQConfig
    return CodecConfig(StftConfig(), ArchConfig(layer_dims=(8, 16, 32), heads=(2, 2, 4), depth=1),
                       VQConfig(product_size=2, codebook_size=16, code_dim=8, num_streams=3))


def toy_train_config(**overrides) -> TrainConfig:
    base = dict(learning_rate=1e-3, total_steps=2000, pretrain_steps=400, batch_size=8, segment_seconds=0.16,
                eval_every=200, eval_clips=192, mel_windows=(32, 64, 128, 256, 512, 1024),
                mel_bins=(5, 10, 20, 40, 80, 160))
    base.update(overrides)
    return TrainConfig(**base)


def toy_experiment(cfg: TrainConfig | None = None, codec: CodecConfig | None = None, train_clips: int = 64,
                   eval_clips: int = 64, log=None) -> tuple[CodecModel, History]:
    """Train the toy codec on synthetic clips and evaluate on held-out ones.

    Training clips use ``cfg.seed``; evaluation clips use ``cfg.seed + 1000``.
    """
    cfg = toy_train_config() if cfg is None else cfg
    codec = toy_codec_config() if codec is None else codec
    train = synth_corpus(cfg.seed, train_clips, 0.5, codec.stft.sample_rate)
    held_out = synth_corpus(cfg.seed + 1000, eval_clips, 0.5, codec.stft.sample_rate)
    return run_schedule(train, cfg, codec, eval_set=held_out, log=log)
