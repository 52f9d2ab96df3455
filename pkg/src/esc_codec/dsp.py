"""Spectral analysis/synthesis, mel features, reconstruction losses and metrics.

Arrays carry optional leading batch axes: waveforms are ``[..., N]`` and
complex spectra ``[..., 2, F, T]`` with channel 0 real and channel 1
imaginary. The synthesis and mel paths are built from tape primitives so
reconstruction losses differentiate through them.
"""

from __future__ import annotations

import functools
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    win_length: int = 320
    hop_length: int = 80
    n_fft: int = 382
    window: str = "hann"

    def __post_init__(self):
        if self.n_fft < self.win_length:
            raise ValueError(f"n_fft {self.n_fft} < win_length {self.win_length}")
        if self.win_length % self.hop_length:
            raise ValueError(f"hop_length {self.hop_length} must divide win_length {self.win_length}")
        if self.n_fft % 2:
            raise ValueError("n_fft must be even")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def freq_bins(self) -> int:
        return self.n_fft // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        return num_samples // self.hop_length


@dataclass(frozen=True)
class MelScaleSet:
    windows: tuple[int, ...] = (32, 64, 128, 256, 512, 1024, 2048)
    n_mels: tuple[int, ...] = (5, 10, 20, 40, 80, 160, 320)
    eps: float = 1e-5

    def __post_init__(self):
        if len(self.windows) != len(self.n_mels) or not self.windows:
            raise ValueError("windows and n_mels must be non-empty and equally long")
        if any(b <= a for a, b in zip(self.windows, self.windows[1:])):
            raise ValueError("mel windows must be strictly increasing")
        for w, m in zip(self.windows, self.n_mels):
            if w % 4:
                raise ValueError(f"mel window {w} must be a multiple of 4 (hop = window/4)")
            if not 0 < m < w // 2 + 1:
                raise ValueError(f"n_mels {m} invalid for window {w}")

    def scales(self) -> list[tuple[int, int, int]]:
        return [(w, w // 4, m) for w, m in zip(self.windows, self.n_mels)]


def hann(length: int) -> np.ndarray:
    """Periodic Hann window."""
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if x.shape[-1] <= pad:
        raise ValueError(f"signal of {x.shape[-1]} samples too short for reflect padding {pad}")
    widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    return np.pad(x, widths, mode="reflect")


def _frames(x: np.ndarray, win: int, hop: int, count: int) -> np.ndarray:
    idx = np.arange(count)[:, None] * hop + np.arange(win)[None, :]
    return x[..., idx]


def stft(waveform: np.ndarray, config: StftConfig = StftConfig(), sample_rate: int | None = None) -> np.ndarray:
    """Centered STFT returning ``[..., 2, F, T]`` with ``T = N // hop``.

    The signal is reflect-padded by ``win_length // 2``; frame ``t`` is centred
    on sample ``t * hop``. The window sits in the middle of the ``n_fft`` frame.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if sample_rate is not None and sample_rate != config.sample_rate:
        raise ValueError(f"sample rate {sample_rate} != configured {config.sample_rate}")
    n = x.shape[-1] if x.ndim else 0
    if n == 0:
        raise ValueError("stft: empty waveform")
    if n < config.win_length:
        raise ValueError(f"stft: need at least {config.win_length} samples, got {n}")
    win, hop, nfft = config.win_length, config.hop_length, config.n_fft
    t = config.num_frames(n)
    frames = _frames(_reflect_pad(x, win // 2), win, hop, t) * hann(win)
    left = (nfft - win) // 2
    widths = [(0, 0)] * (frames.ndim - 1) + [(left, nfft - win - left)]
    spec = np.fft.rfft(np.pad(frames, widths), axis=-1)  # [..., T, F]
    spec = np.swapaxes(spec, -1, -2)
    return np.stack([spec.real, spec.imag], axis=-3)


@functools.lru_cache(maxsize=16)
def _synthesis_basis(config: StftConfig) -> tuple[np.ndarray, np.ndarray]:
    """Windowed inverse real-DFT rows restricted to the window support.

    Returns ``(real_basis, imag_basis)`` of shape ``[F, win]`` such that the
    windowed frame equals ``Re @ real_basis + Im @ imag_basis``; like numpy's
    ``irfft``, the imaginary parts of the DC and Nyquist bins are ignored.
    """
    nfft, win = config.n_fft, config.win_length
    left = (nfft - win) // 2
    fbins = config.freq_bins
    n = np.arange(left, left + win)
    k = np.arange(fbins)[:, None]
    weight = np.full((fbins, 1), 2.0)
    weight[0] = weight[-1] = 1.0
    ang = 2.0 * np.pi * k * n[None, :] / nfft
    w = hann(win)[None, :]
    real = weight * np.cos(ang) / nfft * w
    imag = -weight * np.sin(ang) / nfft * w
    imag[0] = 0.0
    imag[-1] = 0.0
    return real, imag


@functools.lru_cache(maxsize=64)
def _ola_envelope(config: StftConfig, t: int) -> np.ndarray:
    win, hop = config.win_length, config.hop_length
    w2 = hann(win) ** 2
    env = np.zeros((t - 1) * hop + win)
    for i in range(t):
        env[i * hop:i * hop + win] += w2
    env = env[win // 2:win // 2 + t * hop]
    return 1.0 / np.maximum(env, 1e-11)


def istft(spectrum, config: StftConfig = StftConfig()):
    """Inverse of :func:`stft` by windowed overlap-add.

    Accepts a :class:`Tensor` (differentiable) or an ndarray, returning the same
    kind, with ``T * hop`` samples.
    """
    is_array = not isinstance(spectrum, Tensor)
    X = nx.as_tensor(spectrum)
    if X.ndim < 3 or X.shape[-3] != 2 or X.shape[-2] != config.freq_bins:
        raise ValueError(f"istft: expected [..., 2, {config.freq_bins}, T], got {X.shape}")
    t = X.shape[-1]
    if t == 0:
        raise ValueError("istft: spectrum has no frames")
    lead = X.shape[:-3]
    win, hop = config.win_length, config.hop_length
    r = win // hop
    real_b, imag_b = (nx.Tensor(b.astype(X.dtype)) for b in _synthesis_basis(config))
    Xt = X.reshape(-1, 2, config.freq_bins, t).transpose(0, 1, 3, 2)  # [B, 2, T, F]
    frames = nx.matmul(Xt[:, 0], real_b) + nx.matmul(Xt[:, 1], imag_b)  # [B, T, win]
    b = frames.shape[0]
    chunks = frames.reshape(b, t, r, hop)
    total = None
    for c in range(r):
        part = chunks[:, :, c]  # [B, T, hop], lands on blocks c .. c+T-1
        pieces = []
        if c:
            pieces.append(nx.Tensor(np.zeros((b, c, hop), dtype=X.dtype)))
        pieces.append(part)
        if r - 1 - c:
            pieces.append(nx.Tensor(np.zeros((b, r - 1 - c, hop), dtype=X.dtype)))
        shifted = nx.concat(pieces, axis=1) if len(pieces) > 1 else part
        total = shifted if total is None else total + shifted
    flat = total.reshape(b, (t + r - 1) * hop)
    y = flat[:, win // 2:win // 2 + t * hop] * nx.Tensor(_ola_envelope(config, t).astype(X.dtype))
    y = y.reshape(*lead, t * hop)
    return y.data if is_array else y


# --------------------------------------------------------------------------
# mel features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=32)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular HTK-scale filters, shape ``[n_fft // 2 + 1, n_mels]``."""
    fbins = n_fft // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, fbins)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    if (fb.sum(axis=1) <= 0).any():
        raise ValueError(f"mel filterbank with {n_mels} bands on {n_fft}-point FFT has empty filters")
    return np.ascontiguousarray(fb.T)


@functools.lru_cache(maxsize=32)
def _dft_basis(win: int) -> np.ndarray:
    """Windowed forward real DFT as one ``[win, 2 * (win // 2 + 1)]`` matrix."""
    n = np.arange(win)[:, None]
    k = np.arange(win // 2 + 1)[None, :]
    ang = 2.0 * np.pi * n * k / win
    w = hann(win)[:, None]
    return np.concatenate([w * np.cos(ang), -w * np.sin(ang)], axis=1)


def _reflect_pad_tensor(x: Tensor, pad: int) -> Tensor:
    n = x.shape[-1]
    if n <= pad:
        raise ValueError(f"signal of {n} samples too short for reflect padding {pad}")
    left = x[..., pad:0:-1]
    stop = n - 2 - pad
    right = x[..., n - 2:(stop if stop >= 0 else None):-1]
    return nx.concat([left, x, right], axis=-1)


def mel_spectrogram(waveform, window_size: int, hop: int, n_mels: int,
                    sample_rate: int = 16000, eps: float = 1e-5):
    """Log-mel power spectrogram ``[..., n_mels, 1 + N // hop]``.

    Centered, reflect-padded framing with a periodic Hann window;
    ``log(mel_energy + eps)``. Requires ``hop`` to divide ``window_size``.
    """
    is_array = not isinstance(waveform, Tensor)
    x = nx.as_tensor(waveform)
    if window_size % hop:
        raise ValueError(f"hop {hop} must divide window {window_size}")
    if not 0 < n_mels < window_size // 2 + 1:
        raise ValueError(f"n_mels {n_mels} invalid for window {window_size}")
    lead = x.shape[:-1]
    n = x.shape[-1]
    x = x.reshape(-1, n)
    b = x.shape[0]
    frames_n = 1 + n // hop
    r = window_size // hop
    padded = _reflect_pad_tensor(x, window_size // 2)[:, :(frames_n - 1) * hop + window_size]
    blocks = padded.reshape(b, frames_n - 1 + r, hop)
    frames = nx.concat([blocks[:, c:c + frames_n] for c in range(r)], axis=-1)  # [B, T, win]
    spec = nx.matmul(frames, nx.Tensor(_dft_basis(window_size).astype(x.dtype)))
    power = nx.square(spec)
    nb = window_size // 2 + 1
    power = power[..., :nb] + power[..., nb:]
    fb = nx.Tensor(mel_filterbank(sample_rate, window_size, n_mels).astype(x.dtype))
    mel = nx.log(nx.matmul(power, fb) + eps)  # [B, T, M]
    out = mel.transpose(0, 2, 1).reshape(*lead, n_mels, frames_n)
    return out.data if is_array else out


def loss_mel(x, x_hat, scales: MelScaleSet = MelScaleSet(), sample_rate: int = 16000) -> Tensor:
    """Mean over scales of the mean absolute log-mel difference."""
    x, x_hat = nx.as_tensor(x), nx.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"loss_mel: length mismatch {x.shape} vs {x_hat.shape}")
    total = None
    for win, hop, m in scales.scales():
        a = mel_spectrogram(x, win, hop, m, sample_rate, scales.eps)
        b = mel_spectrogram(x_hat, win, hop, m, sample_rate, scales.eps)
        d = nx.mean(nx.abs_(a - b))
        total = d if total is None else total + d
    return total * (1.0 / len(scales.windows))


def mel_distance(x, x_hat, scales: MelScaleSet = MelScaleSet(), sample_rate: int = 16000) -> float:
    with nx.no_grad():
        return float(loss_mel(x, x_hat, scales, sample_rate).data)


def loss_stft(X, X_hat) -> Tensor:
    """Mean squared error over every real/imaginary entry."""
    X, X_hat = nx.as_tensor(X), nx.as_tensor(X_hat)
    if X.shape != X_hat.shape:
        raise ValueError(f"loss_stft: shape mismatch {X.shape} vs {X_hat.shape}")
    return nx.mean(nx.square(X_hat - X))


SI_SDR_CAP = 100.0


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB."""
    s = np.asarray(reference, dtype=np.float64).ravel()
    e = np.asarray(estimate, dtype=np.float64).ravel()
    if s.shape != e.shape:
        raise ValueError(f"si_sdr: length mismatch {s.shape} vs {e.shape}")
    ref_energy = float(s @ s)
    if ref_energy == 0.0:
        raise ValueError("si_sdr: reference is all zeros")
    alpha = float(e @ s) / ref_energy
    target = alpha * s
    resid = target - e
    noise = float(resid @ resid)
    if noise < 1e-12:
        return SI_SDR_CAP
    signal = float(target @ target)
    if signal == 0.0:
        return -SI_SDR_CAP
    return min(SI_SDR_CAP, 10.0 * np.log10(signal / noise))


# --------------------------------------------------------------------------
# WAV I/O


def read_wav(path: str | Path, sample_rate: int = 16000) -> np.ndarray:
    """Read 16-bit mono PCM at ``sample_rate``; anything else is rejected."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit samples")
        if f.getframerate() != sample_rate:
            raise ValueError(f"{path}: expected {sample_rate} Hz, got {f.getframerate()} Hz (no resampling is done)")
        if f.getcomptype() != "NONE":
            raise ValueError(f"{path}: compressed WAV is not supported")
        raw = f.readframes(f.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = 16000) -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64).ravel(), -1.0, 32767 / 32768)
    pcm = np.round(x * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())
