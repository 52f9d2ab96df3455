"""Cross-scale residual quantization around the transformer codec.

Stream 0 quantizes the bottleneck encoder feature. Stream ``i >= 1`` quantizes
the residual between the encoder feature at the matching scale and the
current decoder feature, adds it back, and advances one decoder layer. The
RVQ baseline instead stacks every stream on the bottleneck.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .dsp import StftConfig
from .nn import Module
from .numerics import Tensor
from .transformer import ArchConfig, Decoder, Encoder, PatchEmbed, PatchUnembed
from .vq import ProductVQ

SCHEMES = ("csrvq", "rvq")


@dataclass(frozen=True)
class VQConfig:
    product_size: int = 3
    codebook_size: int = 1024
    code_dim: int = 8
    beta: float = 0.25
    frames_per_group: int = 2
    scheme: str = "csrvq"
    num_streams: int | None = None
    loss_space: str = "projected"
    loss_reduction: str = "mean"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown quantization scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")


@dataclass(frozen=True)
class CodecConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    vq: VQConfig = field(default_factory=VQConfig)

    def __post_init__(self):
        self.arch.patch_grid(self.stft.freq_bins)
        n = self.arch.num_layers
        s = self.num_streams
        if self.vq.scheme == "csrvq" and not 1 <= s <= n:
            raise ValueError(f"cross-scale RVQ supports 1..{n} streams for {n} layers, got {s}")
        for i, d in enumerate(self.quantizer_dims()):
            if d % self.vq.product_size:
                raise ValueError(f"quantizer {i}: input dim {d} not divisible by product size {self.vq.product_size}")

    @property
    def num_streams(self) -> int:
        return self.vq.num_streams if self.vq.num_streams is not None else self.arch.num_layers

    @property
    def codebook_bits(self) -> int:
        return int(np.ceil(np.log2(self.vq.codebook_size)))

    def quantizer_scales(self) -> list[int]:
        """Encoder scale index (``k`` in ``Z_ek``) each quantizer works at."""
        n = self.arch.num_layers
        if self.vq.scheme == "rvq":
            return [n] * self.num_streams
        return [n if i == 0 else n - i + 1 for i in range(self.num_streams)]

    def quantizer_dims(self) -> list[int]:
        shapes = self.arch.scale_shapes(self.stft.freq_bins)
        fpg = self.vq.frames_per_group
        return [fpg * shapes[k][0] * shapes[k][1] for k in self.quantizer_scales()]

    def to_dict(self) -> dict:
        d = {"stft": asdict(self.stft), "arch": asdict(self.arch), "vq": asdict(self.vq)}
        for sec in d.values():
            for k, v in sec.items():
                if isinstance(v, tuple):
                    sec[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        arch = {k: tuple(v) if isinstance(v, list) else v for k, v in d.get("arch", {}).items()}
        return cls(StftConfig(**d.get("stft", {})), ArchConfig(**arch), VQConfig(**d.get("vq", {})))

    def canonical(self) -> bytes:
        body = self.to_dict()
        body["quantizer_dims"] = self.quantizer_dims()
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def config_fingerprint(config: CodecConfig) -> int:
    return fnv1a_64(config.canonical())


@dataclass
class EncodedPayload:
    """Codes for one clip: ``codes[stream, group, product_index]``."""

    codes: np.ndarray
    fingerprint: int
    codebook_bits: int
    sample_rate: int = 16000

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 3:
            raise ValueError(f"codes must be [streams, groups, product], got {self.codes.shape}")
        if self.codes.shape[0] < 1:
            raise ValueError("a payload needs at least one stream")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= 1 << self.codebook_bits):
            raise ValueError(f"codes must lie in [0, 2^{self.codebook_bits})")

    @property
    def num_streams(self) -> int:
        return self.codes.shape[0]

    @property
    def frame_groups(self) -> int:
        return self.codes.shape[1]

    @property
    def product_size(self) -> int:
        return self.codes.shape[2]

    @property
    def num_bits(self) -> int:
        return self.codes.size * self.codebook_bits

    def __eq__(self, other) -> bool:
        if not isinstance(other, EncodedPayload):
            return NotImplemented
        return (np.array_equal(self.codes, other.codes) and self.fingerprint == other.fingerprint
                and self.codebook_bits == other.codebook_bits and self.sample_rate == other.sample_rate)


@dataclass
class CodecOutput:
    X_hat: Tensor | None
    vq_loss: Tensor
    codes: list[np.ndarray] | None   # per stream, [B, G, l]
    decoder_inputs: list[Tensor] = field(default_factory=list)  # Z_q0, ..., as fed to g_i
    streams: np.ndarray | None = None


class CodecModel(Module):
    def __init__(self, config: CodecConfig = CodecConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        arch = config.arch
        self.patch = PatchEmbed(arch, rng)
        self.encoder = Encoder(arch, rng)
        self.decoder = Decoder(arch, rng)
        self.unpatch = PatchUnembed(arch, rng)
        v = config.vq
        self.quantizers = [ProductVQ(d, v.product_size, v.codebook_size, v.code_dim, rng, v.beta, v.loss_space,
                                      v.loss_reduction)
                           for d in config.quantizer_dims()]
        self.seed = seed
        self.init_codebooks(seed)

    @property
    def num_streams(self) -> int:
        return self.config.num_streams

    @property
    def vq_active(self) -> bool:
        return all(q.active for q in self.quantizers)

    @property
    def fingerprint(self) -> int:
        return config_fingerprint(self.config)

    @property
    def dtype(self):
        return self.patch.proj.weight.dtype

    def init_codebooks(self, seed: int) -> None:
        for i, q in enumerate(self.quantizers):
            q.init_codebooks(seed, stream=i)

    # ------------------------------------------------------------------
    # frame merging

    def _merge(self, z: Tensor) -> Tensor:
        b, w, h, c = z.shape
        fpg = self.config.vq.frames_per_group
        if w % fpg:
            raise ValueError(f"{w} time frames cannot be grouped in pairs of {fpg}")
        return z.reshape(b * (w // fpg), fpg * h * c)

    def _quantize(self, i: int, z: Tensor):
        b = z.shape[0]
        res = self.quantizers[i](self._merge(z))
        q = res.z_q.reshape(*z.shape)
        per_example = nx.mean(res.loss.reshape(b, -1), axis=1)
        codes = None if res.codes is None else res.codes.reshape(b, -1, res.codes.shape[-1])
        return q, per_example, codes

    def _check_streams(self, streams, batch: int) -> np.ndarray:
        s = np.broadcast_to(np.asarray(streams, dtype=np.int64), (batch,)).copy()
        n = self.num_streams
        if (s < 1).any() or (s > n).any():
            raise ValueError(f"stream count must be in 1..{n}, got {sorted(set(s.tolist()))}")
        return s

    def _prepare(self, X) -> Tensor:
        X = nx.as_tensor(X)
        if X.ndim == 3:
            X = X.reshape(1, *X.shape)
        if X.dtype != self.dtype:
            X = Tensor(X.data.astype(self.dtype))
        t = X.shape[-1]
        pt = self.config.arch.patch_size[1]
        if t % (pt * self.config.vq.frames_per_group):
            raise ValueError(f"T={t} frames: need a multiple of {pt * self.config.vq.frames_per_group} "
                             "(patch width x frames per group)")
        return X

    # ------------------------------------------------------------------
    # forward passes

    def forward(self, X, streams, reconstruct: bool = True) -> CodecOutput:
        """Encode coarse to fine and, when ``reconstruct``, finish decoding.

        ``streams`` is one count for the whole batch or one per example;
        examples with fewer streams see zeroed residuals beyond their count,
        which is exactly the plain decoding path for those layers.
        """
        X = self._prepare(X)
        b = X.shape[0]
        s = self._check_streams(streams, b)
        feats = self.encoder(self.patch(X))
        if self.config.vq.scheme == "rvq":
            return self._forward_rvq(feats, s, reconstruct)
        n = self.config.arch.num_layers
        smax = int(s.max())
        z, loss, c0 = self._quantize(0, feats[-1])
        codes = [c0]
        losses = [loss]
        inputs = [z]
        for i in range(1, smax):
            q, loss_i, ci = self._quantize(i, feats[n - i] - z)
            mask = s > i
            if not mask.all():
                q = q * Tensor(mask.astype(z.dtype).reshape(b, 1, 1, 1))
                loss_i = loss_i * Tensor(mask.astype(z.dtype))
            codes.append(ci)
            losses.append(loss_i)
            if i == smax - 1 and not reconstruct:
                break
            z = self.decoder.layer(i, z + q)
            inputs.append(z)
        X_hat = None
        if reconstruct:
            for i in range(max(smax, 1), n + 1):
                z = self.decoder.layer(i, z)
            X_hat = self.unpatch(z)
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        active = self.vq_active
        return CodecOutput(X_hat, nx.mean(total), codes if active else None, inputs, s)

    def _forward_rvq(self, feats, s, reconstruct) -> CodecOutput:
        b = s.size
        r = feats[-1]
        smax = int(s.max())
        zsum, total, codes = None, None, []
        for i in range(smax):
            q, loss_i, ci = self._quantize(i, r)
            mask = s > i
            if not mask.all():
                q = q * Tensor(mask.astype(r.dtype).reshape(b, 1, 1, 1))
                loss_i = loss_i * Tensor(mask.astype(r.dtype))
            codes.append(ci)
            zsum = q if zsum is None else zsum + q
            total = loss_i if total is None else total + loss_i
            if i < smax - 1:
                r = r - q
        X_hat = self.unpatch(self.decoder(zsum)) if reconstruct else None
        return CodecOutput(X_hat, nx.mean(total), codes if self.vq_active else None, [zsum], s)

    def encode(self, X, num_streams: int, reconstruct: bool = True):
        """Payloads (one per clip) plus the reconstruction and VQ loss."""
        if not self.vq_active:
            raise RuntimeError("no payload can be produced while quantizers are bypassed")
        out = self.forward(X, num_streams, reconstruct)
        stacked = np.stack(out.codes, axis=1)  # [B, s, G, l]
        payloads = [EncodedPayload(stacked[k], self.fingerprint, self.config.codebook_bits,
                                   self.config.stft.sample_rate) for k in range(stacked.shape[0])]
        return payloads, out

    def decode(self, payloads) -> Tensor:
        """Rebuild the spectrum ``[B, 2, F, T]`` from payloads."""
        if isinstance(payloads, EncodedPayload):
            payloads = [payloads]
        fp = self.fingerprint
        s = payloads[0].num_streams
        g = payloads[0].frame_groups
        for p in payloads:
            if p.fingerprint != fp:
                raise ValueError(f"payload fingerprint {p.fingerprint:016x} does not match model {fp:016x}")
            if p.num_streams != s or p.frame_groups != g:
                raise ValueError("payloads in one batch must share stream count and length")
        self._check_streams(s, 1)
        codes = np.stack([p.codes for p in payloads], axis=1)  # [s, B, G, l]
        b = codes.shape[1]
        fpg = self.config.vq.frames_per_group
        shapes = self.config.arch.scale_shapes(self.config.stft.freq_bins)
        scales = self.config.quantizer_scales()
        dt = self.dtype

        def fetch(i):
            c, h = shapes[scales[i]]
            flat = self.quantizers[i].lookup(codes[i].reshape(-1, codes.shape[-1]), dt)
            return flat.reshape(b, g * fpg, h, c)

        if self.config.vq.scheme == "rvq":
            z = fetch(0)
            for i in range(1, s):
                z = z + fetch(i)
            return self.unpatch(self.decoder(z))
        z = fetch(0)
        for i in range(1, s):
            z = self.decoder.layer(i, z + fetch(i))
        for i in range(max(s, 1), self.config.arch.num_layers + 1):
            z = self.decoder.layer(i, z)
        return self.unpatch(z)

    def bottleneck_vq(self, X):
        """Plain fixed-scale VQ at the bottleneck, decoded without residuals."""
        X = self._prepare(X)
        feats = self.encoder(self.patch(X))
        q, loss, codes = self._quantize(0, feats[-1])
        return codes, self.unpatch(self.decoder(q))

    def module_parameter_counts(self) -> dict[str, int]:
        counts = {"patchify": self.patch.num_parameters(), "encoder": self.encoder.num_parameters(),
                  "decoder": self.decoder.num_parameters(), "depatchify": self.unpatch.num_parameters()}
        for i, q in enumerate(self.quantizers):
            counts[f"quantizer.{i}"] = q.num_parameters()
        return counts


def encode(model: CodecModel, X, s: int):
    return model.encode(X, s)


def decode(payload, model: CodecModel) -> Tensor:
    return model.decode(payload)


def rvq_encode(model: CodecModel, X, s: int):
    if model.config.vq.scheme != "rvq":
        raise ValueError("model was not built with the RVQ baseline scheme")
    return model.encode(X, s)


def rvq_decode(payload, model: CodecModel) -> Tensor:
    if model.config.vq.scheme != "rvq":
        raise ValueError("model was not built with the RVQ baseline scheme")
    return model.decode(payload)


def sample_streams(n: int, p: float, rng: np.random.Generator, size: int | None = None):
    """With probability ``p`` draw uniformly from ``1..n``, otherwise ``n``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout rate must be in [0, 1], got {p}")
    shape = () if size is None else (size,)
    drop = rng.random(shape) < p
    uniform = rng.integers(1, n + 1, size=shape)
    out = np.where(drop, uniform, n)
    return int(out) if size is None else out.astype(np.int64)


def set_bypass(model: CodecModel, bypassed: bool) -> None:
    """Bypassed quantizers pass features through untouched and emit no codes."""
    for q in model.quantizers:
        q.active = not bypassed
