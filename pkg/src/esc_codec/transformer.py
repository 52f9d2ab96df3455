"""Patch embedding, shifted-window attention blocks and the mirrored
frequency-scaling encoder/decoder stacks.

Feature maps are stored time-major as ``[B, W, H, C]`` (time frames, frequency
rows, channels). In that layout a flattened time frame is a reshape of the
last two axes and frequency (un)shuffling is a reshape of ``(H, C)``. Use
:func:`chw` to report shapes in the conventional ``(C, H, W)`` order.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .nn import LayerNorm, Linear, Module, param
from .numerics import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ArchConfig:
    patch_size: tuple[int, int] = (3, 2)
    layer_dims: tuple[int, ...] = (45, 72, 96, 144, 192, 384)
    heads: tuple[int, ...] = (3, 3, 6, 12, 24, 24)
    depth: int = 2
    scale_factor: int = 2
    window: tuple[int, int] = (4, 8)
    mlp_ratio: float = 4.0
    rel_pos_bias: bool = True
    embed_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(self.patch_size))
        object.__setattr__(self, "layer_dims", tuple(self.layer_dims))
        object.__setattr__(self, "heads", tuple(self.heads))
        object.__setattr__(self, "window", tuple(self.window))
        if len(self.layer_dims) != len(self.heads):
            raise ValueError(f"{len(self.layer_dims)} layer dims but {len(self.heads)} head counts")
        for i, (c, h) in enumerate(zip(self.dims[:-1], self.heads)):
            if c % h:
                raise ValueError(f"layer {i + 1}: blocks of width {c} not divisible by {h} heads")
        if self.depth < 1 or self.scale_factor < 2:
            raise ValueError("depth must be >= 1 and scale_factor >= 2")

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims)

    @property
    def dims(self) -> tuple[int, ...]:
        """``C_0 .. C_n``; ``C_0`` is the patch embedding width."""
        c0 = self.embed_dim if self.embed_dim is not None else (self.layer_dims[0] if self.layer_dims else 16)
        return (c0,) + self.layer_dims

    def patch_grid(self, freq_bins: int) -> int:
        pf = self.patch_size[0]
        if freq_bins % pf:
            raise ValueError(f"F={freq_bins} not divisible by patch height {pf}")
        h0 = freq_bins // pf
        need = self.scale_factor ** self.num_layers
        if h0 % need:
            raise ValueError(f"H_0={h0} must be divisible by {self.scale_factor}^{self.num_layers}={need}")
        return h0

    def scale_shapes(self, freq_bins: int) -> list[tuple[int, int]]:
        """``(C_i, H_i)`` for ``i = 0..n``."""
        h = self.patch_grid(freq_bins)
        out = []
        for i, c in enumerate(self.dims):
            out.append((c, h // self.scale_factor ** i))
        return out


def chw(shape: tuple[int, ...]) -> tuple[int, ...]:
    """``[..., W, H, C]`` -> ``(..., C, H, W)``."""
    *lead, w, h, c = shape
    return (*lead, c, h, w)


# --------------------------------------------------------------------------
# patch embedding


def _patch_tokens(X: Tensor, pf: int, pt: int) -> Tensor:
    b, ch, f, t = X.shape
    if f % pf or t % pt:
        raise ValueError(f"patchify: spectrum {X.shape[1:]} needs F divisible by {pf} and T divisible by {pt}")
    h, w = f // pf, t // pt
    return X.reshape(b, ch, h, pf, w, pt).transpose(0, 4, 2, 1, 3, 5).reshape(b, w, h, ch * pf * pt)


def _patch_untokens(Z: Tensor, pf: int, pt: int, ch: int = 2) -> Tensor:
    b, w, h, _ = Z.shape
    return Z.reshape(b, w, h, ch, pf, pt).transpose(0, 3, 2, 4, 1, 5).reshape(b, ch, h * pf, w * pt)


class PatchEmbed(Module):
    def __init__(self, config: ArchConfig, rng: np.random.Generator):
        pf, pt = config.patch_size
        self.patch_size = (pf, pt)
        self.proj = Linear(2 * pf * pt, config.dims[0], rng)

    def __call__(self, X) -> Tensor:
        """``[B, 2, F, T]`` -> ``[B, T/pt, F/pf, C_0]``."""
        X = nx.as_tensor(X)
        if X.ndim == 3:
            X = X.reshape(1, *X.shape)
        return self.proj(_patch_tokens(X, *self.patch_size))


class PatchUnembed(Module):
    def __init__(self, config: ArchConfig, rng: np.random.Generator):
        pf, pt = config.patch_size
        self.patch_size = (pf, pt)
        self.dim = config.dims[0]
        self.proj = Linear(config.dims[0], 2 * pf * pt, rng)

    def __call__(self, Z: Tensor) -> Tensor:
        if Z.shape[-1] != self.dim:
            raise ValueError(f"depatchify: expected {self.dim} channels at the patch scale, got {Z.shape}")
        return _patch_untokens(self.proj(Z), *self.patch_size)


def patchify(X, embed: PatchEmbed) -> Tensor:
    return embed(X)


def depatchify(Z: Tensor, unembed: PatchUnembed) -> Tensor:
    return unembed(Z)


# --------------------------------------------------------------------------
# window attention


def effective_window(window: tuple[int, int], h: int, w: int, shifted: bool):
    """Clamp the (freq, time) window to the map; shift is half the window
    along axes that hold more than one window, else zero."""
    wh, ww = min(window[0], h), min(window[1], w)
    if not shifted:
        return wh, ww, 0, 0
    sh = wh // 2 if h > wh else 0
    sw = ww // 2 if w > ww else 0
    return wh, ww, sh, sw


@functools.lru_cache(maxsize=128)
def attention_mask(w: int, h: int, ww: int, wh: int, sw: int, sh: int) -> np.ndarray | None:
    """Additive mask ``[num_windows, N, N]`` for the padded, rolled grid.

    Keys that are padding, or that reach across the cyclic wrap, get
    ``MASK_VALUE``; every query may attend to itself. Returns ``None`` when
    nothing is masked.
    """
    wp, hp = -(-w // ww) * ww, -(-h // wh) * wh

    def segments(n, win, shift):
        lab = np.zeros(n, dtype=np.int64)
        if shift:
            lab[n - win:n - shift] = 1
            lab[n - shift:] = 2
        return lab

    la, lb = segments(wp, ww, sw), segments(hp, wh, sh)
    label = la[:, None] * 3 + lb[None, :]
    orig_a = (np.arange(wp) + sw) % wp
    orig_b = (np.arange(hp) + sh) % hp
    valid = (orig_a[:, None] < w) & (orig_b[None, :] < h)
    if valid.all() and not (sw or sh):
        return None

    def part(grid):
        return grid.reshape(wp // ww, ww, hp // wh, wh).transpose(0, 2, 1, 3).reshape(-1, ww * wh)

    lab, val = part(label), part(valid)
    allowed = (lab[:, :, None] == lab[:, None, :]) & val[:, None, :]
    allowed |= np.eye(ww * wh, dtype=bool)[None]
    return np.where(allowed, 0.0, MASK_VALUE)


@functools.lru_cache(maxsize=64)
def relative_position_selector(ww: int, wh: int, cfg_ww: int, cfg_wh: int) -> np.ndarray:
    """One-hot ``[N*N, (2cw-1)(2ch-1)]`` mapping token pairs to bias-table rows."""
    a, b = np.meshgrid(np.arange(ww), np.arange(wh), indexing="ij")
    a, b = a.ravel(), b.ravel()
    da = a[:, None] - a[None, :] + cfg_ww - 1
    db = b[:, None] - b[None, :] + cfg_wh - 1
    idx = (da * (2 * cfg_wh - 1) + db).ravel()
    sel = np.zeros((idx.size, (2 * cfg_ww - 1) * (2 * cfg_wh - 1)))
    sel[np.arange(idx.size), idx] = 1.0
    return sel


def _roll(x: Tensor, shift: int, axis: int) -> Tensor:
    """Cyclic roll by ``-shift`` along ``axis`` (slice + concat)."""
    if shift == 0:
        return x
    n = x.shape[axis]
    shift %= n
    if shift == 0:
        return x
    head = [slice(None)] * x.ndim
    tail = [slice(None)] * x.ndim
    head[axis] = slice(shift, None)
    tail[axis] = slice(0, shift)
    return nx.concat([x[tuple(head)], x[tuple(tail)]], axis=axis)


def _pad_axis(x: Tensor, target: int, axis: int) -> Tensor:
    n = x.shape[axis]
    if target == n:
        return x
    shape = list(x.shape)
    shape[axis] = target - n
    return nx.concat([x, Tensor(np.zeros(shape, dtype=x.dtype))], axis=axis)


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, window: tuple[int, int], rng: np.random.Generator, rel_pos_bias: bool = True):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.window = dim, heads, tuple(window)
        self.qkv = Linear(dim, 3 * dim, rng, std=0.02)
        self.proj = Linear(dim, dim, rng, std=0.02)
        wh, ww = self.window
        self.rel_bias = param(rng.normal(0.0, 0.02, size=((2 * ww - 1) * (2 * wh - 1), heads))) if rel_pos_bias else None

    def __call__(self, x: Tensor, shifted: bool = False, return_probs: bool = False):
        """``[B, W, H, C]`` -> same shape; attention within (shifted) windows."""
        b, w, h, c = x.shape
        wh, ww, sh, sw = effective_window(self.window, h, w, shifted)
        wp, hp = -(-w // ww) * ww, -(-h // wh) * wh
        xp = _pad_axis(_pad_axis(x, wp, 1), hp, 2)
        xp = _roll(_roll(xp, sw, 1), sh, 2)
        na, nb, n = wp // ww, hp // wh, ww * wh
        tokens = xp.reshape(b, na, ww, nb, wh, c).transpose(0, 1, 3, 2, 4, 5).reshape(b * na * nb, n, c)
        out, probs = self._attend(tokens, w, h, ww, wh, sw, sh, b, na * nb)
        out = out.reshape(b, na, nb, ww, wh, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, wp, hp, c)
        out = _roll(_roll(out, wp - sw if sw else 0, 1), hp - sh if sh else 0, 2)
        if wp != w:
            out = out[:, :w]
        if hp != h:
            out = out[:, :, :h]
        return (out, probs) if return_probs else out

    def _attend(self, tokens, w, h, ww, wh, sw, sh, b, nw):
        bn, n, c = tokens.shape
        heads, hd = self.heads, c // self.heads
        qkv = self.qkv(tokens).reshape(bn, n, 3, heads, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nx.matmul(q * (hd ** -0.5), k.transpose(0, 1, 3, 2))  # [bn, heads, n, n]
        bias = None
        if self.rel_bias is not None:
            sel = Tensor(relative_position_selector(ww, wh, self.window[1], self.window[0]).astype(tokens.dtype))
            bias = nx.matmul(sel, self.rel_bias).reshape(n, n, heads).transpose(2, 0, 1)
        mask = attention_mask(w, h, ww, wh, sw, sh)
        if mask is not None:
            # fold the (small) bias into the per-window mask before the one batch-sized add
            mask = Tensor(mask[:, None].astype(tokens.dtype))
            bias = mask if bias is None else bias + mask
            scores = (scores.reshape(b, nw, heads, n, n) + bias).reshape(bn, heads, n, n)
        elif bias is not None:
            scores = scores + bias
        probs = nx.softmax(scores)
        out = nx.matmul(probs, v).transpose(0, 2, 1, 3).reshape(bn, n, c)
        return self.proj(out), probs


def window_attention(Z: Tensor, attn: WindowAttention, shifted: bool = False) -> Tensor:
    return attn(Z, shifted)


class Mlp(Module):
    def __init__(self, dim: int, ratio: float, rng: np.random.Generator):
        hidden = int(round(dim * ratio))
        self.fc1 = Linear(dim, hidden, rng, std=0.02)
        self.fc2 = Linear(hidden, dim, rng, std=0.02)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm attention + MLP with residual adds; one (S)W-MSA stage."""

    def __init__(self, dim: int, heads: int, config: ArchConfig, shifted: bool, rng: np.random.Generator):
        self.shifted = shifted
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, config.window, rng, config.rel_pos_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, config.mlp_ratio, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x), self.shifted)
        return x + self.mlp(self.norm2(x))


class SwinBlock(Module):
    """A W-MSA stage followed by an SW-MSA stage."""

    def __init__(self, dim: int, heads: int, config: ArchConfig, rng: np.random.Generator):
        self.regular = TransformerBlock(dim, heads, config, False, rng)
        self.shifted = TransformerBlock(dim, heads, config, True, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.shifted(self.regular(x))


def swin_block(Z: Tensor, block: SwinBlock) -> Tensor:
    return block(Z)


# --------------------------------------------------------------------------
# frequency resampling


def freq_unshuffle(x: Tensor, v: int) -> Tensor:
    """``[B, W, H, C]`` -> ``[B, W, H/v, v*C]``; row ``j`` of each group of ``v``
    rows lands in channels ``j*C .. (j+1)*C``."""
    b, w, h, c = x.shape
    if h % v:
        raise ValueError(f"downsample: H={h} not divisible by scale factor {v}")
    return x.reshape(b, w, h // v, v * c)


def freq_shuffle(x: Tensor, v: int) -> Tensor:
    """Exact inverse of :func:`freq_unshuffle`."""
    b, w, h, vc = x.shape
    if vc % v:
        raise ValueError(f"upsample: {vc} channels not divisible by scale factor {v}")
    return x.reshape(b, w, h * v, vc // v)


class Downsample(Module):
    def __init__(self, c_in: int, c_out: int, v: int, rng: np.random.Generator):
        self.v = v
        self.proj = Linear(v * c_in, c_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(freq_unshuffle(x, self.v))


class Upsample(Module):
    def __init__(self, c_in: int, c_out: int, v: int, rng: np.random.Generator):
        self.v = v
        self.proj = Linear(c_in, v * c_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return freq_shuffle(self.proj(x), self.v)


def downsample(Z: Tensor, layer: Downsample) -> Tensor:
    return layer(Z)


def upsample(Z: Tensor, layer: Upsample) -> Tensor:
    return layer(Z)


# --------------------------------------------------------------------------
# encoder / decoder stacks


class EncoderLayer(Module):
    """Swin blocks at the incoming scale, then frequency downsampling."""

    def __init__(self, c_in: int, c_out: int, heads: int, config: ArchConfig, rng: np.random.Generator):
        self.blocks = [SwinBlock(c_in, heads, config, rng) for _ in range(config.depth)]
        self.down = Downsample(c_in, c_out, config.scale_factor, rng)

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.down(x)


class DecoderLayer(Module):
    """Frequency upsampling, then Swin blocks at the finer scale (mirror of
    :class:`EncoderLayer`)."""

    def __init__(self, c_in: int, c_out: int, heads: int, config: ArchConfig, rng: np.random.Generator):
        self.up = Upsample(c_in, c_out, config.scale_factor, rng)
        self.blocks = [SwinBlock(c_out, heads, config, rng) for _ in range(config.depth)]
        self.c_in = c_in

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.c_in:
            raise ValueError(f"decoder layer expects {self.c_in} channels, got {x.shape}")
        x = self.up(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class Encoder(Module):
    def __init__(self, config: ArchConfig, rng: np.random.Generator):
        d = config.dims
        self.layers = [EncoderLayer(d[i], d[i + 1], config.heads[i], config, rng) for i in range(config.num_layers)]

    def __call__(self, z0: Tensor) -> list[Tensor]:
        """All intermediate outputs ``[Z_e1, ..., Z_en]``."""
        feats = []
        z = z0
        for layer in self.layers:
            z = layer(z)
            feats.append(z)
        return feats


class Decoder(Module):
    """``layers[i - 1]`` is ``g_i``: maps the scale of ``Z_e(n-i+1)`` to ``Z_e(n-i)``."""

    def __init__(self, config: ArchConfig, rng: np.random.Generator):
        d, n = config.dims, config.num_layers
        self.layers = [DecoderLayer(d[n - i + 1], d[n - i], config.heads[n - i], config, rng) for i in range(1, n + 1)]

    def layer(self, i: int, z: Tensor) -> Tensor:
        if not 1 <= i <= len(self.layers):
            raise IndexError(f"decoder layer {i} out of range 1..{len(self.layers)}")
        return self.layers[i - 1](z)

    def __call__(self, z: Tensor, start: int = 1) -> Tensor:
        for i in range(start, len(self.layers) + 1):
            z = self.layer(i, z)
        return z


def encoder_forward(Z_e0: Tensor, encoder: Encoder) -> list[Tensor]:
    return encoder(Z_e0)


def decoder_layer(i: int, Z: Tensor, decoder: Decoder) -> Tensor:
    return decoder.layer(i, Z)
