"""Product vector quantization with factorized, l2-normalized codebooks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .nn import Module, param
from .numerics import Tensor


@dataclass
class QuantResult:
    z_q: Tensor            # [M, d], straight-through attached
    codes: np.ndarray | None  # [M, l] int64, None when bypassed
    loss: Tensor           # [M] per-frame codebook + beta * commitment, averaged over groups


LOSS_REDUCTIONS = ("mean", "sum")


def vq_loss(z_e: Tensor, z_q: Tensor, beta: float = 0.25, reduction: str = "sum") -> Tensor:
    """``||sg(z_e) - z_q||^2 + beta * ||z_e - sg(z_q)||^2`` over the last axis.

    ``reduction="mean"`` divides both squared errors by the vector length
    (an element-wise MSE); ``"sum"`` keeps the plain squared norm.
    """
    if z_e.shape != z_q.shape:
        raise ValueError(f"vq_loss: shapes {z_e.shape} and {z_q.shape} differ")
    if reduction not in LOSS_REDUCTIONS:
        raise ValueError(f"reduction must be one of {LOSS_REDUCTIONS}, got {reduction!r}")
    codebook_term = nx.sum_(nx.square(nx.stop_gradient(z_e) - z_q), axis=-1)
    commit_term = nx.sum_(nx.square(z_e - nx.stop_gradient(z_q)), axis=-1)
    loss = codebook_term + commit_term * beta
    return loss * (1.0 / z_e.shape[-1]) if reduction == "mean" else loss


def ste_passthrough(z_e: Tensor, z_q: Tensor) -> Tensor:
    return nx.straight_through(z_e, z_q)


def nearest_codes(queries: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest row of ``codebook`` for every query.

    ``queries`` is ``[l, M, u]`` and ``codebook`` ``[l, K, u]``; exact ties go to
    the lowest index.
    """
    diff = queries[:, :, None, :] - codebook[:, None, :, :]
    dist = np.einsum("lmku,lmku->lmk", diff, diff)
    return np.argmin(dist, axis=-1)


LOSS_SPACES = ("projected", "normalized")


class ProductVQ(Module):
    """Split a ``d``-vector into ``l`` sub-vectors, each down-projected to ``u``
    dims and matched against its own normalized codebook of ``K`` rows.

    Code selection compares l2-normalized vectors. The raw selected codeword
    is up-projected, with the straight-through estimator applied in the
    projected space so the up-projection keeps receiving reconstruction
    gradients. The codebook/commitment loss compares the projected vector
    with the raw codeword (``loss_space="projected"``) or the two unit
    vectors (``"normalized"``).
    """

    def __init__(self, dim: int, groups: int, codebook_size: int, code_dim: int,
                 rng: np.random.Generator, beta: float = 0.25, loss_space: str = "projected",
                 loss_reduction: str = "mean"):
        if loss_space not in LOSS_SPACES:
            raise ValueError(f"loss_space must be one of {LOSS_SPACES}, got {loss_space!r}")
        if loss_reduction not in LOSS_REDUCTIONS:
            raise ValueError(f"loss_reduction must be one of {LOSS_REDUCTIONS}, got {loss_reduction!r}")
        self.loss_space = loss_space
        self.loss_reduction = loss_reduction
        if dim % groups:
            raise ValueError(f"quantizer dim {dim} not divisible by product size {groups}")
        self.dim, self.groups, self.codebook_size, self.code_dim = dim, groups, codebook_size, code_dim
        self.beta = beta
        self.active = True
        sub = dim // groups
        b_in, b_out = 1.0 / np.sqrt(sub), 1.0 / np.sqrt(code_dim)
        self.w_in = param(rng.uniform(-b_in, b_in, size=(groups, sub, code_dim)))
        self.codebook = param(np.zeros((groups, codebook_size, code_dim)))
        self.w_out = param(rng.uniform(-b_out, b_out, size=(groups, code_dim, sub)))

    @property
    def bits_per_code(self) -> int:
        return int(np.ceil(np.log2(self.codebook_size)))

    def init_codebooks(self, seed: int, stream: int = 0) -> None:
        """Kaiming-normal codewords (std ``sqrt(2/u)``), one seeded stream per group."""
        std = np.sqrt(2.0 / self.code_dim)
        rows = [np.random.default_rng([seed, stream, g]).normal(0.0, std, size=(self.codebook_size, self.code_dim))
                for g in range(self.groups)]
        self.codebook.data = np.stack(rows).astype(self.codebook.dtype)

    def _split(self, z: Tensor) -> Tensor:
        m = z.shape[0]
        return z.reshape(m, self.groups, self.dim // self.groups).transpose(1, 0, 2)

    def _merge(self, parts: Tensor) -> Tensor:
        m = parts.shape[1]
        return parts.transpose(1, 0, 2).reshape(m, self.dim)

    def _onehot(self, codes: np.ndarray, dtype) -> Tensor:
        """``codes`` ``[M, l]`` -> ``[l, M, K]``."""
        oh = np.zeros((self.groups, codes.shape[0], self.codebook_size), dtype=dtype)
        g = np.arange(self.groups)[:, None]
        m = np.arange(codes.shape[0])[None, :]
        oh[g, m, codes.T] = 1.0
        return Tensor(oh)

    def __call__(self, z_e: Tensor) -> QuantResult:
        if z_e.ndim != 2 or z_e.shape[1] != self.dim:
            raise ValueError(f"quantizer expects [M, {self.dim}], got {z_e.shape}")
        if not self.active:
            zero = Tensor(np.zeros(z_e.shape[0], dtype=z_e.dtype))
            return QuantResult(z_e, None, zero)
        e = nx.matmul(self._split(z_e), self.w_in)          # [l, M, u]
        e_n = nx.l2_normalize(e)
        cb_n = nx.l2_normalize(self.codebook)               # [l, K, u]
        codes = nx.freeze_choice(nearest_codes(e_n.data, cb_n.data))  # [l, M]
        onehot = self._onehot(codes.T, z_e.dtype)
        raw = nx.matmul(onehot, self.codebook)
        if self.loss_space == "normalized":
            loss = nx.mean(vq_loss(e_n, nx.matmul(onehot, cb_n), self.beta, self.loss_reduction), axis=0)  # [M]
        else:
            loss = nx.mean(vq_loss(e, raw, self.beta, self.loss_reduction), axis=0)
        q = nx.straight_through(e, raw)
        out = self._merge(nx.matmul(q, self.w_out))
        return QuantResult(out, np.ascontiguousarray(codes.T), loss)

    def lookup(self, codes: np.ndarray, dtype=np.float64) -> Tensor:
        """Codes ``[M, l]`` -> up-projected vectors ``[M, d]``."""
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[1] != self.groups:
            raise ValueError(f"expected codes of shape [M, {self.groups}], got {codes.shape}")
        if codes.size and (codes.min() < 0 or codes.max() >= self.codebook_size):
            raise ValueError(f"code outside [0, {self.codebook_size})")
        raw = nx.matmul(self._onehot(codes, dtype), self.codebook)
        return self._merge(nx.matmul(raw, self.w_out))


def quantize_frame(z_e, pvq: ProductVQ) -> QuantResult:
    """Quantize a single ``d``-vector."""
    z = nx.as_tensor(z_e)
    if z.ndim != 1:
        raise ValueError(f"quantize_frame expects one frame, got shape {z.shape}")
    res = pvq(z.reshape(1, -1))
    codes = None if res.codes is None else res.codes[0]
    return QuantResult(res.z_q.reshape(-1), codes, res.loss.reshape(()) if res.loss.size == 1 else res.loss)


def init_codebooks(pvq: ProductVQ, seed: int, stream: int = 0) -> ProductVQ:
    pvq.init_codebooks(seed, stream)
    return pvq


def code_histogram(codes: np.ndarray, groups: int, codebook_size: int) -> np.ndarray:
    """Per-group counts ``[l, K]`` from codes shaped ``[..., l]``."""
    flat = np.asarray(codes).reshape(-1, groups)
    return np.stack([np.bincount(flat[:, g], minlength=codebook_size) for g in range(groups)])


def utilization(histograms, codebook_size: int) -> float:
    """Summed empirical code entropy over streams and groups, divided by
    ``num_streams * groups * log2(K)``."""
    hists = [np.atleast_2d(np.asarray(h, dtype=np.float64)) for h in histograms]
    if not hists:
        raise ValueError("utilization: no histograms")
    total_bits, slots = 0.0, 0
    for h in hists:
        if h.shape[-1] != codebook_size:
            raise ValueError(f"histogram width {h.shape[-1]} != codebook size {codebook_size}")
        for row in h:
            n = row.sum()
            if n <= 0:
                raise ValueError("utilization: empty histogram")
            p = row[row > 0] / n
            total_bits += float(-(p * np.log2(p)).sum())
            slots += 1
    return total_bits / (slots * np.log2(codebook_size))
