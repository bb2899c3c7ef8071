"""Product-quantization codebooks with partial-attention soft quantization.

Shapes used throughout:

* ``z``      embeddings, (N, D) or (D,)
* ``raw``    trainable codebook parameters, (M, K, d) with D = M * d
* scores     attention over codewords, (N, M, K)

Codewords and sub-vectors are l2-normalised inside the forward graph, so the
raw parameters stay unconstrained and still receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .numerics import (ShapeError, StateError, l2_normalize, l2_normalize_backward,
                       softmax_scaled)


def code_bits(K: int) -> int:
    """Bits per sub-codebook index, ``ceil(log2 K)``."""
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    return int(K - 1).bit_length()


@dataclass
class Codebook:
    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 3:
            raise ShapeError(f"codebook must be M x K x d, got shape {self.raw.shape}")
        if self.K < 2:
            raise ValueError("a sub-codebook needs at least two codewords")

    @property
    def M(self) -> int:
        return self.raw.shape[0]

    @property
    def K(self) -> int:
        return self.raw.shape[1]

    @property
    def d(self) -> int:
        return self.raw.shape[2]

    @property
    def D(self) -> int:
        return self.M * self.d

    def effective(self) -> np.ndarray:
        """Unit-norm codewords, (M, K, d)."""
        return l2_normalize(self.raw)

    @classmethod
    def random(cls, M: int, K: int, d: int, rng: np.random.Generator) -> "Codebook":
        return cls(rng.standard_normal((M, K, d)))

    @classmethod
    def kmeans(cls, z: np.ndarray, M: int, K: int, rng: np.random.Generator,
               iters: int = 20) -> "Codebook":
        """Spherical k-means on the normalised sub-vectors of ``z`` (N, D)."""
        sub = l2_normalize(split_embedding(np.atleast_2d(z), M))
        N = sub.shape[0]
        if N < K:
            raise ValueError(f"k-means warm start needs at least K={K} samples, got {N}")
        cents = np.empty((M, K, sub.shape[-1]))
        for m in range(M):
            X = sub[:, m]
            C = X[rng.choice(N, K, replace=False)].copy()
            for _ in range(iters):
                assign = np.argmax(X @ C.T, axis=1)
                for k in range(K):
                    members = X[assign == k]
                    if len(members):
                        C[k] = members.sum(axis=0)
                C = l2_normalize(C)
            cents[m] = C
        return cls(cents)

    def copy(self) -> "Codebook":
        return Codebook(self.raw.copy())


def split_embedding(z: np.ndarray, M: int) -> np.ndarray:
    """View ``z`` (..., D) as (..., M, d) contiguous sub-vectors."""
    z = np.asarray(z, dtype=np.float64)
    D = z.shape[-1]
    if M < 1 or D % M:
        raise ValueError(f"embedding width {D} is not divisible by M={M}")
    return z.reshape(z.shape[:-1] + (M, D // M))


def attention(z_m: np.ndarray, C_m: np.ndarray, alpha: float) -> np.ndarray:
    """Softmax over codewords of ``2 * alpha * <z_m, c_k>``.

    ``z_m`` is (..., d) and ``C_m`` is (K, d); both are expected to be
    normalised already.
    """
    z_m = np.asarray(z_m, dtype=np.float64)
    C_m = np.asarray(C_m, dtype=np.float64)
    if C_m.ndim != 2 or z_m.shape[-1] != C_m.shape[1]:
        raise ShapeError(f"sub-vector width {z_m.shape[-1]} vs codebook shape {C_m.shape}")
    return softmax_scaled(z_m @ C_m.T, 2.0 * alpha)


def topk_mask(p: np.ndarray, kappa: int) -> np.ndarray:
    """Binary mask of the ``kappa`` largest entries along the last axis.

    Ties go to the lower index.
    """
    K = p.shape[-1]
    if not 1 <= kappa <= K:
        raise ValueError(f"kappa must lie in [1, {K}], got {kappa}")
    if kappa == K:
        return np.ones_like(p)
    order = np.argsort(-p, axis=-1, kind="stable")[..., :kappa]
    mask = np.zeros_like(p)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def partial_refine(p: np.ndarray, kappa: int) -> Tuple[np.ndarray, np.ndarray]:
    """Keep the top-``kappa`` scores and renormalise them to sum to one.

    Returns ``(refined, mask)``. With ``kappa == K`` the scores are returned
    untouched.
    """
    p = np.asarray(p, dtype=np.float64)
    mask = topk_mask(p, kappa)
    if kappa == p.shape[-1]:
        return p.copy(), mask
    kept = p * mask
    return kept / kept.sum(axis=-1, keepdims=True), mask


def soft_reconstruct(p: np.ndarray, C_m: np.ndarray) -> np.ndarray:
    """Score-weighted sum of codewords: (..., K) x (K, d) -> (..., d)."""
    return np.asarray(p, dtype=np.float64) @ np.asarray(C_m, dtype=np.float64)


def hard_encode(z: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest codeword (largest inner product) per sub-vector.

    Returns int64 indices of shape (M,) or (N, M); ties go to the lower index.
    """
    sub = l2_normalize(split_embedding(z, codebook.M))
    if sub.shape[-1] != codebook.d:
        raise ShapeError(f"sub-vector width {sub.shape[-1]} != codebook d {codebook.d}")
    sims = np.einsum("...md,mkd->...mk", sub, codebook.effective())
    return np.argmax(sims, axis=-1)


@dataclass
class QuantCache:
    z_sub: np.ndarray      # (N, M, d) raw sub-vectors
    v: np.ndarray          # normalised sub-vectors
    raw: np.ndarray        # codebook parameters at forward time
    C: np.ndarray          # normalised codewords
    p: np.ndarray          # full attention scores
    refined: np.ndarray    # masked + renormalised scores
    mask: np.ndarray
    alpha: float


def soft_quantize(z: np.ndarray, codebook: Codebook, alpha: float,
                  kappa: Optional[int] = None):
    """Soft reconstruction of a batch ``z`` (N, D). Returns ``(z_hat, cache)``.

    ``kappa=None`` means plain soft quantization over all K codewords.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[-1] != codebook.D:
        raise ShapeError(f"embedding width {z.shape[-1]} != codebook width {codebook.D}")
    z_sub = split_embedding(z, codebook.M)
    v = l2_normalize(z_sub)
    C = codebook.effective()
    sims = np.einsum("nmd,mkd->nmk", v, C)
    p = softmax_scaled(sims, 2.0 * alpha)
    if kappa is None:
        refined, mask = p, np.ones_like(p)
    else:
        refined, mask = partial_refine(p, kappa)
    z_hat = np.einsum("nmk,mkd->nmd", refined, C).reshape(z.shape)
    return z_hat, QuantCache(z_sub, v, codebook.raw.copy(), C, p, refined, mask, alpha)


def quant_backward(cache: Optional[QuantCache], grad_zhat: np.ndarray):
    """Gradients ``(d raw codebook, d z)`` given ``dL/dz_hat`` (N, D).

    The mask is a constant. Because the renormalised scores equal a softmax
    restricted to the surviving codewords, the score gradient is formed as
    ``refined * (g - <g, refined>)``, which is exactly zero off the mask.
    """
    if cache is None:
        raise StateError("quant_backward called without a forward cache")
    N, M, d = cache.z_sub.shape
    G = np.asarray(grad_zhat, dtype=np.float64).reshape(N, M, d)
    C, r = cache.C, cache.refined
    g_r = np.einsum("nmd,mkd->nmk", G, C)
    g_C = np.einsum("nmk,nmd->mkd", r, G)
    g_logits = r * (g_r - np.sum(g_r * r, axis=-1, keepdims=True))
    g_sims = 2.0 * cache.alpha * g_logits
    g_v = np.einsum("nmk,mkd->nmd", g_sims, C)
    g_C = g_C + np.einsum("nmk,nmd->mkd", g_sims, cache.v)
    g_raw = l2_normalize_backward(cache.raw, g_C)
    g_z = l2_normalize_backward(cache.z_sub, g_v).reshape(N, M * d)
    return g_raw, g_z


def pack_codes(codes: np.ndarray, K: int) -> bytes:
    """Little-endian bit stream of ``ceil(log2 K)``-bit fields.

    Field ``j`` of the stream (row-major over (N, M)) occupies bits
    ``[j*b, (j+1)*b)``, least significant bit first; the last byte is
    zero-padded.
    """
    b = code_bits(K)
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() >= K):
        raise ValueError(f"code index out of range [0, {K})")
    bits = ((codes[:, None] >> np.arange(b)) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(buf: bytes, n_items: int, M: int, K: int) -> np.ndarray:
    b = code_bits(K)
    total = n_items * M * b
    if len(buf) * 8 < total:
        raise ValueError(f"packed code buffer holds {len(buf) * 8} bits, need {total}")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[:total]
    fields = bits.reshape(-1, b).astype(np.int64) << np.arange(b)
    return fields.sum(axis=1).reshape(n_items, M)
