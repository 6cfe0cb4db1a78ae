"""Patch token embedding, absolute position encoding of patch centers, and
fusion of the global non-parametric feature into the token stream."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import grad as G
from .errors import BadDimension, DimensionMismatch, ShapeMismatch
from .pc_core import PatchSet

APE_MIN_SCALE = 1.0
APE_MAX_SCALE = 1e4


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray
    ape: np.ndarray

    def __post_init__(self):
        if self.tokens.shape != self.ape.shape:
            raise ShapeMismatch(f"tokens {self.tokens.shape} vs ape {self.ape.shape}")

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.shape[1]


def ape_scales(d: int) -> np.ndarray:
    """Geometric divisors from 1 to 1e4, one per sin/cos pair of an axis block."""
    per_axis = d // 6
    if per_axis == 1:
        return np.array([APE_MIN_SCALE])
    return APE_MIN_SCALE * (APE_MAX_SCALE / APE_MIN_SCALE) ** (np.arange(per_axis) / (per_axis - 1))


def ape_encode(centers, d: int) -> np.ndarray:
    """Sinusoidal encoding of (..., 3) centers into (..., d).

    Each axis gets d/3 channels laid out as sin/cos pairs of ``t / scale_j``.
    """
    if d <= 0 or d % 6:
        raise BadDimension(f"APE width must be a positive multiple of 6, got {d}")
    c = np.asarray(centers, dtype=np.float64)
    ang = c[..., :, None] / ape_scales(d)
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(c.shape[:-1] + (d,))


def padded_ape(centers, d: int) -> np.ndarray:
    """APE at the largest multiple of 6 not above ``d``; spare channels are zero."""
    usable = d - d % 6
    if usable <= 0:
        raise BadDimension(f"model width {d} is too small for a position encoding")
    enc = ape_encode(centers, usable)
    if usable == d:
        return enc
    pad = np.zeros(enc.shape[:-1] + (d - usable,))
    return np.concatenate([enc, pad], axis=-1)


def pointnet_forward(patches, params: dict) -> G.Tensor:
    """Shared per-point MLP (3 -> hidden -> D) with max-pool over each patch.

    ``patches`` is (..., k, 3); the result is (..., D).
    """
    x = G.as_tensor(patches, params["embed.w1"])
    if x.shape[-1] != 3 or params["embed.w1"].shape[0] != 3:
        raise ShapeMismatch(f"pointnet expects (..., k, 3) patches, got {x.shape}")
    h = G.relu(G.linear(x, params["embed.w1"], params["embed.b1"]))
    h = G.linear(h, params["embed.w2"], params["embed.b2"])
    return G.amax(h, axis=-2)


def pointnet_embed(patches: PatchSet, params: dict) -> TokenSequence:
    """Token matrix for one PatchSet; APE is filled from the Morton-ordered centers."""
    tokens = pointnet_forward(patches.patches, params).data
    return TokenSequence(tokens, ape_encode(patches.centers, tokens.shape[-1]))


def fuse_features(tokens: TokenSequence, global_feat, lam: float = 3.0) -> TokenSequence:
    """``global_feat + lam * token`` for every row; APE passes through."""
    g = np.asarray(getattr(global_feat, "values", global_feat), dtype=tokens.tokens.dtype)
    if g.shape != (tokens.d,):
        raise DimensionMismatch(f"global feature {g.shape} vs token width {tokens.d}")
    return replace(tokens, tokens=g + lam * tokens.tokens)


def fuse_tensor(tokens: G.Tensor, global_feat, lam: float) -> G.Tensor:
    """Graph version of :func:`fuse_features` for (B, n, D) tokens and (B, D) features."""
    g = G.as_tensor(global_feat, tokens)
    if g.shape != tokens.shape[:-2] + tokens.shape[-1:]:
        raise DimensionMismatch(f"global feature {g.shape} vs tokens {tokens.shape}")
    return G.embedding_add(G.scale(tokens, lam), g)
