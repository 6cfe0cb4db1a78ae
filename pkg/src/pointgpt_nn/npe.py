"""Non-parametric encoder: trigonometric point embedding, a multi-stage
FPS/KNN/pooling hierarchy that yields one global feature per cloud, and
the similarity-based point memory bank used for logit fusion.

Nothing here is learned; every output is a deterministic function of the
input cloud and the configuration.
"""
from __future__ import annotations

import functools
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionMismatch, EmptyBank, FormatError, LengthMismatch, TooFewPoints
from .pc_core import PointCloud, morton_encode, to_unit_cube
from .kernels import backend as _k


@dataclass(frozen=True)
class NpeConfig:
    alpha: float = 1000.0
    beta: float = 100.0
    initial_dim: int = 72
    stages: int = 2
    neighbors_per_stage: int = 16

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if self.initial_dim <= 0 or self.initial_dim % 6:
            raise ConfigError(f"initial_dim must be a positive multiple of 6, got {self.initial_dim}")
        if not 1 <= self.stages <= 5:
            raise ConfigError(f"stages must be in 1..5, got {self.stages}")
        if self.neighbors_per_stage <= 0:
            raise ConfigError("neighbors_per_stage must be positive")

    @property
    def feature_dim(self) -> int:
        """Width of the pooled feature before projection."""
        return self.initial_dim * 2 ** self.stages


@dataclass(frozen=True)
class GlobalFeature:
    values: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PointMemoryBank:
    features: np.ndarray
    labels: np.ndarray


def pose_embed(points, alpha: float, beta: float, dim: int) -> np.ndarray:
    """Sine/cosine embedding of 3D coordinates.

    For each axis value t and m in [0, dim/6) the axis block holds
    ``sin(alpha*t / beta**(6m/dim))`` at 2m and the cosine at 2m+1; the x, y
    and z blocks are concatenated. Works on (3,) or (..., 3) input.
    """
    if dim <= 0 or dim % 6:
        raise ConfigError(f"embedding width must be a positive multiple of 6, got {dim}")
    p = np.asarray(points, dtype=np.float64)
    feat = dim // 6
    denom = beta ** (6.0 * np.arange(feat) / dim)
    ang = alpha * p[..., :, None] / denom  # (..., 3, feat)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., 3, feat, 2)
    return out.reshape(p.shape[:-1] + (dim,))


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Order independent of input permutation: Morton code, then x, y, z."""
    codes = morton_encode(np.clip(to_unit_cube(points), 0.0, 1.0).reshape(-1, 3))
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0], codes))


@functools.lru_cache(maxsize=32)
def projection_matrix(in_dim: int, out_dim: int) -> np.ndarray:
    """Fixed seed-0 Gaussian projection, scaled to preserve norms on average."""
    rng = np.random.default_rng(0)
    m = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
    m.setflags(write=False)
    return m


def npe_pooled(cloud: PointCloud, config: NpeConfig) -> np.ndarray:
    """Unprojected global feature of width ``config.feature_dim``."""
    pts = cloud.points[canonical_order(cloud.points)]
    feats = pose_embed(pts, config.alpha, config.beta, config.initial_dim)
    for _ in range(config.stages):
        n_keep = len(pts) // 2
        if n_keep == 0:
            raise TooFewPoints(f"cloud {cloud.id!r}: {len(pts)} points cannot be halved again")
        keep = _k.fps(np.ascontiguousarray(pts), n_keep, 0)
        centers = pts[keep]
        k = min(config.neighbors_per_stage, len(pts))
        nbr = _k.knn(np.ascontiguousarray(pts), np.ascontiguousarray(centers), k)
        offsets = pts[nbr] - centers[:, None, :]
        pe = pose_embed(offsets, config.alpha, config.beta, feats.shape[1])
        weighted = (feats[nbr] + pe) * pe
        feats = np.concatenate([weighted.max(axis=1), weighted.mean(axis=1)], axis=1)
        pts = centers
    return feats.max(axis=0) + feats.mean(axis=0)


def npe_extract(cloud: PointCloud, config: NpeConfig = NpeConfig(), out_dim: int = 384) -> GlobalFeature:
    pooled = npe_pooled(cloud, config)
    return GlobalFeature(pooled @ projection_matrix(pooled.shape[0], out_dim))


def pmb_build(features: Sequence, labels: Sequence[int]) -> PointMemoryBank:
    if len(features) != len(labels):
        raise LengthMismatch(f"{len(features)} features vs {len(labels)} labels")
    if len(features) == 0:
        raise EmptyBank("memory bank needs at least one sample")
    F = np.stack([np.asarray(getattr(f, "values", f), dtype=np.float64) for f in features])
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    F = F / np.where(norms > 0, norms, 1.0)
    return PointMemoryBank(F, np.asarray(labels, dtype=np.int64))


def pmb_classify(bank: PointMemoryBank, feature, num_classes: int, gamma: float = 1000.0) -> np.ndarray:
    """Class logits ``sum over rows of class c of exp(-gamma * (1 - cos))``.

    Labels in the bank are 0-based class indices.
    """
    if len(bank.labels) == 0:
        raise EmptyBank("memory bank is empty")
    q = np.asarray(getattr(feature, "values", feature), dtype=np.float64)
    if q.shape != bank.features.shape[1:]:
        raise DimensionMismatch(f"query dim {q.shape} vs bank {bank.features.shape[1:]}")
    norm = np.linalg.norm(q)
    sim = bank.features @ (q / norm if norm > 0 else q)
    w = np.exp(-gamma * (1.0 - sim))
    return np.bincount(bank.labels, weights=w, minlength=num_classes)[:num_classes]


def logits_interpolate(model_logits, pmb_logits, weight: float) -> np.ndarray:
    a = np.asarray(model_logits, dtype=np.float64)
    b = np.asarray(pmb_logits, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"logit shapes {a.shape} and {b.shape} differ")
    return (1.0 - weight) * a + weight * b


# ---------------------------------------------------------------- feature dump
# record: u32 id length, utf-8 id, i32 label (-1 if none), u32 dim, dim x <f4

def write_feature_record(fh: BinaryIO, id: str, label: Optional[int], values) -> None:
    raw_id = id.encode("utf-8")
    vec = np.asarray(values, dtype="<f4").ravel()
    fh.write(struct.pack("<I", len(raw_id)))
    fh.write(raw_id)
    fh.write(struct.pack("<iI", -1 if label is None else int(label), vec.shape[0]))
    fh.write(vec.tobytes())


def read_feature_records(fh: BinaryIO) -> Iterable[tuple]:
    while True:
        head = fh.read(4)
        if not head:
            return
        if len(head) != 4:
            raise FormatError("truncated feature record")
        (n,) = struct.unpack("<I", head)
        raw_id = fh.read(n)
        meta = fh.read(8)
        if len(raw_id) != n or len(meta) != 8:
            raise FormatError("truncated feature record")
        label, dim = struct.unpack("<iI", meta)
        buf = fh.read(4 * dim)
        if len(buf) != 4 * dim:
            raise FormatError("truncated feature vector")
        yield raw_id.decode("utf-8"), (None if label < 0 else label), np.frombuffer(buf, dtype="<f4").copy()
