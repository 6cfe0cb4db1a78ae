"""Point-cloud geometry: downsampling, normalization, FPS, KNN, Morton
ordering, patch construction and Chamfer distance.

All functions are pure. Ties are always broken towards the smallest
original index.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DegenerateCloud, EmptySet, InvalidCount, TooFewPoints, DataError
from .kernels import backend as _k

MORTON_MAX_BITS = 21


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    label: Optional[int] = None
    id: str = ""

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError(f"cloud {self.id!r} has non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class PatchSet:
    """Morton-sorted centers and their center-relative k-neighbourhoods.

    ``center_indices`` are indices into the source cloud; ``patches`` has
    shape (n, k, 3).
    """

    centers: np.ndarray
    patches: np.ndarray
    center_indices: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    @property
    def k(self) -> int:
        return self.patches.shape[1]


@dataclass(frozen=True)
class ChamferLoss:
    l1_term: float
    l2_term: float

    @property
    def total(self) -> float:
        return self.l1_term + self.l2_term


def _require_nonempty(cloud: PointCloud):
    if len(cloud) == 0:
        raise TooFewPoints(f"cloud {cloud.id!r} is empty")


def sample_indices(n_points: int, target_count: int, seed: int) -> np.ndarray:
    """Seeded partial Fisher-Yates: swap position i with a draw from [i, N)."""
    rng = np.random.default_rng(seed)
    draws = rng.integers(np.arange(target_count), n_points)
    perm = np.arange(n_points)
    for i, j in enumerate(draws):
        perm[i], perm[j] = perm[j], perm[i]
    return np.sort(perm[:target_count])


def uniform_downsample(cloud: PointCloud, target_count: int, seed: int = 0) -> PointCloud:
    if target_count <= 0:
        raise InvalidCount("target_count must be positive")
    if len(cloud) < target_count:
        raise TooFewPoints(f"cloud {cloud.id!r} has {len(cloud)} points, need {target_count}")
    idx = sample_indices(len(cloud), target_count, seed)
    return replace(cloud, points=cloud.points[idx])


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1."""
    _require_nonempty(cloud)
    pts = cloud.points - cloud.points.mean(axis=0)
    scale = np.sqrt((pts * pts).sum(axis=1)).max()
    if scale == 0.0:
        warnings.warn(f"cloud {cloud.id!r} is degenerate (all points coincide)", DegenerateCloud)
        return replace(cloud, points=np.zeros_like(pts))
    pts = pts / scale
    # second pass removes the residual centroid drift left by the division
    pts = pts - pts.mean(axis=0)
    pts = pts / np.sqrt((pts * pts).sum(axis=1)).max()
    return replace(cloud, points=pts)


def fps(cloud: PointCloud, n: int, start_index: int = 0) -> np.ndarray:
    N = len(cloud)
    if n <= 0 or n > N:
        raise InvalidCount(f"cannot sample {n} of {N} points")
    if not 0 <= start_index < N:
        raise InvalidCount(f"start_index {start_index} out of range for {N} points")
    return _k.fps(cloud.points, int(n), int(start_index))


def knn(cloud: PointCloud, query, k: int) -> np.ndarray:
    """Indices of the k nearest points to one query (shape (3,)) or to each
    row of a (Q, 3) query array."""
    if k <= 0 or k > len(cloud):
        raise InvalidCount(f"cannot take {k} neighbours of {len(cloud)} points")
    q = np.ascontiguousarray(query, dtype=np.float64)
    single = q.ndim == 1
    out = _k.knn(cloud.points, q.reshape(-1, 3), int(k))
    return out[0] if single else out


def quantize(points, bits_per_axis: int = MORTON_MAX_BITS) -> np.ndarray:
    if not 1 <= bits_per_axis <= MORTON_MAX_BITS:
        raise InvalidCount(f"bits_per_axis must be in 1..{MORTON_MAX_BITS}")
    p = np.clip(np.asarray(points, dtype=np.float64), 0.0, 1.0)
    return np.floor(p * float(2 ** bits_per_axis - 1) + 0.5).astype(np.uint64)


def morton_encode(point, bits_per_axis: int = MORTON_MAX_BITS):
    """Morton code of a point in the unit cube (x at bit 3j, y at 3j+1, z at 3j+2).

    Accepts a single point (returns ``int``) or an (N, 3) array (returns uint64 array).
    """
    p = np.asarray(point, dtype=np.float64)
    q = np.ascontiguousarray(quantize(p.reshape(-1, 3), bits_per_axis))
    codes = _k.morton_interleave(q)
    return int(codes[0]) if p.ndim == 1 else codes


def to_unit_cube(points: np.ndarray) -> np.ndarray:
    """Affine map from the unit ball's bounding box [-1, 1]^3 onto [0, 1]^3."""
    return (np.asarray(points, dtype=np.float64) + 1.0) * 0.5


def morton_order(points: np.ndarray, bits_per_axis: int = MORTON_MAX_BITS) -> np.ndarray:
    """Permutation sorting normalized points by Morton code, ties by index."""
    codes = morton_encode(to_unit_cube(points).reshape(-1, 3), bits_per_axis)
    return np.lexsort((np.arange(len(codes)), codes))


def build_patches(cloud: PointCloud, n: int, k: int,
                  bits_per_axis: int = MORTON_MAX_BITS, start_index: int = 0) -> PatchSet:
    """FPS centers, Morton-sorted, each with its k nearest neighbours
    expressed relative to the center. Patches may overlap."""
    sel = fps(cloud, n, start_index)
    centers = cloud.points[sel]
    order = np.lexsort((sel, morton_encode(to_unit_cube(centers), bits_per_axis)))
    sel = sel[order]
    centers = cloud.points[sel]
    nbr = knn(cloud, centers, k)
    patches = cloud.points[nbr] - centers[:, None, :]
    return PatchSet(centers=centers, patches=patches, center_indices=sel)


def chamfer(predicted, target) -> ChamferLoss:
    P = np.ascontiguousarray(predicted, dtype=np.float64).reshape(-1, 3)
    Q = np.ascontiguousarray(target, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0 or len(Q) == 0:
        raise EmptySet("chamfer needs two non-empty point sets")
    dpq, _ = _k.nearest_sq(P[None], Q[None])
    dqp, _ = _k.nearest_sq(Q[None], P[None])
    l1 = float(np.sqrt(dpq).mean() + np.sqrt(dqp).mean())
    l2 = float(dpq.mean() + dqp.mean())
    return ChamferLoss(l1, l2)
