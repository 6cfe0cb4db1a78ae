"""Dataset manifests, stratified splitting, and a synthetic pilling generator."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadGrade, DataError, EmptyClass, FormatError, MissingFile
from .io import read_cloud, write_cloud
from .pc_core import PointCloud

SPLITS = ("train", "val")
TEXTILENET8_COUNTS = {1: 150, 2: 165, 3: 180, 4: 165, 5: 165, 6: 165, 7: 180, 8: 165}


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    grade: int
    split: str


@dataclass
class DatasetManifest:
    entries: list
    num_classes: int = 8
    source: Optional[Path] = None
    class_counts: dict = field(init=False)

    def __post_init__(self):
        self.class_counts = dict(sorted(Counter(e.grade for e in self.entries).items()))

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "grade", "split"])
            for e in self.entries:
                p = e.path
                try:
                    p = p.relative_to(path.parent.resolve())
                except ValueError:
                    pass
                w.writerow([p.as_posix(), e.grade, e.split])


def stratified_split(grades, ratio: float, seed: int) -> list:
    """Per class, shuffle with one seeded generator (classes visited in
    ascending order) and send round(count * ratio) entries to train."""
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    tags = [""] * len(grades)
    for g in sorted(set(grades)):
        idx = [i for i, v in enumerate(grades) if v == g]
        perm = rng.permutation(len(idx))
        n_train = math.floor(len(idx) * ratio + 0.5)
        for rank, j in enumerate(perm):
            tags[idx[j]] = "train" if rank < n_train else "val"
    return tags


def load_manifest(path, split_ratio: float = 0.8, seed: int = 0, num_classes: int = 8,
                  use_file_split: bool = True, validate: bool = True) -> DatasetManifest:
    """Read a ``path,grade,split`` CSV.

    The file's split column is kept when every row carries ``train`` or
    ``val`` and ``use_file_split`` is set; otherwise a stratified seeded split
    is computed. Paths are resolved against the manifest's directory. With
    ``validate`` every file is parsed once.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest {path} does not exist")
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "grade"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: header must contain path,grade[,split]")
        for lineno, row in enumerate(reader, 2):
            try:
                grade = int(row["grade"])
            except (TypeError, ValueError):
                raise BadGrade(f"{path}:{lineno}: grade {row['grade']!r} is not an integer") from None
            if not 1 <= grade <= num_classes:
                raise BadGrade(f"{path}:{lineno}: grade {grade} outside 1..{num_classes}")
            p = Path(row["path"])
            if not p.is_absolute():
                p = (path.parent / p).resolve()
            rows.append((p, grade, (row.get("split") or "").strip().lower()))
    if not rows:
        raise EmptyClass(f"{path}: manifest has no entries")
    present = {g for _, g, _ in rows}
    missing = [g for g in range(1, num_classes + 1) if g not in present]
    if missing:
        raise EmptyClass(f"{path}: no samples for grades {missing}")
    for p, _, _ in rows:
        if not p.is_file():
            raise MissingFile(f"{p} listed in {path} does not exist")
        if validate:
            read_cloud(p)
    if use_file_split and all(s in SPLITS for _, _, s in rows):
        tags = [s for _, _, s in rows]
    else:
        tags = stratified_split([g for _, g, _ in rows], split_ratio, seed)
    entries = [ManifestEntry(p, g, t) for (p, g, _), t in zip(rows, tags)]
    return DatasetManifest(entries, num_classes, path)


# ---------------------------------------------------------------- synthetic data

def random_unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def bumpy_sphere(rng: np.random.Generator, n_points: int = 512, n_bumps: int = 0,
                 bump_radius: float = 0.05, points_per_bump: int = 8, jitter: float = 0.002) -> np.ndarray:
    """Unit sphere carrying ``n_bumps`` hemispherical pills of ``bump_radius``.

    Each pill contributes ``points_per_bump`` points on its outer
    hemisphere; the rest are uniform on the sphere.
    """
    n_bump_pts = min(n_bumps * points_per_bump, n_points)
    base = random_unit_vectors(rng, n_points - n_bump_pts)
    parts = [base]
    if n_bumps:
        anchors = random_unit_vectors(rng, n_bumps)
        dirs = random_unit_vectors(rng, n_bump_pts)
        owner = np.repeat(np.arange(n_bumps), points_per_bump)[:n_bump_pts]
        a = anchors[owner]
        dirs = np.where((dirs * a).sum(1, keepdims=True) < 0, -dirs, dirs)
        parts.append(a + bump_radius * dirs)
    pts = np.concatenate(parts)
    pts = pts + jitter * rng.standard_normal(pts.shape)
    return pts[rng.permutation(len(pts))]


PILLING_LEVELS = {1: 32, 2: 8, 3: 0}  # grade -> pill count; higher grade = less pilling


def synthetic_pilling_clouds(n_per_grade: int, n_points: int = 512, seed: int = 0,
                             levels: Optional[dict] = None) -> list:
    levels = PILLING_LEVELS if levels is None else levels
    rng = np.random.default_rng(seed)
    clouds = []
    for grade in sorted(levels):
        for i in range(n_per_grade):
            pts = bumpy_sphere(rng, n_points, levels[grade])
            clouds.append(PointCloud(pts, label=grade, id=f"g{grade}_{i:04d}"))
    return clouds


def write_synthetic_dataset(out_dir, train_per_grade: int = 100, val_per_grade: int = 20,
                            n_points: int = 512, seed: int = 0, levels: Optional[dict] = None) -> Path:
    """Write PLY clouds under ``out_dir/<grade>/`` plus ``manifest.csv`` with explicit splits."""
    out = Path(out_dir)
    levels = PILLING_LEVELS if levels is None else levels
    clouds = synthetic_pilling_clouds(train_per_grade + val_per_grade, n_points, seed, levels)
    entries = []
    for c in clouds:
        d = out / str(c.label)
        d.mkdir(parents=True, exist_ok=True)
        p = d / f"{c.id}.ply"
        write_cloud(p, c.points)
        idx = int(c.id.rsplit("_", 1)[1])
        entries.append(ManifestEntry(p.resolve(), c.label, "train" if idx < train_per_grade else "val"))
    manifest = DatasetManifest(entries, num_classes=len(levels))
    mpath = out / "manifest.csv"
    manifest.write(mpath)
    return mpath
