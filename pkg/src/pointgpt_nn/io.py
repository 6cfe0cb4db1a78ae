"""Readers and writers for ASCII XYZ and PLY point clouds."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError
from .pc_core import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.replace(",", " ").split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) < 3:
                raise FormatError(f"{path}:{lineno}: expected 'x y z'")
            try:
                rows.append([float(v) for v in parts[:3]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no points")
    return np.asarray(rows, dtype=np.float64)


def write_xyz(path, points) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in np.asarray(points, dtype=np.float64).tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def _parse_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise FormatError(f"{path}: not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop name, dtype or list spec)])
    while True:
        line = fh.readline()
        if not line:
            raise FormatError(f"{path}: truncated header")
        words = line.decode("ascii", "replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "format":
            fmt = words[1]
        elif words[0] == "element":
            elements.append((words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before element")
            if words[1] == "list":
                elements[-1][2].append((words[4], ("list", _PLY_TYPES[words[2]], _PLY_TYPES[words[3]])))
            else:
                if words[1] not in _PLY_TYPES:
                    raise FormatError(f"{path}: unknown property type {words[1]}")
                elements[-1][2].append((words[2], _PLY_TYPES[words[1]]))
        elif words[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise FormatError(f"{path}: unsupported format {fmt!r}")
    return fmt, elements


def read_ply(path) -> np.ndarray:
    """Vertex x/y/z of a PLY file as an (N, 3) float64 array."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh, path)
        for name, count, props in elements:
            if name == "vertex":
                break
            if fmt != "ascii":
                raise FormatError(f"{path}: vertex must be the first element in binary PLY")
            for _ in range(count):
                fh.readline()
        else:
            raise FormatError(f"{path}: no vertex element")
        names = [p[0] for p in props]
        if not {"x", "y", "z"} <= set(names):
            raise FormatError(f"{path}: vertex lacks x/y/z")
        if any(isinstance(p[1], tuple) for p in props):
            raise FormatError(f"{path}: list properties on vertices are not supported")
        if fmt == "ascii":
            data = np.loadtxt(fh, dtype=np.float64, max_rows=count, ndmin=2)
            if data.shape[0] != count:
                raise FormatError(f"{path}: expected {count} vertices")
            cols = [names.index(c) for c in "xyz"]
            return data[:, cols]
        endian = "<" if fmt == "binary_little_endian" else ">"
        dtype = np.dtype([(n, endian + t) for n, t in props])
        raw = fh.read(dtype.itemsize * count)
        if len(raw) != dtype.itemsize * count:
            raise FormatError(f"{path}: truncated vertex data")
        rec = np.frombuffer(raw, dtype=dtype, count=count)
        return np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)


def write_ply(path, points, binary: bool = True) -> None:
    """Write x/y/z as 32-bit floats."""
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(pts).tobytes())
        else:
            for x, y, z in pts:
                fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n".encode("ascii"))


def read_cloud(path, label=None) -> PointCloud:
    p = Path(path)
    suffix = p.suffix.lower()
    if suffix == ".ply":
        pts = read_ply(p)
    elif suffix in (".xyz", ".txt"):
        pts = read_xyz(p)
    else:
        raise FormatError(f"{p}: unsupported extension {suffix!r}")
    return PointCloud(pts, label=label, id=p.stem)


def write_cloud(path, cloud_or_points, binary: bool = True) -> None:
    pts = cloud_or_points.points if isinstance(cloud_or_points, PointCloud) else cloud_or_points
    if Path(path).suffix.lower() == ".ply":
        write_ply(path, pts, binary=binary)
    else:
        write_xyz(path, pts)
