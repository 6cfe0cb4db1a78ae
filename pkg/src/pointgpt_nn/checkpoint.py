"""Checkpoint container and canonical config text.

Layout (all integers little-endian)::

    b"PGPTNN\\x00\\x01"            magic
    u32 version
    u32 len, utf-8 config text   canonical "key=value" lines, sorted
    u32 tensor count
    per tensor: u32 len, utf-8 name, 2-byte dtype tag (b"f4"/b"f8"),
                u32 ndim, ndim x u32 shape, raw little-endian values
"""
from __future__ import annotations

import dataclasses
import struct
from typing import BinaryIO, Iterable

import numpy as np

from . import grad as G
from .errors import ConfigError, FormatError
from .gpt import GptConfig, GptModel
from .npe import NpeConfig

MAGIC = b"PGPTNN\x00\x01"
VERSION = 1
PRETRAINED_PREFIXES = ("embed.", "extractor.")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str, typ):
    if typ in (int, "int"):
        return int(text)
    if typ in (float, "float"):
        return float(text)
    if typ in (bool, "bool"):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1", "yes")
    return text


def flatten_config(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(flatten_config(v, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = v
    return out


def config_to_text(cfg: GptConfig) -> str:
    flat = flatten_config(cfg)
    return "".join(f"{k}={format_value(flat[k])}\n" for k in sorted(flat))


def parse_kv_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _build(cls, values: dict, prefix: str = ""):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if dataclasses.is_dataclass(f.type) or f.type in ("NpeConfig",):
            kwargs[f.name] = _build(NpeConfig, values, key + ".")
        elif key in values:
            raw = values[key]
            kwargs[f.name] = parse_value(raw, f.type) if isinstance(raw, str) else raw
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_from_dict(values: dict) -> GptConfig:
    known = set(flatten_config(GptConfig()))
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return _build(GptConfig, values)


def config_from_text(text: str) -> GptConfig:
    return config_from_dict(parse_kv_text(text))


def write_tensor_block(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tag = {np.dtype("float32"): b"f4", np.dtype("float64"): b"f8"}.get(arr.dtype)
    if tag is None:
        raise FormatError(f"tensor {name}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)) + raw + tag)
    fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise FormatError("truncated checkpoint")
    return b


def read_tensor_block(fh: BinaryIO) -> tuple:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    tag = _read_exact(fh, 2)
    if tag not in (b"f4", b"f8"):
        raise FormatError(f"tensor {name}: unknown dtype tag {tag!r}")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    dt = np.dtype("<" + tag.decode())
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(fh, dt.itemsize * count), dtype=dt).reshape(shape)
    return name, arr.astype(dt.newbyteorder("="))


def save_checkpoint(path, model: GptModel) -> None:
    text = config_to_text(model.config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(text)))
        fh.write(text)
        names = sorted(model.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            write_tensor_block(fh, name, model.params[name].data)


def read_checkpoint(path) -> tuple:
    """Return (config, {name: ndarray})."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{path}: not a checkpoint")
        version, n = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        cfg = config_from_text(_read_exact(fh, n).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = dict(read_tensor_block(fh) for _ in range(count))
    return cfg, tensors


def load_checkpoint(path) -> GptModel:
    cfg, tensors = read_checkpoint(path)
    params = {k: G.Tensor(v.copy(), requires_grad=True, name=k) for k, v in tensors.items()}
    return GptModel(cfg, params)


def load_pretrained(model: GptModel, path, prefixes: Iterable[str] = PRETRAINED_PREFIXES) -> list:
    """Copy matching parameters (embedding + extractor by default) into ``model``.

    Returns the restored names; raises if a shape disagrees.
    """
    _, tensors = read_checkpoint(path)
    restored = []
    for name, arr in tensors.items():
        if not name.startswith(tuple(prefixes)) or name not in model.params:
            continue
        dst = model.params[name]
        if dst.shape != arr.shape:
            raise ConfigError(f"pretrained {name} has shape {arr.shape}, model expects {dst.shape}")
        dst.data = arr.astype(dst.dtype)
        restored.append(name)
    return sorted(restored)
