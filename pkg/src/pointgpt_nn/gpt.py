"""Autoregressive point-patch transformer with global-feature fusion.

Data flow for one cloud::

    normalize -> build_patches -> PointNet tokens --+
    normalize -> npe_extract (projected to D) ------+-> g + lam * tokens
                                                   -> + APE -> extractor (masked)
                                                   -> mean-pool -> class head
    extractor latent + direction prompts -> generator -> prediction head
                                                   -> Chamfer vs next patch

Blocks are post-norm: attention, residual, LayerNorm, FFN, residual,
LayerNorm. Masks hold 1 where attention is allowed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import grad as G
from .embed import fuse_tensor, padded_ape, pointnet_forward
from .errors import BadLabel, BadRatio, ConfigError, ShapeMismatch, TooFewPatches
from .npe import NpeConfig, PointMemoryBank, logits_interpolate, npe_extract, pmb_classify
from .pc_core import PointCloud, PatchSet, build_patches, normalize_unit_sphere

FUSION_MODES = ("feature_embedding", "logit_interpolation", "none")
MASK_PENALTY = -1e9


@dataclass(frozen=True)
class GptConfig:
    n_tokens: int = 512
    group_size: int = 32
    d_model: int = 384
    n_heads: int = 6
    extractor_depth: int = 12
    generator_depth: int = 4
    ffn_dim: int = 1536
    embed_hidden: int = 128
    head_hidden: int = 512
    num_classes: int = 8
    extra_mask_ratio: float = 0.1
    gamma: float = 1.0
    lam: float = 3.0
    fusion_mode: str = "feature_embedding"
    pooling: str = "max"
    logit_weight: float = 0.5
    pmb_gamma: float = 1000.0
    dtype: str = "float32"
    init_seed: int = 0
    npe: NpeConfig = field(default_factory=NpeConfig)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model < 6:
            raise ConfigError("d_model must be at least 6 for the position encoding")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if not 0.0 <= self.extra_mask_ratio < 1.0:
            raise BadRatio(f"extra_mask_ratio must be in [0, 1), got {self.extra_mask_ratio}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.pooling not in ("mean", "max"):
            raise ConfigError("pooling must be 'mean' or 'max'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if min(self.n_tokens, self.group_size, self.num_classes) <= 0:
            raise ConfigError("n_tokens, group_size and num_classes must be positive")


@dataclass(frozen=True)
class DualMask:
    matrix: np.ndarray
    extra_ratio: float


class GptModel:
    def __init__(self, config: GptConfig, params: Optional[dict] = None):
        self.config = config
        self.params: dict[str, G.Tensor] = params if params is not None else init_params(config)
        self.memory_bank: Optional[PointMemoryBank] = None

    def param_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "GptModel":
        m = GptModel(self.config, {k: G.Tensor(v.data.copy(), requires_grad=True, name=k)
                                   for k, v in self.params.items()})
        m.memory_bank = self.memory_bank
        return m

    def with_config(self, **changes) -> "GptModel":
        """Same parameters under a modified config (shape-affecting fields excluded)."""
        m = self.copy()
        m.config = replace(self.config, **changes)
        return m


def _block_shapes(prefix: str, D: int, F: int) -> dict:
    s = {}
    for n in ("q", "k", "v", "o"):
        s[f"{prefix}.attn.w{n}"] = (D, D)
        s[f"{prefix}.attn.b{n}"] = (D,)
    s[f"{prefix}.ln1.w"] = (D,)
    s[f"{prefix}.ln1.b"] = (D,)
    s[f"{prefix}.ffn.w1"] = (D, F)
    s[f"{prefix}.ffn.b1"] = (F,)
    s[f"{prefix}.ffn.w2"] = (F, D)
    s[f"{prefix}.ffn.b2"] = (D,)
    s[f"{prefix}.ln2.w"] = (D,)
    s[f"{prefix}.ln2.b"] = (D,)
    return s


def param_shapes(cfg: GptConfig) -> dict:
    D = cfg.d_model
    s = {
        "embed.w1": (3, cfg.embed_hidden), "embed.b1": (cfg.embed_hidden,),
        "embed.w2": (cfg.embed_hidden, D), "embed.b2": (D,),
    }
    for i in range(cfg.extractor_depth):
        s.update(_block_shapes(f"extractor.{i}", D, cfg.ffn_dim))
    s["generator.dir.w"] = (3, D)
    for i in range(cfg.generator_depth):
        s.update(_block_shapes(f"generator.{i}", D, cfg.ffn_dim))
    s.update({
        "head.w1": (D, cfg.head_hidden), "head.b1": (cfg.head_hidden,),
        "head.w2": (cfg.head_hidden, 3 * cfg.group_size), "head.b2": (3 * cfg.group_size,),
        "cls.w": (D, cfg.num_classes), "cls.b": (cfg.num_classes,),
    })
    return s


def init_params(cfg: GptConfig) -> dict:
    """Xavier-normal weights, zero biases, unit LayerNorm gains.

    The point-embedding MLP uses He-normal instead: its inputs are small
    center-relative offsets and Xavier leaves the tokens far below the APE.
    """
    rng = np.random.default_rng(cfg.init_seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2 and name.startswith("embed."):
            arr = rng.standard_normal(shape) * math.sqrt(2.0 / shape[0])
        elif len(shape) == 2:
            arr = rng.standard_normal(shape) * math.sqrt(2.0 / (shape[0] + shape[1]))
        elif ".ln" in name and leaf == "w":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        out[name] = G.Tensor(arr.astype(cfg.dtype), requires_grad=True, name=name)
    return out


# ---------------------------------------------------------------- masking

def make_dual_mask(n: int, extra_ratio: float, seed: int = 0) -> DualMask:
    """Causal mask plus, in row i, floor(extra_ratio * i) extra blocked
    columns drawn without replacement from 0..i-1."""
    if n < 1:
        raise ConfigError("mask size must be at least 1")
    if not 0.0 <= extra_ratio < 1.0:
        raise BadRatio(f"extra_ratio must be in [0, 1), got {extra_ratio}")
    m = np.tril(np.ones((n, n), dtype=np.uint8))
    if extra_ratio > 0:
        rng = np.random.default_rng(seed)
        for i in range(1, n):
            c = math.floor(extra_ratio * i)
            if c:
                m[i, rng.choice(i, size=c, replace=False)] = 0
    return DualMask(m, extra_ratio)


def _mask_array(mask) -> np.ndarray:
    return mask.matrix if isinstance(mask, DualMask) else np.asarray(mask)


# ---------------------------------------------------------------- transformer

def _batched(x) -> tuple:
    t = G.as_tensor(x)
    if t.ndim == 2:
        return G.reshape(t, (1,) + t.shape), True
    return t, False


def masked_attention(h: G.Tensor, mask, params: dict, prefix: str, n_heads: int,
                     return_weights: bool = False):
    """Multi-head self-attention with an additive -1e9 penalty where mask == 0.

    ``h`` is (B, n, D); mask is (n, n) or (B, n, n).
    """
    B, n, D = h.shape
    dh = D // n_heads
    m = _mask_array(mask)
    if m.shape[-2:] != (n, n):
        raise ShapeMismatch(f"mask {m.shape} does not match {n} tokens")
    p = lambda s: params[f"{prefix}.attn.{s}"]

    def heads(t):
        return G.transpose(G.reshape(t, (B, n, n_heads, dh)), (0, 2, 1, 3))

    q = heads(G.linear(h, p("wq"), p("bq")))
    k = heads(G.linear(h, p("wk"), p("bk")))
    v = heads(G.linear(h, p("wv"), p("bv")))
    scores = G.scale(G.matmul(q, G.transpose(k)), 1.0 / math.sqrt(dh))
    penalty = (1.0 - m.astype(h.dtype)) * h.dtype.type(MASK_PENALTY)
    if penalty.ndim == 3:
        penalty = penalty[:, None]
    penalty = np.ascontiguousarray(np.broadcast_to(penalty, scores.shape))
    w = G.softmax(G.add(scores, G.Tensor(penalty)))
    o = G.reshape(G.transpose(G.matmul(w, v), (0, 2, 1, 3)), (B, n, D))
    out = G.linear(o, p("wo"), p("bo"))
    return (out, w) if return_weights else out


def transformer_block(h: G.Tensor, mask, params: dict, prefix: str, n_heads: int) -> G.Tensor:
    a = masked_attention(h, mask, params, prefix, n_heads)
    h = G.layer_norm(G.add(h, a), params[f"{prefix}.ln1.w"], params[f"{prefix}.ln1.b"])
    f = G.linear(G.gelu(G.linear(h, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"])),
                 params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])
    return G.layer_norm(G.add(h, f), params[f"{prefix}.ln2.w"], params[f"{prefix}.ln2.b"])


def extractor_forward(model: GptModel, tokens, ape, mask) -> G.Tensor:
    """APE is added once, then ``extractor_depth`` masked blocks."""
    h, squeeze = _batched(tokens)
    a, _ = _batched(G.as_tensor(ape, h))
    h = G.add(h, a)
    for i in range(model.config.extractor_depth):
        h = transformer_block(h, mask, model.params, f"extractor.{i}", model.config.n_heads)
    return G.reshape(h, h.shape[1:]) if squeeze else h


def direction_prompts(centers: np.ndarray) -> np.ndarray:
    """Unit vector from each center to the next; the last row is zero."""
    c = np.asarray(centers, dtype=np.float64)
    d = np.zeros_like(c)
    step = c[..., 1:, :] - c[..., :-1, :]
    norm = np.linalg.norm(step, axis=-1, keepdims=True)
    d[..., :-1, :] = np.divide(step, norm, out=np.zeros_like(step), where=norm > 0)
    return d


def generator_forward(model: GptModel, latent, directions, mask) -> G.Tensor:
    h, squeeze = _batched(latent)
    dirs = np.asarray(directions, dtype=h.dtype).reshape(h.shape[:-1] + (3,))
    h = G.add(h, G.matmul(G.Tensor(dirs), model.params["generator.dir.w"]))
    for i in range(model.config.generator_depth):
        h = transformer_block(h, mask, model.params, f"generator.{i}", model.config.n_heads)
    return G.reshape(h, h.shape[1:]) if squeeze else h


def prediction_head(model: GptModel, point_tokens, k: Optional[int] = None) -> G.Tensor:
    """Two-layer ReLU MLP mapping each token to k points: (..., D) -> (..., k, 3)."""
    p = model.params
    k = model.config.group_size if k is None else k
    if p["head.w2"].shape[1] != 3 * k:
        raise ShapeMismatch(f"prediction head emits {p['head.w2'].shape[1]} values, need {3 * k}")
    t = G.as_tensor(point_tokens, p["head.w1"])
    y = G.linear(G.relu(G.linear(t, p["head.w1"], p["head.b1"])), p["head.w2"], p["head.b2"])
    return G.reshape(y, t.shape[:-1] + (k, 3))


def class_head(model: GptModel, latent: G.Tensor) -> G.Tensor:
    pooled = G.mean(latent, axis=-2) if model.config.pooling == "mean" else G.amax(latent, axis=-2)
    return G.linear(pooled, model.params["cls.w"], model.params["cls.b"])


# ---------------------------------------------------------------- batches

@dataclass
class Sample:
    """A cloud reduced to what the model consumes."""

    patches: np.ndarray      # (n, k, 3), center-relative
    centers: np.ndarray      # (n, 3), Morton order
    global_feat: Optional[np.ndarray]  # (D,) projected NPE feature
    label: Optional[int]     # 1-based grade
    id: str = ""


@dataclass
class Batch:
    patches: np.ndarray
    centers: np.ndarray
    ape: np.ndarray
    directions: np.ndarray
    global_feat: Optional[np.ndarray]
    labels: Optional[np.ndarray]  # 0-based

    @property
    def size(self) -> int:
        return self.patches.shape[0]


def needs_global_feature(cfg: GptConfig) -> bool:
    return cfg.fusion_mode == "feature_embedding"


def fusion_feature(cloud: PointCloud, cfg: GptConfig) -> np.ndarray:
    """Projected NPE feature scaled to unit L2 norm.

    The raw feature's norm grows with the embedding width and would swamp
    the learned tokens; its direction is what carries the geometry.
    """
    v = npe_extract(cloud, cfg.npe, cfg.d_model).values
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def prepare_sample(cloud: PointCloud, cfg: GptConfig, with_global: Optional[bool] = None) -> Sample:
    cloud = normalize_unit_sphere(cloud)
    ps = build_patches(cloud, cfg.n_tokens, cfg.group_size)
    if with_global is None:
        with_global = needs_global_feature(cfg)
    g = fusion_feature(cloud, cfg) if with_global else None
    return Sample(ps.patches, ps.centers, g, cloud.label, cloud.id)


def collate(samples: Sequence[Sample], cfg: GptConfig) -> Batch:
    dt = np.dtype(cfg.dtype)
    patches = np.stack([s.patches for s in samples]).astype(dt)
    centers = np.stack([s.centers for s in samples])
    gf = None
    if all(s.global_feat is not None for s in samples):
        gf = np.stack([s.global_feat for s in samples]).astype(dt)
    labels = None
    if all(s.label is not None for s in samples):
        labels = np.array([s.label for s in samples], dtype=np.int64) - 1
    return Batch(patches, centers.astype(dt), padded_ape(centers, cfg.d_model).astype(dt),
                 direction_prompts(centers).astype(dt), gf, labels)


def batch_from_patchset(ps: PatchSet, cfg: GptConfig, global_feat=None, label=None) -> Batch:
    return collate([Sample(ps.patches, ps.centers, global_feat, label)], cfg)


# ---------------------------------------------------------------- forward & losses

def embed_tokens(model: GptModel, batch: Batch) -> G.Tensor:
    cfg = model.config
    tokens = pointnet_forward(batch.patches, model.params)
    if cfg.fusion_mode == "feature_embedding":
        if batch.global_feat is None:
            raise ShapeMismatch("feature_embedding fusion needs a global feature per sample")
        tokens = fuse_tensor(tokens, batch.global_feat, cfg.lam)
    return tokens


def forward(model: GptModel, batch: Batch, mask=None, generate: bool = False) -> dict:
    """Run the extractor (and optionally generator + head); returns graph tensors."""
    n = batch.patches.shape[1]
    if mask is None:
        mask = make_dual_mask(n, 0.0)
    latent = extractor_forward(model, embed_tokens(model, batch), batch.ape, mask)
    out = {"latent": latent, "logits": class_head(model, latent)}
    if generate:
        gen = generator_forward(model, latent, batch.directions, mask)
        out["pred"] = prediction_head(model, gen)
    return out


def generation_loss(pred: G.Tensor, patches: np.ndarray) -> G.Tensor:
    """Mean Chamfer between the prediction at position i and patch i+1."""
    B, n, k, _ = pred.shape
    if n < 2:
        raise TooFewPatches("generation loss needs at least two patches")
    p = G.reshape(G.slice_(pred, (slice(None), slice(0, n - 1))), (B * (n - 1), k, 3))
    t = np.ascontiguousarray(patches[:, 1:]).reshape(B * (n - 1), patches.shape[2], 3)
    return G.mean(G.chamfer(p, t))


def pretrain_loss(model: GptModel, batch, mask=None) -> G.Tensor:
    if isinstance(batch, PatchSet):
        batch = batch_from_patchset(batch, model.config)
    if batch.patches.shape[1] < 2:
        raise TooFewPatches("generation loss needs at least two patches")
    out = forward(model, batch, mask, generate=True)
    return generation_loss(out["pred"], batch.patches)


def check_labels(labels: np.ndarray, num_classes: int):
    if labels is None or np.any(labels < 0) or np.any(labels >= num_classes):
        raise BadLabel(f"labels must be grades in 1..{num_classes}")


def finetune_loss(model: GptModel, batch: Batch, gamma: Optional[float] = None, mask=None,
                  return_parts: bool = False):
    """Cross-entropy plus ``gamma`` times the generation loss.

    The generator runs only when gamma > 0.
    """
    gamma = model.config.gamma if gamma is None else gamma
    check_labels(batch.labels, model.config.num_classes)
    use_gen = gamma > 0 and batch.patches.shape[1] >= 2
    out = forward(model, batch, mask, generate=use_gen)
    ce = G.cross_entropy(out["logits"], batch.labels)
    if not use_gen:
        return (ce, ce, None) if return_parts else ce
    lg = generation_loss(out["pred"], batch.patches)
    total = G.add(ce, G.scale(lg, gamma))
    return (total, ce, lg) if return_parts else total


def predict_logits(model: GptModel, batch: Batch) -> np.ndarray:
    """Class logits under the plain causal mask, with optional memory-bank fusion."""
    logits = forward(model, batch).get("logits").data.astype(np.float64)
    cfg = model.config
    if cfg.fusion_mode == "logit_interpolation" and model.memory_bank is not None:
        if batch.global_feat is None:
            raise ShapeMismatch("logit interpolation needs per-sample NPE features")
        logits = np.stack([
            logits_interpolate(l, pmb_classify(model.memory_bank, g, cfg.num_classes, cfg.pmb_gamma),
                               cfg.logit_weight)
            for l, g in zip(logits, batch.global_feat)
        ])
    return logits


def argmax_grade(logits: np.ndarray) -> np.ndarray:
    """1-based grade; ties resolve to the smallest class index."""
    return np.argmax(logits, axis=-1) + 1


def classify(model: GptModel, cloud: PointCloud) -> tuple:
    """Logits and predicted grade for one raw cloud."""
    cfg = model.config
    with_global = cfg.fusion_mode != "none" and not (
        cfg.fusion_mode == "logit_interpolation" and model.memory_bank is None)
    sample = prepare_sample(cloud, cfg, with_global=with_global)
    batch = collate([sample], cfg)
    logits = predict_logits(model, batch)[0]
    return logits, int(argmax_grade(logits))
