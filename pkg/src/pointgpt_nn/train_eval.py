"""Training loops, evaluation metrics and ablation drivers."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import grad as G
from .checkpoint import save_checkpoint
from .errors import ClassMismatch, ConfigError
from .gpt import (GptConfig, GptModel, Sample, argmax_grade, collate, finetune_loss,
                  fusion_feature, make_dual_mask, predict_logits, pretrain_loss)
from .io import read_cloud
from .npe import NpeConfig, pmb_build
from .pc_core import PointCloud, build_patches, morton_order, normalize_unit_sphere

log = logging.getLogger(__name__)

EPOCH_LOG_FIELDS = ("epoch", "lr", "train_loss", "val_oa", "val_macc")
PRETRAIN_LOG_FIELDS = ("epoch", "lr", "train_loss", "extra_mask_ratio")


@dataclass(frozen=True)
class Metrics:
    confusion: np.ndarray  # rows: true class, columns: predicted class

    @classmethod
    def from_predictions(cls, true, pred, num_classes: int) -> "Metrics":
        """Build from 1-based grade arrays."""
        cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(true) - 1, np.asarray(pred) - 1), 1)
        return cls(cm)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def oa(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else 0.0

    @property
    def per_class_recall(self) -> np.ndarray:
        support = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, np.diag(self.confusion) / np.maximum(support, 1), np.nan)

    @property
    def macc(self) -> float:
        r = self.per_class_recall
        r = r[~np.isnan(r)]
        return float(r.mean()) if r.size else 0.0


ROTATIONS = ("none", "vertical", "any")


@dataclass
class Schedule:
    epochs: int = 600
    batch_size: int = 32
    base_lr: float = 1e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    warmup_epochs: int = 0
    gamma: Optional[float] = None
    # augmentation is off unless asked for; see augment_sample
    rotate: str = "none"  # none | vertical | any
    scale_translate: bool = False
    jitter: float = 0.0
    scale_range: tuple = (2.0 / 3.0, 1.5)
    translate_range: float = 0.2

    def __post_init__(self):
        if self.rotate not in ROTATIONS:
            raise ConfigError(f"rotate must be one of {ROTATIONS}, got {self.rotate!r}")
        if self.epochs < 0 or self.batch_size <= 0 or self.base_lr <= 0:
            raise ConfigError("epochs must be >= 0, batch_size and base_lr positive")
        if self.jitter < 0:
            raise ConfigError("jitter must be non-negative")

    @property
    def augments(self) -> bool:
        return self.rotate != "none" or self.scale_translate or self.jitter > 0


# ---------------------------------------------------------------- data

class CloudDataset:
    """Clouds plus memoized patch sets and NPE features.

    Patches depend only on (n_tokens, group_size); NPE features on the NPE
    config and output width. Both are cached so ablations over alpha/beta
    or stage count do not redo the geometry.
    """

    def __init__(self, clouds: Sequence[PointCloud]):
        self.clouds = [normalize_unit_sphere(c) for c in clouds]
        self._patches: dict = {}
        self._features: dict = {}

    @classmethod
    def from_entries(cls, entries) -> "CloudDataset":
        return cls([read_cloud(e.path, label=e.grade) for e in entries])

    def __len__(self):
        return len(self.clouds)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.int64)

    def _patch_set(self, i: int, cfg: GptConfig):
        key = (i, cfg.n_tokens, cfg.group_size)
        if key not in self._patches:
            self._patches[key] = build_patches(self.clouds[i], cfg.n_tokens, cfg.group_size)
        return self._patches[key]

    def global_feature(self, i: int, cfg: GptConfig) -> np.ndarray:
        key = (i, cfg.npe, cfg.d_model)
        if key not in self._features:
            self._features[key] = fusion_feature(self.clouds[i], cfg)
        return self._features[key]

    def samples(self, cfg: GptConfig) -> list:
        with_global = cfg.fusion_mode != "none"
        out = []
        for i, c in enumerate(self.clouds):
            ps = self._patch_set(i, cfg)
            g = self.global_feature(i, cfg) if with_global else None
            out.append(Sample(ps.patches, ps.centers, g, c.label, c.id))
        return out


def vertical_rotation(rng: np.random.Generator) -> np.ndarray:
    t = rng.uniform(0.0, 2.0 * np.pi)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation matrix from a normalized Gaussian quaternion."""
    w, x, y, z = rng.standard_normal(4)
    n = np.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def augment_sample(sample: Sample, rng: np.random.Generator, schedule: Schedule) -> Sample:
    """Transform cached patches and centers, then restore Morton token order.

    Rotation commutes with normalization, FPS and KNN, so a rotated sample
    equals the one built from the rotated cloud. Scale, shift and jitter
    reuse the grouping of the unaugmented cloud. The global feature is left
    unchanged.
    """
    patches, centers = sample.patches, sample.centers
    if schedule.rotate != "none":
        r = vertical_rotation(rng) if schedule.rotate == "vertical" else random_rotation(rng)
        patches, centers = patches @ r.T, centers @ r.T
    if schedule.scale_translate:
        s = rng.uniform(*schedule.scale_range, size=3)
        t = rng.uniform(-schedule.translate_range, schedule.translate_range, size=3)
        patches, centers = patches * s, centers * s + t
    if schedule.jitter:
        patches = patches + schedule.jitter * rng.standard_normal(patches.shape)
    order = morton_order(centers)
    return Sample(patches[order], centers[order], sample.global_feat, sample.label, sample.id)


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


# ---------------------------------------------------------------- evaluation

def predict(model: GptModel, samples: Sequence[Sample], batch_size: int = 64) -> np.ndarray:
    """(N, num_classes) logits under the causal mask."""
    out = []
    for i in range(0, len(samples), batch_size):
        out.append(predict_logits(model, collate(samples[i:i + batch_size], model.config)))
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def evaluate(model: GptModel, samples: Sequence[Sample], batch_size: int = 64) -> Metrics:
    labels = np.array([s.label for s in samples])
    if labels.size and labels.max() > model.config.num_classes:
        raise ClassMismatch(f"grade {labels.max()} exceeds model's {model.config.num_classes} classes")
    pred = argmax_grade(predict(model, samples, batch_size))
    return Metrics.from_predictions(labels, pred, model.config.num_classes)


def attach_memory_bank(model: GptModel, samples: Sequence[Sample]) -> None:
    model.memory_bank = pmb_build([s.global_feat for s in samples], [s.label - 1 for s in samples])


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: GptModel
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_metrics: Optional[Metrics] = None

    def log_csv(self) -> str:
        return rows_to_csv(EPOCH_LOG_FIELDS, self.log)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue()


def train(model: GptModel, train_data: CloudDataset, val_data: CloudDataset, schedule: Schedule,
          seed: int = 0, checkpoint_path=None, on_epoch: Optional[Callable] = None) -> TrainResult:
    """Fine-tune with ``L_d + gamma * L_g`` under dual masking.

    Returns the best-validation-OA model (ties keep the earlier epoch).
    ``epochs == 0`` returns the model untouched with an empty log.
    """
    cfg = model.config
    gamma = cfg.gamma if schedule.gamma is None else schedule.gamma
    train_samples = train_data.samples(cfg)
    val_samples = val_data.samples(cfg)
    if cfg.fusion_mode == "logit_interpolation":
        attach_memory_bank(model, train_samples)
    result = TrainResult(model)
    if schedule.epochs <= 0:
        return result
    steps_per_epoch = -(-len(train_samples) // schedule.batch_size)
    total = schedule.epochs * steps_per_epoch
    warmup = schedule.warmup_epochs * steps_per_epoch
    opt = G.AdamW(model.params, schedule.base_lr, weight_decay=schedule.weight_decay)
    n = cfg.n_tokens
    best_oa, best = -1.0, None
    step = 0
    for epoch in range(1, schedule.epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        epoch_lr = G.cosine_lr(step, total, schedule.base_lr, schedule.min_lr, warmup)
        loss_sum, count = 0.0, 0
        for idx in _batches(len(train_samples), schedule.batch_size, rng):
            items = [train_samples[i] for i in idx]
            if schedule.augments:
                items = [augment_sample(x, rng, schedule) for x in items]
            batch = collate(items, cfg)
            mask = make_dual_mask(n, cfg.extra_mask_ratio, _step_seed(seed, step))
            loss = finetune_loss(model, batch, gamma, mask)
            loss.backward()
            opt.step(G.cosine_lr(step, total, schedule.base_lr, schedule.min_lr, warmup))
            opt.zero_grad()
            loss_sum += float(loss.data) * len(idx)
            count += len(idx)
            step += 1
        m = evaluate(model, val_samples)
        row = {"epoch": epoch, "lr": epoch_lr, "train_loss": loss_sum / count,
               "val_oa": m.oa, "val_macc": m.macc}
        result.log.append(row)
        log.info("epoch %d loss %.5f val_oa %.4f val_macc %.4f", epoch, row["train_loss"], m.oa, m.macc)
        if m.oa > best_oa:
            best_oa, best = m.oa, model.copy()
            result.best_epoch, result.best_metrics = epoch, m
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, best)
        if on_epoch is not None:
            on_epoch(row)
    result.model = best
    return result


def pretrain(model: GptModel, data: CloudDataset, schedule: Schedule, seed: int = 0) -> list:
    """Optimize the generation loss alone. Returns per-epoch log rows."""
    cfg = model.config
    samples = data.samples(cfg)
    if schedule.epochs <= 0:
        return []
    steps_per_epoch = -(-len(samples) // schedule.batch_size)
    total = schedule.epochs * steps_per_epoch
    warmup = schedule.warmup_epochs * steps_per_epoch
    opt = G.AdamW(model.params, schedule.base_lr, weight_decay=schedule.weight_decay)
    rows, step = [], 0
    for epoch in range(1, schedule.epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        epoch_lr = G.cosine_lr(step, total, schedule.base_lr, schedule.min_lr, warmup)
        loss_sum, count = 0.0, 0
        for idx in _batches(len(samples), schedule.batch_size, rng):
            batch = collate([samples[i] for i in idx], cfg)
            mask = make_dual_mask(cfg.n_tokens, cfg.extra_mask_ratio, _step_seed(seed, step))
            loss = pretrain_loss(model, batch, mask)
            loss.backward()
            opt.step(G.cosine_lr(step, total, schedule.base_lr, schedule.min_lr, warmup))
            opt.zero_grad()
            loss_sum += float(loss.data) * len(idx)
            count += len(idx)
            step += 1
        rows.append({"epoch": epoch, "lr": epoch_lr, "train_loss": loss_sum / count,
                     "extra_mask_ratio": cfg.extra_mask_ratio})
        log.info("pretrain epoch %d loss %.5f", epoch, rows[-1]["train_loss"])
    return rows


# ---------------------------------------------------------------- experiments

def run_experiment(cfg: GptConfig, train_data: CloudDataset, val_data: CloudDataset,
                   schedule: Schedule, seed: int = 0) -> Metrics:
    """Fresh model from ``cfg``, trained per ``schedule``; best validation metrics."""
    result = train(GptModel(cfg), train_data, val_data, schedule, seed)
    if result.best_metrics is None:
        return evaluate(result.model, val_data.samples(cfg))
    return result.best_metrics


ALPHA_GRID = (100.0, 500.0, 1000.0, 2000.0, 3000.0)
BETA_GRID = (50.0, 100.0, 200.0, 300.0, 400.0)


def grid_search_alpha_beta(template: GptConfig, train_data, val_data, schedule: Schedule,
                           alphas=ALPHA_GRID, betas=BETA_GRID, seed: int = 0,
                           runner: Callable = run_experiment) -> tuple:
    """Train one model per (alpha, beta).

    Returns ``(raw_rows, summary_rows)``: every combination with its OA and
    mAcc, and per alpha the best OA with the beta that reached it (first
    beta in grid order on ties).
    """
    raw = []
    for a in alphas:
        for b in betas:
            cfg = replace(template, npe=replace(template.npe, alpha=float(a), beta=float(b)))
            m = runner(cfg, train_data, val_data, schedule, seed)
            raw.append({"alpha": float(a), "beta": float(b), "oa": m.oa, "macc": m.macc})
    summary = []
    for a in alphas:
        rows = [r for r in raw if r["alpha"] == float(a)]
        best = max(rows, key=lambda r: r["oa"])  # max keeps the first maximal row
        summary.append({"alpha": float(a), "best_oa": best["oa"], "best_beta": best["beta"]})
    return raw, summary


def stage_ablation(template: GptConfig, train_data, val_data, schedule: Schedule,
                   stages=(1, 2, 3, 4, 5), seed: int = 0, runner: Callable = run_experiment) -> list:
    rows = []
    for s in stages:
        cfg = replace(template, npe=replace(template.npe, stages=int(s)))
        m = runner(cfg, train_data, val_data, schedule, seed)
        rows.append({"stages": int(s), "oa": m.oa, "macc": m.macc, "npe.stages": cfg.npe.stages})
    return rows


def fusion_site(cfg: GptConfig, batch_size: int, mode: str) -> str:
    """Shape of the tensor where the two branches meet, batch first."""
    if mode == "feature_embedding":
        return f"{batch_size}x{cfg.n_tokens}x{cfg.d_model}"
    return f"{batch_size}x{cfg.num_classes}"


def fusion_ablation(template: GptConfig, train_data, val_data, schedule: Schedule,
                    seed: int = 0, runner: Callable = run_experiment) -> list:
    rows = []
    for mode in ("logit_interpolation", "feature_embedding"):
        cfg = replace(template, fusion_mode=mode)
        m = runner(cfg, train_data, val_data, schedule, seed)
        rows.append({"method": mode, "data_dimension": fusion_site(cfg, schedule.batch_size, mode),
                     "oa": m.oa, "macc": m.macc})
    return rows


def write_csv(path, fields, rows, preamble: str = "") -> None:
    """CSV with optional ``# key=value`` comment lines in front."""
    text = "".join(f"# {line}\n" for line in preamble.splitlines()) + rows_to_csv(fields, rows)
    Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- desk-scale benchmark

def tiny_config(num_classes: int = 3, **changes) -> GptConfig:
    """Small model for the synthetic pilling benchmark (D=64, depth 2)."""
    base = dict(n_tokens=32, group_size=16, d_model=64, n_heads=4, extractor_depth=2,
                generator_depth=2, ffn_dim=256, embed_hidden=128, head_hidden=128,
                num_classes=num_classes, lam=3.0,
                npe=NpeConfig(alpha=1000.0, beta=100.0, stages=2, neighbors_per_stage=16))
    base.update(changes)
    return GptConfig(**base)


def tiny_schedule(**changes) -> Schedule:
    base = dict(epochs=50, batch_size=16, base_lr=1e-3, min_lr=1e-6, rotate="any")
    base.update(changes)
    return Schedule(**base)
