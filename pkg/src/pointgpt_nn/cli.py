"""Command-line entry point.

Every command resolves a RunConfig (defaults, then ``--config`` file, then
``--set key=value`` overrides, then dedicated flags) before doing any work,
and echoes it as ``# key=value`` lines in front of each CSV it writes.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from .data import DatasetManifest, ManifestEntry, load_manifest, stratified_split, write_synthetic_dataset
from .errors import ConfigError, DataError, MissingFile, PointGptError
from .gpt import GptConfig, GptModel, classify
from .io import read_cloud, write_cloud
from .npe import npe_extract, write_feature_record
from .pc_core import normalize_unit_sphere, uniform_downsample
from .train_eval import (EPOCH_LOG_FIELDS, PRETRAIN_LOG_FIELDS, CloudDataset, Schedule,
                         attach_memory_bank, evaluate, fusion_ablation, grid_search_alpha_beta,
                         pretrain, stage_ablation, train, write_csv)

log = logging.getLogger("pointgpt_nn")

EXIT_CODES = {"config": 2, "data": 3, "runtime": 4}
FUSION_FLAGS = {"feature": "feature_embedding", "logits": "logit_interpolation", "none": "none"}
CLOUD_SUFFIXES = (".ply", ".xyz", ".txt")


@dataclass(frozen=True)
class RunConfig:
    model: GptConfig = field(default_factory=GptConfig)
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0
    threads: int = 1
    points: int = 8192
    split_ratio: float = 0.8

    def to_text(self) -> str:
        lines = [f"model.{line}" for line in ckpt.config_to_text(self.model).splitlines()]
        for f in dataclasses.fields(self.schedule):
            v = getattr(self.schedule, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"train.{f.name}={ckpt.format_value(v)}")
        for name in ("seed", "threads", "points", "split_ratio"):
            lines.append(f"{name}={ckpt.format_value(getattr(self, name))}")
        return "\n".join(sorted(lines)) + "\n"


def _schedule_from(values: dict, base: Schedule) -> Schedule:
    kwargs = {}
    types = {f.name: f.type for f in dataclasses.fields(Schedule)}
    for k, raw in values.items():
        if k not in types:
            raise ConfigError(f"unknown schedule key train.{k}")
        typ = types[k]
        if k == "gamma":
            kwargs[k] = None if raw in ("", "none", "None") else float(raw)
        elif k == "scale_range":
            kwargs[k] = tuple(float(x) for x in raw.split(","))
        else:
            kwargs[k] = ckpt.parse_value(raw, typ)
    return replace(base, **kwargs)


def resolve_config(text_values: dict, base: Optional[RunConfig] = None) -> RunConfig:
    """Merge ``key=value`` strings into ``base``; unknown keys are errors."""
    base = base or RunConfig()
    model_vals, sched_vals, top = {}, {}, {}
    for k, v in text_values.items():
        if k.startswith("model."):
            model_vals[k[len("model."):]] = v
        elif k.startswith("train."):
            sched_vals[k[len("train."):]] = v
        elif k in ("seed", "threads", "points", "split_ratio"):
            top[k] = v
        else:
            raise ConfigError(f"unknown config key {k!r}")
    model = base.model
    if model_vals:
        merged = {k: ckpt.format_value(v) for k, v in ckpt.flatten_config(model).items()}
        merged.update(model_vals)
        model = ckpt.config_from_dict(merged)
    try:
        schedule = _schedule_from(sched_vals, base.schedule)
        run = replace(base, model=model, schedule=schedule,
                      seed=int(top.get("seed", base.seed)),
                      threads=int(top.get("threads", base.threads)),
                      points=int(top.get("points", base.points)),
                      split_ratio=float(top.get("split_ratio", base.split_ratio)))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, PointGptError):
            raise
        raise ConfigError(str(exc)) from None
    if run.threads < 1 or run.points < 1 or not 0.0 < run.split_ratio < 1.0:
        raise ConfigError("threads and points must be positive, split_ratio in (0, 1)")
    return run


FLAG_KEYS = {
    "seed": "seed", "threads": "threads", "lam": "model.lam", "alpha": "model.npe.alpha",
    "beta": "model.npe.beta", "stages": "model.npe.stages", "gamma": "model.gamma",
    "extra_mask_ratio": "model.extra_mask_ratio", "points": "points", "epochs": "train.epochs",
    "batch": "train.batch_size", "lr": "train.base_lr",
}


def run_config_from_args(args) -> RunConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        values.update(ckpt.parse_kv_text(path.read_text(encoding="utf-8")))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for attr, key in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = str(v)
    if getattr(args, "fusion_mode", None):
        values["model.fusion_mode"] = FUSION_FLAGS[args.fusion_mode]
    return resolve_config(values)


# ---------------------------------------------------------------- commands

def _manifest(args, run: RunConfig) -> DatasetManifest:
    return load_manifest(args.manifest, run.split_ratio, run.seed, run.model.num_classes)


def _datasets(args, run: RunConfig):
    m = _manifest(args, run)
    train_set = CloudDataset.from_entries(m.split("train"))
    val_set = CloudDataset.from_entries(m.split("val"))
    if len(train_set) == 0:
        raise DataError("manifest has no training entries")
    return train_set, val_set


def _per_file_seed(seed: int, rel: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(rel.encode("utf-8"))]).generate_state(1)[0])


def cmd_preprocess(args, run: RunConfig) -> int:
    src, dst = Path(args.input_dir), Path(args.output_dir)
    if not src.is_dir():
        raise MissingFile(f"input directory {src} does not exist")
    files = sorted(p for p in src.rglob("*") if p.is_file() and p.suffix.lower() in CLOUD_SUFFIXES)
    if not files:
        raise DataError(f"no point cloud files under {src}")
    if dst.resolve() == src.resolve():
        raise ConfigError("output directory must differ from the input directory")
    done, failures = [], []
    for f in files:
        rel = f.relative_to(src)
        try:
            grade = int(rel.parts[0]) if len(rel.parts) > 1 else None
            if grade is None or not 1 <= grade <= run.model.num_classes:
                raise DataError(f"{rel}: expected a grade directory 1..{run.model.num_classes}")
            cloud = read_cloud(f, label=grade)
            cloud = uniform_downsample(cloud, run.points, _per_file_seed(run.seed, rel.as_posix()))
            cloud = normalize_unit_sphere(cloud)
            out = dst / str(grade) / (f.stem + ".ply")
            out.parent.mkdir(parents=True, exist_ok=True)
            write_cloud(out, cloud)
            done.append((out.resolve(), grade))
        except (PointGptError, OSError, ValueError) as exc:
            failures.append(f"{rel}: {exc}")
    for msg in failures:
        print(f"error[data] {msg}", file=sys.stderr)
    if failures:
        print(f"{len(failures)} of {len(files)} files failed; no manifest written", file=sys.stderr)
        return EXIT_CODES["data"]
    tags = stratified_split([g for _, g in done], run.split_ratio, run.seed)
    manifest = DatasetManifest([ManifestEntry(p, g, t) for (p, g), t in zip(done, tags)],
                               run.model.num_classes)
    manifest.write(dst / "manifest.csv")
    (dst / "run_config.txt").write_text(run.to_text(), encoding="utf-8")
    print(f"wrote {len(done)} clouds and {dst / 'manifest.csv'}")
    return 0


def cmd_synth(args, run: RunConfig) -> int:
    path = write_synthetic_dataset(args.output_dir, args.train_per_grade, args.val_per_grade,
                                   args.cloud_points, run.seed)
    print(path)
    return 0


def cmd_pretrain(args, run: RunConfig) -> int:
    train_set, _ = _datasets(args, run)
    model = GptModel(run.model)
    rows = pretrain(model, train_set, run.schedule, run.seed)
    ckpt.save_checkpoint(args.out, model)
    if args.log:
        write_csv(args.log, PRETRAIN_LOG_FIELDS, rows, run.to_text())
    if rows:
        print(f"final train_loss {rows[-1]['train_loss']!r}")
    return 0


def cmd_train(args, run: RunConfig) -> int:
    train_set, val_set = _datasets(args, run)
    if len(val_set) == 0:
        raise DataError("manifest has no validation entries")
    model = GptModel(run.model)
    if args.pretrained:
        restored = ckpt.load_pretrained(model, args.pretrained)
        log.info("restored %d pretrained tensors", len(restored))
    result = train(model, train_set, val_set, run.schedule, run.seed)
    ckpt.save_checkpoint(args.out, result.model)
    if args.log:
        write_csv(args.log, EPOCH_LOG_FIELDS, result.log, run.to_text())
    if result.best_metrics is not None:
        print(f"best epoch {result.best_epoch} val_oa {result.best_metrics.oa!r} "
              f"val_macc {result.best_metrics.macc!r}")
    return 0


def _load_for_inference(args, run: RunConfig) -> GptModel:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise MissingFile(f"checkpoint {path} does not exist")
    return ckpt.load_checkpoint(path)


def cmd_eval(args, run: RunConfig) -> int:
    model = _load_for_inference(args, run)
    m = load_manifest(args.manifest, run.split_ratio, run.seed, model.config.num_classes)
    data = CloudDataset.from_entries(m.split(args.split))
    if len(data) == 0:
        raise DataError(f"manifest has no {args.split} entries")
    if model.config.fusion_mode == "logit_interpolation":
        attach_memory_bank(model, CloudDataset.from_entries(m.split("train")).samples(model.config))
    metrics = evaluate(model, data.samples(model.config))
    row = {"split": args.split, "n": metrics.total, "oa": metrics.oa, "macc": metrics.macc}
    fields = ("split", "n", "oa", "macc")
    if args.out:
        write_csv(args.out, fields, [row], run.to_text())
    print(f"{args.split} n={metrics.total} oa={metrics.oa!r} macc={metrics.macc!r}")
    return 0


def cmd_classify(args, run: RunConfig) -> int:
    model = _load_for_inference(args, run)
    if model.config.fusion_mode == "logit_interpolation" and args.manifest:
        m = load_manifest(args.manifest, run.split_ratio, run.seed, model.config.num_classes)
        attach_memory_bank(model, CloudDataset.from_entries(m.split("train")).samples(model.config))
    for line in run.to_text().splitlines():
        print(f"# {line}", file=sys.stderr)
    for path in args.clouds:
        p = Path(path)
        if not p.is_file():
            raise MissingFile(f"{p} does not exist")
        logits, grade = classify(model, read_cloud(p))
        print(",".join([p.stem, str(grade)] + [repr(float(x)) for x in logits]))
    return 0


def _float_list(text: Optional[str]):
    if text is None:
        return None
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_gridsearch(args, run: RunConfig) -> int:
    train_set, val_set = _datasets(args, run)
    kwargs = {}
    if args.alphas:
        kwargs["alphas"] = _float_list(args.alphas)
    if args.betas:
        kwargs["betas"] = _float_list(args.betas)
    raw, summary = grid_search_alpha_beta(run.model, train_set, val_set, run.schedule,
                                          seed=run.seed, **kwargs)
    write_csv(args.out, ("alpha", "beta", "oa", "macc"), raw, run.to_text())
    write_csv(args.summary, ("alpha", "best_oa", "best_beta"), summary, run.to_text())
    print(f"{len(raw)} configurations; summary in {args.summary}")
    return 0


def cmd_ablate(args, run: RunConfig) -> int:
    train_set, val_set = _datasets(args, run)
    if args.kind == "stages":
        stages = tuple(int(x) for x in _float_list(args.values)) if args.values else (1, 2, 3, 4, 5)
        rows = stage_ablation(run.model, train_set, val_set, run.schedule, stages, run.seed)
        fields = ("stages", "oa", "macc", "npe.stages")
    else:
        rows = fusion_ablation(run.model, train_set, val_set, run.schedule, run.seed)
        fields = ("method", "data_dimension", "oa", "macc")
    write_csv(args.out, fields, rows, run.to_text())
    print(f"{len(rows)} rows written to {args.out}")
    return 0


def cmd_features(args, run: RunConfig) -> int:
    m = _manifest(args, run)
    with open(args.out, "wb") as fh:
        for e in m.entries:
            cloud = normalize_unit_sphere(read_cloud(e.path, label=e.grade))
            feat = npe_extract(cloud, run.model.npe, run.model.d_model)
            write_feature_record(fh, cloud.id, e.grade, feat.values)
    print(f"{len(m.entries)} feature records written to {args.out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run configuration")
    g.add_argument("--config", help="key=value configuration file")
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any configuration key (repeatable)")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, help="cap on BLAS threads")
    g.add_argument("--fusion-mode", choices=sorted(FUSION_FLAGS))
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--stages", type=int)
    g.add_argument("--gamma", type=float)
    g.add_argument("--extra-mask-ratio", type=float)
    g.add_argument("--points", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pointgpt-nn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="downsample and normalize a graded tree")
    p.add_argument("input_dir")
    p.add_argument("output_dir")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic pilling dataset")
    p.add_argument("output_dir")
    p.add_argument("--train-per-grade", type=int, default=100)
    p.add_argument("--val-per-grade", type=int, default=20)
    p.add_argument("--cloud-points", type=int, default=512)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common], help="optimize the generation loss")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="epoch log CSV")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="fine-tune a classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (best validation OA)")
    p.add_argument("--log", help="epoch log CSV")
    p.add_argument("--pretrained", help="checkpoint whose embedding and extractor are restored")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="OA and mAcc on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--out", help="metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("classify", parents=[common], help="grade individual clouds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="training manifest for the memory bank (logit fusion)")
    p.add_argument("clouds", nargs="+")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("gridsearch", parents=[common], help="alpha x beta search")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="raw CSV, one row per combination")
    p.add_argument("--summary", required=True, help="best OA per alpha")
    p.add_argument("--alphas", help="comma-separated, default 100,500,1000,2000,3000")
    p.add_argument("--betas", help="comma-separated, default 50,100,200,300,400")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("ablate", parents=[common], help="stage-count or fusion-strategy ablation")
    p.add_argument("kind", choices=("stages", "fusion"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--values", help="stage counts, comma-separated (default 1..5)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("features", parents=[common], help="dump NPE global features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = run_config_from_args(args)
        with threadpool_limits(limits=run.threads):
            return args.func(args, run)
    except PointGptError as exc:
        print(f"error[{exc.category}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.category]
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error[data] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CODES["data"]
    except Exception as exc:  # noqa: BLE001 - last-resort mapping onto the runtime exit code
        print(f"error[runtime] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CODES["runtime"]


if __name__ == "__main__":
    sys.exit(main())
