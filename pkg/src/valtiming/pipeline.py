"""Run configuration and the staged pipeline behind the command line.

Every stage writes a run directory with a fixed layout::

    config.json            effective configuration
    run.jsonl              one JSON record per event
    report.json            final metrics
    report.txt             human-readable table (timing stages)
    checkpoints/           best checkpoint (or k-means model)

The directory is assembled under a hidden staging name and renamed into
place only when the stage succeeds, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import contextlib
import copy
import json
import logging
import os
import shutil
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np
import torch

from . import checkpoint
from .corpus import SPLITS, CorpusSpec, generate_corpus, load_manifest, load_split
from .emotion import EmotionModel, MtlConfig, evaluate_mtl, train_mtl
from .encoder import Encoder, EncoderConfig
from .fusion import (
    BRANCHES,
    POLICIES,
    STRATEGIES,
    FusionConfig,
    TimingConfig,
    ValidationTimingModel,
    encoder_from_checkpoint,
    evaluate_timing,
    timing_metrics,
    train_timing,
)
from .metrics import format_timing_table
from .ssl import SslConfig, fit_units, pretrain
from .training import RunLog, TrainConfig
from .units import KMeansModel

log = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
LOG_FILE = "run.jsonl"
REPORT_FILE = "report.json"
TABLE_FILE = "report.txt"
CHECKPOINT_DIR = "checkpoints"
BEST = "best.ckpt"
KMEANS = "kmeans.bin"

# Rows of the training-strategy grid, as (paralinguistic, emotion) policies.
POLICY_GRID = (
    ("freeze", "freeze"),
    ("finetune", "freeze"),
    ("freeze", "finetune"),
    ("lora", "finetune"),
    ("finetune", "lora"),
    ("finetune", "finetune"),
)
BRANCH_GRID = (("para",), ("emo",), ("para", "emo"))
GRIDS = ("fusion", "policy", "branch")


class ConfigError(ValueError):
    pass


def _desk_train(**overrides: Any) -> TrainConfig:
    # one-CPU budget: larger lr and micro-batches than the GPU recipe
    base = dict(lr=1e-3, batch_size=8, accumulation=2, warmup_steps=20, eval_every=None)
    base.update(overrides)
    return TrainConfig(**base)


def _desk_ssl() -> SslConfig:
    return SslConfig(
        kmeans_iters=50,
        kmeans_max_frames=60_000,
        train=_desk_train(max_epochs=5, patience=5, selection_metric="val_loss", selection_mode="min"),
    )


def _desk_emotion() -> MtlConfig:
    return MtlConfig(train=_desk_train(max_epochs=4, patience=3, selection_metric="emotion_macro_f1"))


def _desk_timing() -> TimingConfig:
    return TimingConfig(train=_desk_train(lr=3e-4, max_epochs=3, patience=2))


@dataclass
class Paths:
    """Inputs of the later stages; command-line flags take precedence."""

    corpus: str | None = None
    units: str | None = None
    para: str | None = None
    emo: str | None = None
    checkpoint: str | None = None


@dataclass
class RunConfig:
    """Everything one run needs. ``seed`` is copied into every stage."""

    seed: int = 42
    paths: Paths = field(default_factory=Paths)
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(validate_rate=0.357))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ssl: SslConfig = field(default_factory=_desk_ssl)
    emotion: MtlConfig = field(default_factory=_desk_emotion)
    timing: TimingConfig = field(default_factory=_desk_timing)

    def __post_init__(self) -> None:
        self.corpus.seed = self.seed
        for stage in (self.ssl, self.emotion, self.timing):
            stage.train.seed = self.seed
        for branch, policy in self.timing.policies.items():
            if branch not in BRANCHES or policy not in POLICIES:
                raise ConfigError(f"invalid policy {branch}={policy!r}; policies are {POLICIES}")

    def to_dict(self) -> dict[str, Any]:
        return _plain(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        try:
            return _build(cls, d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


def _plain(obj: Any) -> Any:
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d: dict[str, Any]):
    """Instantiate a (nested) dataclass from a dict, rejecting unknown keys."""
    if not isinstance(d, dict):
        raise TypeError(f"{cls.__name__} section must be an object, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise TypeError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            merged = _merge(_plain(current), value) if isinstance(value, dict) else value
            kwargs[name] = _build(type(current), merged)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides``."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(_merge(data, overrides or {}))


# ---------------------------------------------------------------- run dirs


@dataclass
class RunDir:
    root: Path
    log: RunLog

    @property
    def checkpoints(self) -> Path:
        return self.root / CHECKPOINT_DIR

    def write_json(self, name: str, payload: Any) -> None:
        with open(self.root / name, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_text(self, name: str, text: str) -> None:
        (self.root / name).write_text(text + "\n", encoding="utf-8")


@contextlib.contextmanager
def staged_run(out: str | Path, config: dict[str, Any], command: str) -> Iterator[RunDir]:
    """Build a run directory under a staging name; publish it on success."""
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise FileExistsError(f"output directory {out} already exists and is not empty")
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = out.parent / f".{out.name}.staging-{os.getpid()}"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir()
    (staging / CHECKPOINT_DIR).mkdir()
    run = RunDir(staging, RunLog(staging / LOG_FILE))
    run.write_json(CONFIG_FILE, {"command": command, **config})
    run.log({"event": "start", "command": command})
    try:
        yield run
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    run.log({"event": "done", "command": command})
    if out.exists():
        out.rmdir()
    os.replace(staging, out)


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _require_corpus(corpus_dir: str | Path) -> Path:
    root = Path(corpus_dir)
    load_manifest(root)  # raises FileNotFoundError with a clear message
    return root


# ------------------------------------------------------------------ stages


def run_gen_corpus(cfg: RunConfig, out: str | Path) -> dict[str, Any]:
    with staged_run(out, cfg.to_dict(), "gen-corpus") as run:
        t0 = time.time()
        entries = generate_corpus(cfg.corpus, run.root)
        counts = {
            split: {
                "total": sum(e.split == split for e in entries),
                "validate": sum(e.split == split and e.timing == "validate" for e in entries),
            }
            for split in SPLITS
        }
        report = {"utterances": len(entries), "splits": counts, "seconds": time.time() - t0}
        run.log({"event": "corpus", **report})
        run.write_json(REPORT_FILE, report)
    return report


def run_fit_units(cfg: RunConfig, corpus_dir: str | Path, out: str | Path) -> dict[str, Any]:
    root = _require_corpus(corpus_dir)
    with staged_run(out, {**cfg.to_dict(), "corpus_dir": str(root)}, "fit-units") as run:
        t0 = time.time()
        km = fit_units(load_split(root, "train"), cfg.ssl, cfg.seed)
        km.save(run.checkpoints / KMEANS)
        report = {"K": km.K, "dim": km.dim, "inertia": km.inertia, "iterations": len(km.history),
                  "seconds": time.time() - t0}
        run.log({"event": "kmeans", "history": km.history, **report})
        run.write_json(REPORT_FILE, report)
    return report


def run_pretrain(cfg: RunConfig, corpus_dir: str | Path, units: str | Path, out: str | Path) -> dict[str, Any]:
    root = _require_corpus(corpus_dir)
    km = KMeansModel.load(units)
    with staged_run(out, {**cfg.to_dict(), "corpus_dir": str(root), "units": str(units)}, "pretrain") as run:
        t0 = time.time()
        _seed_everything(cfg.seed)
        res = pretrain(load_split(root, "train"), load_split(root, "val"), km, Encoder(cfg.encoder), cfg.ssl, run.log)
        checkpoint.save(
            run.checkpoints / BEST,
            checkpoint.state_to_arrays(res.model),
            {"kind": "ssl", "encoder": cfg.encoder.to_dict(), "n_units": km.K},
        )
        report = {"val_loss": res.val_loss, "best_step": res.train.best_step, "steps": res.train.steps,
                  "seconds": time.time() - t0}
        run.write_json(REPORT_FILE, report)
    return report


def run_train_emotion(cfg: RunConfig, corpus_dir: str | Path, out: str | Path) -> dict[str, Any]:
    root = _require_corpus(corpus_dir)
    with staged_run(out, {**cfg.to_dict(), "corpus_dir": str(root)}, "train-emotion") as run:
        t0 = time.time()
        _seed_everything(cfg.seed)
        res = train_mtl(load_split(root, "train"), load_split(root, "val"), Encoder(cfg.encoder), cfg.emotion, run.log)
        checkpoint.save(
            run.checkpoints / BEST,
            checkpoint.state_to_arrays(res.model),
            {"kind": "emotion", "encoder": cfg.encoder.to_dict(), "dropout": cfg.emotion.dropout},
        )
        test = evaluate_mtl(res.model, load_split(root, "test"), cfg.emotion.eval_batch_size)
        report = {"val": res.metrics, "test": test, "emotion_weights": res.emotion_weights.tolist(),
                  "best_step": res.train.best_step, "seconds": time.time() - t0}
        run.write_json(REPORT_FILE, report)
    return report


def build_timing_model(
    encoder_paths: dict[str, str | Path],
    fusion: FusionConfig,
    seed: int,
) -> ValidationTimingModel:
    encoders = {b: encoder_from_checkpoint(encoder_paths[b]) for b in fusion.branches}
    _seed_everything(seed)
    return ValidationTimingModel(encoders, fusion)


def _timing_cell(
    cfg: RunConfig,
    root: Path,
    encoder_paths: dict[str, str | Path],
    run: RunDir,
    splits: dict[str, list] | None = None,
) -> dict[str, Any]:
    splits = splits or {s: load_split(root, s) for s in SPLITS}
    t0 = time.time()
    model = build_timing_model(encoder_paths, cfg.timing.fusion, cfg.seed)
    policies = {b: cfg.timing.policies.get(b, "finetune") for b in cfg.timing.fusion.branches}
    timing_cfg = copy.deepcopy(cfg.timing)
    timing_cfg.policies = policies
    res = train_timing(splits["train"], splits["val"], model, timing_cfg, run.log)
    res.model.save(run.checkpoints / BEST, {"kind": "timing", "seed": cfg.seed})
    test = evaluate_timing(res.model, splits["test"], cfg.timing.eval_batch_size)
    report = {
        "val": res.train.best_metrics,
        "test": timing_metrics(test),
        "test_confusion": test.confusion.tolist(),
        "trainable": res.trainable,
        "train_counts": res.n_train,
        "policies": policies,
        "strategy": cfg.timing.fusion.strategy,
        "branches": list(cfg.timing.fusion.branches),
        "best_step": res.train.best_step,
        "seconds": time.time() - t0,
    }
    run.write_json(REPORT_FILE, report)
    run.write_text(TABLE_FILE, format_timing_table([(cfg.timing.fusion.strategy, test)]))
    return report


def run_train_timing(
    cfg: RunConfig, corpus_dir: str | Path, encoder_paths: dict[str, str | Path], out: str | Path
) -> dict[str, Any]:
    root = _require_corpus(corpus_dir)
    missing = [b for b in cfg.timing.fusion.branches if b not in encoder_paths]
    if missing:
        raise ConfigError(f"missing encoder checkpoint for branch(es) {missing}")
    extra = {"corpus_dir": str(root), "encoders": {b: str(p) for b, p in encoder_paths.items()}}
    with staged_run(out, {**cfg.to_dict(), **extra}, "train-timing") as run:
        return _timing_cell(cfg, root, encoder_paths, run)


def run_evaluate(ckpt: str | Path, corpus_dir: str | Path, split: str, batch_size: int = 16) -> dict[str, Any]:
    root = _require_corpus(corpus_dir)
    model, config = ValidationTimingModel.load(ckpt)
    report = evaluate_timing(model, load_split(root, split), batch_size)
    return {
        "checkpoint": str(ckpt),
        "split": split,
        "metrics": timing_metrics(report),
        "confusion": report.confusion.tolist(),
        "table": format_timing_table([(config["fusion"]["strategy"], report)]),
    }


def grid_cells(grid: str, cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    """Named configurations for one ablation grid."""
    cells = []
    if grid == "fusion":
        for strategy in STRATEGIES:
            c = copy.deepcopy(cfg)
            c.timing.fusion.strategy = strategy
            cells.append((strategy, c))
    elif grid == "policy":
        for para, emo in POLICY_GRID:
            c = copy.deepcopy(cfg)
            c.timing.policies = {"para": para, "emo": emo}
            cells.append((f"{para}-{emo}", c))
    elif grid == "branch":
        for branches in BRANCH_GRID:
            c = copy.deepcopy(cfg)
            c.timing.fusion.branches = branches
            name = "fused" if len(branches) == 2 else f"{branches[0]}-only"
            cells.append((name, c))
    else:
        raise ConfigError(f"unknown grid {grid!r}; expected one of {GRIDS}")
    return cells


def run_ablate(
    cfg: RunConfig,
    corpus_dir: str | Path,
    encoder_paths: dict[str, str | Path],
    grids: Sequence[str],
    out: str | Path,
    seeds: Sequence[int] | None = None,
) -> dict[str, Any]:
    """Train every cell of every grid for every seed, sequentially, and
    tabulate test metrics (seed means when several seeds are given)."""
    root = _require_corpus(corpus_dir)
    seeds = list(seeds) if seeds else [cfg.seed]
    plan = {grid: grid_cells(grid, cfg) for grid in grids}
    needed = {b for cells in plan.values() for _, c in cells for b in c.timing.fusion.branches}
    missing = sorted(needed - set(encoder_paths))
    if missing:
        raise ConfigError(f"missing encoder checkpoint for branch(es) {missing}")
    extra = {"corpus_dir": str(root), "encoders": {b: str(p) for b, p in encoder_paths.items()},
             "grids": list(grids), "seeds": seeds}
    splits = {s: load_split(root, s) for s in SPLITS}
    with staged_run(out, {**cfg.to_dict(), **extra}, "ablate") as run:
        report: dict[str, Any] = {"seeds": seeds, "grids": {}}
        tables = []
        for grid, cells in plan.items():
            rows: dict[str, dict[str, Any]] = {}
            for name, cell_cfg in cells:
                per_seed = []
                for seed in seeds:
                    seeded = RunConfig.from_dict({**cell_cfg.to_dict(), "seed": seed})
                    cell_dir = run.root / "cells" / grid / f"{name}-seed{seed}"
                    (cell_dir / CHECKPOINT_DIR).mkdir(parents=True)
                    cell_run = RunDir(cell_dir, RunLog(cell_dir / LOG_FILE))
                    cell_run.write_json(CONFIG_FILE, seeded.to_dict())
                    cell = _timing_cell(seeded, root, encoder_paths, cell_run, splits)
                    per_seed.append(cell["test"])
                    run.log({"event": "cell", "grid": grid, "cell": name, "seed": seed, **cell["test"]})
                mean = {k: float(np.mean([m[k] for m in per_seed])) for k in per_seed[0]}
                rows[name] = {"mean": mean, "per_seed": per_seed}
            table = format_timing_table(
                [(name, {"V-Prec": r["mean"]["v_prec"], "V-F1": r["mean"]["v_f1"],
                         "NV-F1": r["mean"]["nv_f1"], "M-F1": r["mean"]["macro_f1"]}) for name, r in rows.items()]
            )
            report["grids"][grid] = {"order": list(rows), "rows": rows, "table": table}
            tables.append(f"[{grid}]\n{table}")
        run.write_json(REPORT_FILE, report)
        run.write_text(TABLE_FILE, "\n\n".join(tables))
    return report


def load_emotion_model(path: str | Path) -> EmotionModel:
    tensors, config = checkpoint.load(path)
    if config.get("kind") != "emotion":
        raise checkpoint.CheckpointError(f"{path}: not an emotion-model checkpoint")
    model = EmotionModel(Encoder(EncoderConfig.from_dict(config["encoder"])), config.get("dropout", 0.1))
    checkpoint.load_into(model, tensors)
    return model.eval()
