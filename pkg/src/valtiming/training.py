"""Shared optimisation loop: AdamW, linear warmup, gradient accumulation,
periodic evaluation with early stopping, and best-checkpoint selection."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 0.01
    warmup_steps: int = 100
    accumulation: int = 16
    batch_size: int = 1
    max_epochs: int = 20
    patience: int = 5
    eval_every: int | None = 100  # optimizer steps; None evaluates once per epoch
    seed: int = 42
    selection_metric: str = "macro_f1"
    selection_mode: str = "max"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive, weight_decay nonnegative")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.accumulation < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("accumulation, batch_size and max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.eval_every is not None and self.eval_every < 1:
            raise ValueError("eval_every must be >= 1 or None")
        if self.selection_mode not in ("max", "min"):
            raise ValueError("selection_mode must be 'max' or 'min'")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr`` over ``warmup_steps``, then constant."""
    if step < 1:
        raise ValueError("optimizer steps are counted from 1")
    if cfg.warmup_steps == 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def make_optimizer(params: Iterable[nn.Parameter], cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        list(params),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


@dataclass
class EarlyStopState:
    patience: int
    mode: str = "max"
    best: float | None = None
    best_step: int | None = None
    evals_since_improvement: int = 0

    def update(self, value: float, step: int) -> bool:
        """Record an evaluation; returns True if it is a strict improvement."""
        if self.best is None or (value > self.best if self.mode == "max" else value < self.best):
            self.best, self.best_step = value, step
            self.evals_since_improvement = 0
            return True
        self.evals_since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.evals_since_improvement >= self.patience


def balance_downsample(labels: Sequence[int], target_majority_count: int, seed: int, majority_label: int = 0) -> np.ndarray:
    """Indices kept after sampling the majority class down to a target count.

    The minority classes are untouched; the result is sorted.
    """
    labels = np.asarray(labels)
    majority = np.flatnonzero(labels == majority_label)
    if target_majority_count > len(majority):
        raise ValueError(
            f"target {target_majority_count} exceeds majority count {len(majority)}"
        )
    if target_majority_count < 0:
        raise ValueError("target count must be nonnegative")
    rng = np.random.default_rng(seed)
    keep = rng.choice(majority, size=target_majority_count, replace=False)
    rest = np.flatnonzero(labels != majority_label)
    return np.sort(np.concatenate([rest, keep]))


class RunLog:
    """Line-delimited JSON log; also keeps records in memory."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[dict[str, Any]] = []

    def __call__(self, record: dict[str, Any]) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    best_state: dict[str, torch.Tensor]
    best_metric: float
    best_step: int
    best_metrics: dict[str, float]
    history: list[dict[str, Any]] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False


def train_loop(
    model: nn.Module,
    params: Iterable[nn.Parameter],
    train_items: Sequence[Any],
    loss_fn: Callable[[list[Any]], torch.Tensor],
    evaluate: Callable[[], dict[str, float]],
    cfg: TrainConfig,
    log_fn: Callable[[dict[str, Any]], None] | None = None,
    epoch_hook: Callable[[int], None] | None = None,
) -> TrainResult:
    """Train ``model`` and return the best evaluated state.

    ``loss_fn`` maps a micro-batch to its mean loss. Each backward pass is
    scaled by 1/accumulation so an optimizer step sees the unweighted mean
    over ``batch_size * accumulation`` items. A short final accumulation
    window at the end of an epoch is rescaled to its actual size.
    """
    if len(train_items) == 0:
        raise ValueError("training split is empty")
    params = [p for p in params if p.requires_grad]
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(params, cfg)
    stopper = EarlyStopState(cfg.patience, cfg.selection_mode)
    history: list[dict[str, Any]] = []
    best_state: dict[str, torch.Tensor] | None = None
    best_metrics: dict[str, float] = {}
    step = 0
    last_eval_step = -1
    window_losses: list[float] = []

    def optimizer_step(micro: int) -> None:
        nonlocal step
        if micro != cfg.accumulation:
            for p in params:
                if p.grad is not None:
                    p.grad.mul_(cfg.accumulation / micro)
        step += 1
        lr = lr_schedule(step, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)

    def run_eval(epoch: int) -> None:
        nonlocal best_state, best_metrics, last_eval_step
        model.eval()
        with torch.no_grad():
            metrics = evaluate()
        model.train()
        last_eval_step = step
        value = float(metrics[cfg.selection_metric])
        improved = stopper.update(value, step)
        if improved:
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            best_metrics = dict(metrics)
        record = {
            "event": "eval",
            "epoch": epoch,
            "step": step,
            "lr": lr_schedule(max(step, 1), cfg),
            "train_loss": float(np.mean(window_losses)) if window_losses else None,
            "improved": improved,
            **{k: float(v) for k, v in metrics.items()},
        }
        window_losses.clear()
        history.append(record)
        if log_fn is not None:
            log_fn(record)
        log.debug("eval step=%d %s=%.4f", step, cfg.selection_metric, value)

    model.train()
    optimizer.zero_grad(set_to_none=True)
    for epoch in range(1, cfg.max_epochs + 1):
        if epoch_hook is not None:
            epoch_hook(epoch)
        order = rng.permutation(len(train_items))
        micro = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_items[i] for i in order[start : start + cfg.batch_size]]
            loss = loss_fn(batch)
            (loss / cfg.accumulation).backward()
            window_losses.append(float(loss.detach()))
            micro += 1
            if micro == cfg.accumulation:
                optimizer_step(micro)
                micro = 0
                if cfg.eval_every is not None and step % cfg.eval_every == 0:
                    run_eval(epoch)
                    if stopper.should_stop:
                        break
        else:
            if micro:
                optimizer_step(micro)
            if cfg.eval_every is None:
                run_eval(epoch)
        if stopper.should_stop:
            break
    if last_eval_step != step:
        run_eval(epoch)

    summary = {
        "event": "summary",
        "best_step": stopper.best_step,
        "best_metric": stopper.best,
        "selection_metric": cfg.selection_metric,
        "steps": step,
        "stopped_early": stopper.should_stop,
    }
    if log_fn is not None:
        log_fn(summary)
    return TrainResult(
        best_state=best_state,
        best_metric=float(stopper.best),
        best_step=int(stopper.best_step),
        best_metrics=best_metrics,
        history=history,
        steps=step,
        stopped_early=stopper.should_stop,
    )
