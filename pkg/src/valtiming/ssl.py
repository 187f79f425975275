"""Continued pretraining of the paralinguistic encoder by masked unit prediction.

Targets are k-means units over MFCC frames, aligned to the encoder frame
rate. Spans of encoder input frames are replaced by a learned mask
embedding and the model predicts the unit at every masked, non-padded frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import torch
from torch import nn

from .audio import FeatureSequence, MfccConfig, Waveform, extract_mfcc
from .corpus import Utterance
from .encoder import Encoder, feature_length, pad_batch
from .ops import cross_entropy
from .training import TrainConfig, TrainResult, train_loop
from .units import KMeansModel, align_units, assign_units, fit_kmeans

IGNORE = -100


@dataclass
class MaskSpec:
    masked: np.ndarray
    mask_prob: float = 0.065
    span_len: int = 10


def sample_span_masks(
    valid_len: int,
    p: float = 0.065,
    span_len: int = 10,
    rng: np.random.Generator | None = None,
    total_len: int | None = None,
) -> MaskSpec:
    """Bernoulli span starts over the valid frames, each masking ``span_len``
    frames (clipped at the valid end).

    When no start fires, one span is forced at a uniform start chosen so the
    full span fits, so there is always something to predict.
    """
    if valid_len < 1:
        raise ValueError("valid_len must be >= 1")
    if span_len < 1:
        raise ValueError("span_len must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    total_len = valid_len if total_len is None else total_len
    starts = np.flatnonzero(rng.random(valid_len) < p)
    if len(starts) == 0:
        starts = np.array([rng.integers(max(1, valid_len - span_len + 1))])
    masked = np.zeros(total_len, dtype=bool)
    for start in starts:
        masked[start : min(start + span_len, valid_len)] = True
    return MaskSpec(masked, p, span_len)


def mask_rng(seed: int, utt_index: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, utt_index, epoch])


class SslHead(nn.Module):
    def __init__(self, d_model: int, n_units: int) -> None:
        super().__init__()
        self.proj = nn.Linear(d_model, n_units)
        self.mask_embedding = nn.Parameter(torch.empty(d_model).uniform_())

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return self.proj(states)


def ssl_loss(logits: torch.Tensor, units: torch.Tensor, masked: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean unit cross-entropy over frames that are both masked and valid."""
    if not (logits.shape[:-1] == units.shape == masked.shape == valid.shape):
        raise ValueError("logits, units, mask and valid lengths disagree")
    selected = masked & valid
    if not bool(selected.any()):
        raise ValueError("no masked, non-padded frames: the loss is undefined")
    return cross_entropy(logits[selected], units[selected])


@dataclass
class SslConfig:
    n_units: int = 100
    kmeans_iters: int = 100
    kmeans_max_frames: int = 200_000
    mask_prob: float = 0.065
    span_len: int = 10
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            batch_size=2, accumulation=16, max_epochs=20, eval_every=None,
            patience=20, selection_metric="val_loss", selection_mode="min",
        )
    )

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SslConfig":
        d = dict(d)
        train = TrainConfig(**d.pop("train", {}))
        return cls(train=train, **d)


def mfcc_frames(utts: Sequence[Utterance], mfcc: MfccConfig = MfccConfig()) -> list[np.ndarray]:
    return [extract_mfcc(Waveform(u.samples.astype(np.float64)), mfcc).frames for u in utts]


def fit_units(utts: Sequence[Utterance], cfg: SslConfig, seed: int, mfcc: MfccConfig = MfccConfig()) -> KMeansModel:
    frames = np.concatenate(mfcc_frames(utts, mfcc))
    return fit_kmeans(frames, cfg.n_units, cfg.kmeans_iters, seed, cfg.kmeans_max_frames)


def unit_targets(utts: Sequence[Utterance], kmeans: KMeansModel, conv_stack, mfcc: MfccConfig = MfccConfig()) -> list[np.ndarray]:
    """Per-utterance unit ids at the encoder frame rate."""
    out = []
    for u, frames in zip(utts, mfcc_frames(utts, mfcc)):
        units = assign_units(kmeans, FeatureSequence(frames), frame_rate=mfcc.sample_rate / mfcc.hop)
        out.append(align_units(units, feature_length(len(u.samples), conv_stack)).units)
    return out


class MaskedUnitModel(nn.Module):
    def __init__(self, encoder: Encoder, head: SslHead) -> None:
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, waves, lengths, mask):
        out = self.encoder(waves, lengths, mask=mask, mask_embedding=self.head.mask_embedding)
        return self.head(out.states), out.valid


@dataclass
class SslBatch:
    waves: torch.Tensor
    lengths: list[int]
    units: torch.Tensor
    masked: torch.Tensor


def make_batch(
    utts: Sequence[Utterance],
    units: Sequence[np.ndarray],
    indices: Sequence[int],
    cfg: SslConfig,
    seed: int,
    epoch: int,
    conv_stack,
) -> SslBatch:
    waves, lengths = pad_batch([utts[i].samples for i in indices])
    total = feature_length(waves.shape[1], conv_stack)
    unit_mat = torch.full((len(indices), total), IGNORE, dtype=torch.long)
    masked = torch.zeros(len(indices), total, dtype=torch.bool)
    for row, i in enumerate(indices):
        n = len(units[i])
        unit_mat[row, :n] = torch.from_numpy(units[i])
        spec = sample_span_masks(n, cfg.mask_prob, cfg.span_len, mask_rng(seed, int(i), epoch), total)
        masked[row] = torch.from_numpy(spec.masked)
    return SslBatch(waves, lengths, unit_mat, masked)


@torch.no_grad()
def validation_loss(model: MaskedUnitModel, utts, units, cfg: SslConfig, seed: int, batch_size: int = 8) -> float:
    """Masked-frame CE averaged over every masked frame of the split
    (masks keyed to epoch 0, so the value is reproducible)."""
    conv_stack = model.encoder.cfg.conv_stack
    total, count = 0.0, 0
    order = np.argsort([len(u.samples) for u in utts])
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        b = make_batch(utts, units, idx, cfg, seed, 0, conv_stack)
        logits, valid = model(b.waves, b.lengths, b.masked)
        n = int((b.masked & valid).sum())
        total += float(ssl_loss(logits.double(), b.units, b.masked, valid)) * n
        count += n
    return total / count


@dataclass
class SslResult:
    model: MaskedUnitModel
    train: TrainResult
    val_loss: float


def pretrain(
    train_utts: Sequence[Utterance],
    val_utts: Sequence[Utterance],
    kmeans: KMeansModel,
    encoder: Encoder,
    cfg: SslConfig,
    log_fn: Callable[[dict], None] | None = None,
) -> SslResult:
    """Train ``encoder`` on masked unit prediction; keeps the epoch with the
    lowest validation loss and returns the model restored to it."""
    seed = cfg.train.seed
    conv_stack = encoder.cfg.conv_stack
    model = MaskedUnitModel(encoder, SslHead(encoder.cfg.d_model, kmeans.K))
    train_units = unit_targets(train_utts, kmeans, conv_stack)
    val_units = unit_targets(val_utts, kmeans, conv_stack)
    state = {"epoch": 1}

    def set_epoch(epoch: int) -> None:
        state["epoch"] = epoch

    def loss_fn(indices: list[int]) -> torch.Tensor:
        b = make_batch(train_utts, train_units, indices, cfg, seed, state["epoch"], conv_stack)
        logits, valid = model(b.waves, b.lengths, b.masked)
        return ssl_loss(logits, b.units, b.masked, valid)

    def evaluate() -> dict[str, float]:
        return {"val_loss": validation_loss(model, val_utts, val_units, cfg, seed)}

    result = train_loop(
        model, model.parameters(), list(range(len(train_utts))), loss_fn, evaluate,
        cfg.train, log_fn, epoch_hook=set_epoch,
    )
    model.load_state_dict(result.best_state)
    model.eval()
    return SslResult(model, result, result.best_metric)
