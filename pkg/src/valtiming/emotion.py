"""Multi-task emotion / sentiment fine-tuning of the emotion encoder.

Both heads read one dropout-regularised, mask-pooled utterance vector. The
two losses are blended by a learned weight alpha = sigmoid(alpha_logit),
starting at 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import EMOTIONS, SENTIMENTS, Utterance
from .encoder import Encoder, pad_batch
from .metrics import classification_report
from .ops import cross_entropy, mean_pool_masked
from .training import TrainConfig, TrainResult, train_loop

N_EMOTIONS = len(EMOTIONS)
N_SENTIMENTS = len(SENTIMENTS)


def inverse_frequency_weights(counts: Sequence[int]) -> np.ndarray:
    """w_c = N / (C_present * count_c); classes with no samples get 0."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("class counts must be nonnegative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("all class counts are zero")
    present = counts > 0
    weights = np.zeros_like(counts)
    weights[present] = total / (present.sum() * counts[present])
    return weights


@dataclass
class MtlOutput:
    emotion_logits: torch.Tensor
    sentiment_logits: torch.Tensor
    pooled: torch.Tensor


class EmotionModel(nn.Module):
    def __init__(self, encoder: Encoder, dropout: float = 0.1) -> None:
        super().__init__()
        d = encoder.cfg.d_model
        self.encoder = encoder
        self.dropout = nn.Dropout(dropout)
        self.emotion_head = nn.Linear(d, N_EMOTIONS)
        self.sentiment_head = nn.Linear(d, N_SENTIMENTS)
        self.alpha_logit = nn.Parameter(torch.zeros(()))

    @property
    def alpha(self) -> float:
        return float(torch.sigmoid(self.alpha_logit.detach()))

    def forward(self, waves: torch.Tensor, lengths: Sequence[int]) -> MtlOutput:
        out = self.encoder(waves, lengths)
        pooled = self.dropout(mean_pool_masked(out.states, out.valid))
        return MtlOutput(self.emotion_head(pooled), self.sentiment_head(pooled), pooled)


@dataclass
class MtlLoss:
    total: torch.Tensor
    emotion: torch.Tensor
    sentiment: torch.Tensor


def mtl_loss(
    emotion_logits: torch.Tensor,
    emotion_targets,
    sentiment_logits: torch.Tensor,
    sentiment_targets,
    emotion_weights,
    alpha_logit: torch.Tensor,
) -> MtlLoss:
    """alpha * weighted-CE(emotion) + (1 - alpha) * CE(sentiment)."""
    l_e = cross_entropy(emotion_logits, emotion_targets, class_weights=emotion_weights)
    l_s = cross_entropy(sentiment_logits, sentiment_targets)
    alpha = torch.sigmoid(alpha_logit)
    return MtlLoss(alpha * l_e + (1 - alpha) * l_s, l_e, l_s)


@dataclass
class MtlConfig:
    dropout: float = 0.1
    eval_batch_size: int = 16
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            batch_size=1, accumulation=16, eval_every=500, patience=5,
            selection_metric="emotion_macro_f1",
        )
    )

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MtlConfig":
        d = dict(d)
        train = TrainConfig(**d.pop("train", {}))
        return cls(train=train, **d)


def predict(model: EmotionModel, utts: Sequence[Utterance], batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Argmax emotion and sentiment ids, in input order (eval phase)."""
    was_training = model.training
    model.eval()
    emo = np.zeros(len(utts), dtype=np.int64)
    sent = np.zeros(len(utts), dtype=np.int64)
    order = np.argsort([len(u.samples) for u in utts], kind="stable")
    with torch.no_grad():
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            waves, lengths = pad_batch([utts[i].samples for i in idx])
            out = model(waves, lengths)
            emo[idx] = out.emotion_logits.argmax(1).numpy()
            sent[idx] = out.sentiment_logits.argmax(1).numpy()
    model.train(was_training)
    return emo, sent


def evaluate_mtl(model: EmotionModel, utts: Sequence[Utterance], batch_size: int = 16) -> dict[str, float]:
    emo, sent = predict(model, utts, batch_size)
    e = classification_report([u.entry.emotion_id for u in utts], emo, N_EMOTIONS)
    s = classification_report([u.entry.sentiment_id for u in utts], sent, N_SENTIMENTS)
    return {
        "emotion_macro_f1": e.macro_f1,
        "emotion_ua": e.ua,
        "emotion_wa": e.wa,
        "sentiment_macro_f1": s.macro_f1,
        "sentiment_ua": s.ua,
        "sentiment_wa": s.wa,
        "alpha": model.alpha,
    }


@dataclass
class MtlResult:
    model: EmotionModel
    train: TrainResult
    metrics: dict[str, float]
    emotion_weights: np.ndarray


def train_mtl(
    train_utts: Sequence[Utterance],
    val_utts: Sequence[Utterance],
    encoder: Encoder,
    cfg: MtlConfig,
    log_fn: Callable[[dict], None] | None = None,
) -> MtlResult:
    """Fine-tune ``encoder`` with both heads; returns the model restored to
    the evaluation with the best validation emotion macro-F1."""
    counts = np.bincount([u.entry.emotion_id for u in train_utts], minlength=N_EMOTIONS)
    weights = inverse_frequency_weights(counts)
    weights_t = torch.tensor(weights, dtype=torch.float32)
    model = EmotionModel(encoder, cfg.dropout)

    def loss_fn(batch: list[Utterance]) -> torch.Tensor:
        waves, lengths = pad_batch([u.samples for u in batch])
        out = model(waves, lengths)
        return mtl_loss(
            out.emotion_logits, [u.entry.emotion_id for u in batch],
            out.sentiment_logits, [u.entry.sentiment_id for u in batch],
            weights_t, model.alpha_logit,
        ).total

    def evaluate() -> dict[str, float]:
        return evaluate_mtl(model, val_utts, cfg.eval_batch_size)

    result = train_loop(model, model.parameters(), list(train_utts), loss_fn, evaluate, cfg.train, log_fn)
    model.load_state_dict(result.best_state)
    model.eval()
    return MtlResult(model, result, result.best_metrics, weights)
