"""Two-branch validation-timing classifier.

Each branch encoder is mean-pooled over its valid frames, projected to a
shared space (linear, GELU, dropout), fused, and mapped to two logits.
Class 1 is "validate", class 0 "non-validate".
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .corpus import Utterance
from .encoder import Encoder, EncoderConfig, pad_batch
from .metrics import MetricsReport, classification_report
from .ops import MultiHeadAttention, cross_entropy, mean_pool_masked
from .training import TrainConfig, TrainResult, balance_downsample, train_loop

STRATEGIES = ("concat", "attention", "gated", "mha")
POLICIES = ("freeze", "finetune", "lora")
BRANCHES = ("para", "emo")


@dataclass
class FusionConfig:
    strategy: str = "concat"
    proj_dim: int = 256
    dropout: float = 0.1
    mha_heads: int = 4
    lora_rank: int = 4
    lora_alpha: float = 8.0
    branches: tuple[str, ...] = BRANCHES

    def __post_init__(self) -> None:
        self.branches = tuple(self.branches)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.proj_dim < 1:
            raise ValueError("proj_dim must be >= 1")
        if not self.branches or any(b not in BRANCHES for b in self.branches) or len(set(self.branches)) != len(self.branches):
            raise ValueError(f"branches must be a non-empty subset of {BRANCHES}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["branches"] = list(self.branches)
        return d


class LoraLinear(nn.Module):
    """Frozen linear map plus a trainable low-rank update s * B A."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float) -> None:
        super().__init__()
        d_out, d_in = base.weight.shape
        if rank < 1 or rank > min(d_in, d_out):
            raise ValueError(f"LoRA rank must lie in [1, {min(d_in, d_out)}], got {rank}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, d_in, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=base.weight.dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)


def lora_wrap(linear: nn.Linear, rank: int = 4, alpha: float = 8.0) -> LoraLinear:
    return LoraLinear(linear, rank, alpha)


def add_lora(encoder: Encoder, rank: int = 4, alpha: float = 8.0) -> None:
    """Wrap the query and value projections of every transformer block."""
    for block in encoder.blocks:
        attn = block.attn
        if not isinstance(attn.q_proj, LoraLinear):
            attn.q_proj = lora_wrap(attn.q_proj, rank, alpha)
        if not isinstance(attn.v_proj, LoraLinear):
            attn.v_proj = lora_wrap(attn.v_proj, rank, alpha)


class BranchProjection(nn.Module):
    def __init__(self, d_in: int, proj_dim: int, dropout: float) -> None:
        super().__init__()
        self.linear = nn.Linear(d_in, proj_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.dropout(F.gelu(self.linear(h)))


class ConcatFusion(nn.Module):
    def __init__(self, dim: int) -> None:
        super().__init__()
        self.out_dim = 2 * dim

    def forward(self, h1: torch.Tensor, h2: torch.Tensor) -> torch.Tensor:
        return torch.cat([h1, h2], dim=-1)


class AttentionFusion(nn.Module):
    """Scores each branch with a tanh MLP; softmax over the two scores."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        hidden = max(1, dim // 2)
        self.score = nn.Sequential(nn.Linear(dim, hidden), nn.Tanh(), nn.Linear(hidden, 1))
        self.out_dim = dim
        self.last_weights: torch.Tensor | None = None

    def forward(self, h1: torch.Tensor, h2: torch.Tensor) -> torch.Tensor:
        stacked = torch.stack([h1, h2], dim=-2)
        weights = torch.softmax(self.score(stacked), dim=-2)
        self.last_weights = weights.detach()
        return (weights * stacked).sum(dim=-2)


class GatedFusion(nn.Module):
    def __init__(self, dim: int) -> None:
        super().__init__()
        self.gate = nn.Linear(2 * dim, dim)
        self.out_dim = dim

    def forward(self, h1: torch.Tensor, h2: torch.Tensor) -> torch.Tensor:
        g = torch.sigmoid(self.gate(torch.cat([h1, h2], dim=-1)))
        return g * h1 + (1 - g) * h2


class MhaFusion(nn.Module):
    """Self-attention over the length-2 sequence [h1, h2], then mean-pooled."""

    def __init__(self, dim: int, n_heads: int) -> None:
        super().__init__()
        self.attn = MultiHeadAttention(dim, n_heads)
        self.out_dim = dim

    def forward(self, h1: torch.Tensor, h2: torch.Tensor) -> torch.Tensor:
        seq = torch.stack([h1, h2], dim=-2)
        squeeze = seq.dim() == 2
        if squeeze:
            seq = seq.unsqueeze(0)
        out = self.attn(seq).mean(dim=-2)
        return out[0] if squeeze else out


def make_fusion(cfg: FusionConfig) -> nn.Module:
    if cfg.strategy == "concat":
        return ConcatFusion(cfg.proj_dim)
    if cfg.strategy == "attention":
        return AttentionFusion(cfg.proj_dim)
    if cfg.strategy == "gated":
        return GatedFusion(cfg.proj_dim)
    return MhaFusion(cfg.proj_dim, cfg.mha_heads)


def fuse(h1: torch.Tensor, h2: torch.Tensor, module: nn.Module) -> torch.Tensor:
    if h1.shape != h2.shape:
        raise ValueError(f"branch embeddings differ in shape: {tuple(h1.shape)} vs {tuple(h2.shape)}")
    return module(h1, h2)


class ValidationTimingModel(nn.Module):
    def __init__(self, encoders: dict[str, Encoder], cfg: FusionConfig | None = None) -> None:
        super().__init__()
        self.cfg = cfg = cfg or FusionConfig()
        if set(encoders) != set(cfg.branches):
            raise ValueError(f"encoders {sorted(encoders)} do not match branches {cfg.branches}")
        self.encoders = nn.ModuleDict({b: encoders[b] for b in cfg.branches})
        if len({id(e) for e in self.encoders.values()}) != len(self.encoders):
            raise ValueError("branches must not share an encoder instance")
        self.projections = nn.ModuleDict(
            {b: BranchProjection(encoders[b].cfg.d_model, cfg.proj_dim, cfg.dropout) for b in cfg.branches}
        )
        if len(cfg.branches) == 2:
            self.fusion = make_fusion(cfg)
            fused_dim = self.fusion.out_dim
        else:
            self.fusion = None
            fused_dim = cfg.proj_dim
        self.classifier = nn.Linear(fused_dim, 2)
        self.policies = {b: "finetune" for b in cfg.branches}

    def embed(self, waves: torch.Tensor, lengths: Sequence[int]) -> torch.Tensor:
        projected = []
        for b in self.cfg.branches:
            encoder = self.encoders[b]
            # a fully frozen branch needs no graph
            needs_grad = torch.is_grad_enabled() and any(p.requires_grad for p in encoder.parameters())
            with torch.set_grad_enabled(needs_grad):
                out = encoder(waves, lengths)
            projected.append(self.projections[b](mean_pool_masked(out.states, out.valid)))
        if self.fusion is None:
            return projected[0]
        return fuse(projected[0], projected[1], self.fusion)

    def forward(self, waves: torch.Tensor, lengths: Sequence[int]) -> torch.Tensor:
        return self.classifier(self.embed(waves, lengths))

    def save(self, path, extra: dict[str, Any] | None = None) -> None:
        config = {
            "fusion": self.cfg.to_dict(),
            "encoders": {b: self.encoders[b].cfg.to_dict() for b in self.cfg.branches},
            "policies": dict(self.policies),
            **(extra or {}),
        }
        checkpoint.save(path, checkpoint.state_to_arrays(self), config)

    @classmethod
    def load(cls, path) -> tuple["ValidationTimingModel", dict[str, Any]]:
        tensors, config = checkpoint.load(path)
        if "fusion" not in config:
            raise checkpoint.CheckpointError(f"{path}: not a timing-model checkpoint")
        cfg = FusionConfig(**config["fusion"])
        encoders = {b: Encoder(EncoderConfig.from_dict(config["encoders"][b])) for b in cfg.branches}
        model = cls(encoders, cfg)
        apply_freeze_policy(model, config["policies"])
        checkpoint.load_into(model, tensors)
        return model, config


def apply_freeze_policy(model: ValidationTimingModel, policies: dict[str, str]) -> list[str]:
    """Set requires_grad per branch policy and return trainable parameter names.

    freeze: the branch encoder is excluded entirely. finetune: all of it is
    trained. lora: adapters on its Q/V maps are trained, the base is frozen.
    Projections, fusion and classifier always train.
    """
    for b in model.cfg.branches:
        policy = policies.get(b, "finetune")
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r} for branch {b}; expected one of {POLICIES}")
        encoder = model.encoders[b]
        if policy == "lora":
            add_lora(encoder, model.cfg.lora_rank, model.cfg.lora_alpha)
        for name, p in encoder.named_parameters():
            if policy == "finetune":
                p.requires_grad_(True)
            elif policy == "freeze":
                p.requires_grad_(False)
            else:
                p.requires_grad_("lora_" in name)
        model.policies[b] = policy
    return [n for n, p in model.named_parameters() if p.requires_grad]


def encoder_from_checkpoint(path) -> Encoder:
    """Load an encoder from an encoder-only or a prefixed model checkpoint."""
    tensors, config = checkpoint.load(path)
    enc = Encoder(EncoderConfig.from_dict(config["encoder"]))
    if not any(k.startswith("encoder.") for k in tensors):
        checkpoint.load_into(enc, tensors)
    else:
        checkpoint.load_into(enc, {k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")})
    return enc


def predict(model: ValidationTimingModel, utts: Sequence[Utterance], batch_size: int = 16) -> np.ndarray:
    was_training = model.training
    model.eval()
    pred = np.zeros(len(utts), dtype=np.int64)
    order = np.argsort([len(u.samples) for u in utts], kind="stable")
    with torch.no_grad():
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            waves, lengths = pad_batch([utts[i].samples for i in idx])
            pred[idx] = model(waves, lengths).argmax(1).numpy()
    model.train(was_training)
    return pred


def evaluate_timing(model: ValidationTimingModel, utts: Sequence[Utterance], batch_size: int = 16) -> MetricsReport:
    return classification_report([u.entry.timing_id for u in utts], predict(model, utts, batch_size), 2)


def timing_metrics(report: MetricsReport) -> dict[str, float]:
    row = report.timing_row()
    return {"v_prec": row["V-Prec"], "v_f1": row["V-F1"], "nv_f1": row["NV-F1"], "macro_f1": row["M-F1"]}


@dataclass
class TimingConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    policies: dict[str, str] = field(default_factory=lambda: {"para": "finetune", "emo": "finetune"})
    # None balances to the minority count; an int is the exact majority target
    balance_target: int | None = None
    balance: bool = True
    eval_batch_size: int = 16
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TimingConfig":
        d = dict(d)
        fusion = FusionConfig(**d.pop("fusion", {}))
        train = TrainConfig(**d.pop("train", {}))
        return cls(fusion=fusion, train=train, **d)


@dataclass
class TimingResult:
    model: ValidationTimingModel
    train: TrainResult
    trainable: list[str]
    n_train: dict[str, int]


def train_timing(
    train_utts: Sequence[Utterance],
    val_utts: Sequence[Utterance],
    model: ValidationTimingModel,
    cfg: TimingConfig,
    log_fn: Callable[[dict], None] | None = None,
) -> TimingResult:
    trainable = apply_freeze_policy(model, cfg.policies)
    labels = np.array([u.entry.timing_id for u in train_utts])
    items = list(train_utts)
    if cfg.balance:
        majority = int(np.bincount(labels, minlength=2).argmax())
        target = cfg.balance_target
        if target is None:
            target = int((labels != majority).sum())
        keep = balance_downsample(labels, target, cfg.train.seed, majority_label=majority)
        items = [train_utts[i] for i in keep]
    counts = np.bincount([u.entry.timing_id for u in items], minlength=2)
    if log_fn is not None:
        log_fn({"event": "setup", "trainable": trainable, "train_counts": counts.tolist(),
                "policies": dict(model.policies), "strategy": model.cfg.strategy})

    def loss_fn(batch: list[Utterance]) -> torch.Tensor:
        waves, lengths = pad_batch([u.samples for u in batch])
        return cross_entropy(model(waves, lengths), [u.entry.timing_id for u in batch])

    def evaluate() -> dict[str, float]:
        return timing_metrics(evaluate_timing(model, val_utts, cfg.eval_batch_size))

    result = train_loop(model, model.parameters(), items, loss_fn, evaluate, cfg.train, log_fn)
    model.load_state_dict(result.best_state)
    model.eval()
    return TimingResult(model, result, trainable, {"non-validate": int(counts[0]), "validate": int(counts[1])})
