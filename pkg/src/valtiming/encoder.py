"""Waveform encoder: strided conv front end followed by a pre-norm transformer.

Two independent instances serve as the paralinguistic and emotion branches.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .ops import MultiHeadAttention, sinusoidal_positions

DEFAULT_CONV_STACK = ((10, 5), (8, 4), (8, 4), (4, 2))


class UtteranceTooShort(ValueError):
    pass


@dataclass
class EncoderConfig:
    conv_stack: tuple[tuple[int, int], ...] = DEFAULT_CONV_STACK
    conv_dim: int = 32
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1

    def __post_init__(self) -> None:
        self.conv_stack = tuple((int(k), int(s)) for k, s in self.conv_stack)
        if not self.conv_stack:
            raise ValueError("conv_stack must have at least one layer")
        if any(k < 1 or s < 1 for k, s in self.conv_stack):
            raise ValueError("conv kernels and strides must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def total_stride(self) -> int:
        return int(np.prod([s for _, s in self.conv_stack]))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["conv_stack"] = [list(p) for p in self.conv_stack]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EncoderConfig":
        return cls(**d)


def feature_length(raw_len: int, conv_stack: Sequence[tuple[int, int]] = DEFAULT_CONV_STACK) -> int:
    """Number of output frames the conv stack produces for ``raw_len`` samples."""
    length = int(raw_len)
    for kernel, stride in conv_stack:
        if length < kernel:
            raise UtteranceTooShort(
                f"utterance too short: length {length} < kernel {kernel} (raw length {raw_len})"
            )
        length = (length - kernel) // stride + 1
    return length


def min_raw_length(conv_stack: Sequence[tuple[int, int]] = DEFAULT_CONV_STACK) -> int:
    length = 1
    for kernel, stride in reversed(conv_stack):
        length = (length - 1) * stride + kernel
    return length


@dataclass
class EncoderOutput:
    states: torch.Tensor  # (B, T', d_model), padding frames zeroed
    valid: torch.Tensor  # (B, T') bool
    lengths: list[int] = field(default_factory=list)


class _ConvLayer(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel, stride)
        self.norm_weight = nn.Parameter(torch.ones(c_out, 1))
        self.norm_bias = nn.Parameter(torch.zeros(c_out, 1))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv(x)
        # layer norm over channels of each frame (no mixing across time, so
        # valid frames never see padding); avoids transposing (B, C, T)
        mean = y.mean(dim=1, keepdim=True)
        var = (y - mean).pow(2).mean(dim=1, keepdim=True)
        y = (y - mean) * torch.rsqrt(var + self.eps) * self.norm_weight + self.norm_bias
        return F.gelu(y)


class TransformerBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, dropout: float) -> None:
        super().__init__()
        self.attn_norm = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ffn_norm = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ffn_dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ffn_dim, d_model),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        x = x + self.dropout(self.attn(self.attn_norm(x), valid))
        return x + self.dropout(self.ffn(self.ffn_norm(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig | None = None) -> None:
        super().__init__()
        self.cfg = cfg = cfg or EncoderConfig()
        layers = []
        c_in = 1
        for kernel, stride in cfg.conv_stack:
            layers.append(_ConvLayer(c_in, cfg.conv_dim, kernel, stride))
            c_in = cfg.conv_dim
        self.conv = nn.ModuleList(layers)
        self.feature_norm = nn.LayerNorm(cfg.conv_dim)
        self.feature_proj = nn.Linear(cfg.conv_dim, cfg.d_model)
        self.feature_dropout = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d_model, cfg.n_heads, cfg.ffn_dim, cfg.dropout)
            for _ in range(cfg.n_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.d_model)

    def feature_lengths(self, raw_lengths: Sequence[int]) -> list[int]:
        return [feature_length(int(n), self.cfg.conv_stack) for n in raw_lengths]

    def frontend(self, waves: torch.Tensor, raw_lengths: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor, list[int]]:
        """Conv features projected to d_model: returns (x, valid, lengths)."""
        lengths = self.feature_lengths(raw_lengths)
        total = feature_length(waves.shape[1], self.cfg.conv_stack)
        x = waves.unsqueeze(1)
        for layer in self.conv:
            x = layer(x)
        x = self.feature_dropout(self.feature_proj(self.feature_norm(x.transpose(1, 2))))
        valid = torch.arange(total).unsqueeze(0) < torch.tensor(lengths).unsqueeze(1)
        return x, valid, lengths

    def transform(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype)
        for block in self.blocks:
            x = block(x, valid)
        x = self.final_norm(x)
        return x * valid.unsqueeze(-1).to(x.dtype)

    def forward(
        self,
        waves: torch.Tensor,
        raw_lengths: Sequence[int],
        mask: torch.Tensor | None = None,
        mask_embedding: torch.Tensor | None = None,
    ) -> EncoderOutput:
        """Encode a padded (B, N) batch.

        If ``mask`` (B, T') is given, those frames are replaced by
        ``mask_embedding`` at the transformer input.
        """
        x, valid, lengths = self.frontend(waves, raw_lengths)
        if mask is not None:
            if mask_embedding is None:
                raise ValueError("a mask requires a mask embedding")
            x = torch.where(mask.unsqueeze(-1), mask_embedding.to(x.dtype), x)
        return EncoderOutput(self.transform(x, valid), valid, lengths)

    def save(self, path, extra: dict[str, Any] | None = None) -> None:
        checkpoint.save(path, checkpoint.state_to_arrays(self), {"encoder": self.cfg.to_dict(), **(extra or {})})

    @classmethod
    def load(cls, path) -> "Encoder":
        tensors, config = checkpoint.load(path)
        enc = cls(EncoderConfig.from_dict(config["encoder"]))
        checkpoint.load_into(enc, tensors)
        return enc


def pad_batch(waves: Sequence[np.ndarray], dtype=torch.float32) -> tuple[torch.Tensor, list[int]]:
    """Right-pad 1-D sample arrays with zeros into a (B, N) tensor."""
    lengths = [len(w) for w in waves]
    out = torch.zeros(len(waves), max(lengths), dtype=dtype)
    for i, w in enumerate(waves):
        out[i, : len(w)] = torch.as_tensor(np.asarray(w), dtype=dtype)
    return out, lengths
