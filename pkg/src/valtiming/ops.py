"""Differentiable building blocks shared by every model in the package.

torch provides tensors and reverse-mode autograd; the functions here pin
down the exact reductions the models rely on (masked mean pooling, the
weight-normalized cross-entropy, and a padding-aware multi-head attention).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def mean_pool_masked(frames: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Average the valid frames of a (B, T, d) or (T, d) sequence.

    ``valid`` is a boolean mask of shape (B, T) or (T,). Padding frames get
    exactly zero weight, so their values (and gradients) never matter.
    """
    squeeze = frames.dim() == 2
    if squeeze:
        frames, valid = frames.unsqueeze(0), valid.unsqueeze(0)
    counts = valid.sum(dim=1)
    if bool((counts == 0).any()):
        raise ValueError("mean pooling needs at least one valid frame per sequence")
    weights = valid.to(frames.dtype) / counts.to(frames.dtype).unsqueeze(1)
    pooled = torch.einsum("bt,btd->bd", weights, frames)
    return pooled[0] if squeeze else pooled


def cross_entropy(
    logits: torch.Tensor,
    targets: torch.Tensor,
    class_weights: torch.Tensor | None = None,
    ignore_id: int | None = None,
) -> torch.Tensor:
    """Weighted mean of per-sample cross-entropy.

    Returns sum_i w[y_i] * CE_i / sum_i w[y_i] over non-ignored samples; with
    no weights every w is 1, which makes this the plain mean.
    """
    if logits.dim() != 2:
        raise ValueError("logits must be N x C")
    targets = torch.as_tensor(targets, dtype=torch.long, device=logits.device)
    keep = torch.ones_like(targets, dtype=torch.bool)
    if ignore_id is not None:
        keep = targets != ignore_id
    if not bool(keep.any()):
        raise ValueError("every sample is ignored; cross-entropy is undefined")
    logits, targets = logits[keep], targets[keep]
    n_classes = logits.shape[1]
    if bool(((targets < 0) | (targets >= n_classes)).any()):
        raise ValueError(f"targets must lie in [0, {n_classes})")
    if class_weights is None:
        class_weights = torch.ones(n_classes, dtype=logits.dtype, device=logits.device)
    else:
        class_weights = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)
        if class_weights.shape != (n_classes,):
            raise ValueError(f"class_weights must have length {n_classes}")
        if bool((class_weights < 0).any()):
            raise ValueError("class weights must be nonnegative")
    w = class_weights[targets]
    # zero-weight classes (absent from training data) must not be targets
    if bool((w <= 0).any()):
        raise ValueError("a target class has nonpositive weight")
    nll = -F.log_softmax(logits, dim=1).gather(1, targets.unsqueeze(1)).squeeze(1)
    return (w * nll).sum() / w.sum()


class MultiHeadAttention(nn.Module):
    """Scaled dot-product self-attention with learned Q/K/V/output maps."""

    def __init__(self, d_model: int, n_heads: int, bias: bool = True) -> None:
        super().__init__()
        if n_heads < 1 or d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model, bias=bias)
        self.k_proj = nn.Linear(d_model, d_model, bias=bias)
        self.v_proj = nn.Linear(d_model, d_model, bias=bias)
        self.out_proj = nn.Linear(d_model, d_model, bias=bias)
        self.last_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, L, d); valid: optional (B, L) mask of attendable keys."""
        B, L, _ = x.shape

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(B, L, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if valid is not None:
            scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(B, L, self.d_model)
        return self.out_proj(out)


def multi_head_attention(seq: torch.Tensor, module: MultiHeadAttention) -> torch.Tensor:
    """Apply ``module`` to an unbatched (L, d) sequence."""
    return module(seq.unsqueeze(0))[0]


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return table.to(dtype)
