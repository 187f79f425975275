"""Central finite-difference oracle, independent of autograd."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

STEP = 1e-5
TOLERANCE = 1e-4


def numeric_grad(f: Callable[[], torch.Tensor], x: torch.Tensor, coords: Sequence[int], eps: float = STEP) -> np.ndarray:
    flat = x.data.view(-1)
    out = []
    with torch.no_grad():
        for i in coords:
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(f())
            flat[i] = orig - eps
            down = float(f())
            flat[i] = orig
            out.append((up - down) / (2 * eps))
    return np.array(out)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(
    f: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    rng: np.random.Generator,
    max_coords: int = 12,
    eps: float = STEP,
) -> float:
    """Relative error between autograd and central differences of scalar
    ``f`` over a random sample of coordinates from each tensor."""
    for t in tensors:
        t.grad = None
    f().backward()
    analytic, numeric = [], []
    for t in tensors:
        n = t.numel()
        coords = rng.choice(n, size=min(n, max_coords), replace=False)
        grad = t.grad if t.grad is not None else torch.zeros_like(t)
        analytic.append(grad.detach().reshape(-1)[coords].numpy())
        numeric.append(numeric_grad(f, t, coords, eps))
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))
