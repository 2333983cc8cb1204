"""Central finite-difference gradient checks over sampled ParamStore entries."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .params import ParamStore


@dataclass
class GradCheckResult:
    checked: int
    max_rel_err: float
    rows: list[tuple[str, int, float, float, float]] = field(default_factory=list)

    def passed(self, rtol: float = 1e-4) -> bool:
        return self.max_rel_err <= rtol


def rel_err(a: float, n: float, floor: float = 1e-10) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(store: ParamStore, loss_fn: Callable[[ParamStore], torch.Tensor],
                    n_samples: int = 100, seed: int = 0, eps: float = 1e-6,
                    names: Sequence[str] | None = None) -> GradCheckResult:
    """Compare autograd against ``(f(x+h) - f(x-h)) / 2h`` for sampled scalars.

    ``store`` is cast to float64 first. Samples are drawn uniformly over all
    scalar entries of the trainable tensors (or ``names``), without
    replacement when there are enough of them.
    """
    p = store.to(torch.float64)
    names = list(p.trainable_names() if names is None else names)
    if not names:
        raise ValueError("no parameters to check")
    sizes = np.array([p[n].numel() for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    for n in names:
        p[n] = p[n].detach().clone().requires_grad_(True)
    loss = loss_fn(p)
    grads = torch.autograd.grad(loss, [p[n] for n in names], allow_unused=True)
    grads = [torch.zeros_like(p[n]) if g is None else g for n, g in zip(names, grads)]
    for n in names:
        p[n] = p[n].detach()

    rows, worst = [], 0.0
    with torch.no_grad():
        for f in flat:
            j = int(np.searchsorted(offsets, f, side="right") - 1)
            name, k = names[j], int(f - offsets[j])
            view = p[name].view(-1)
            orig = view[k].item()
            view[k] = orig + eps
            up = float(loss_fn(p))
            view[k] = orig - eps
            down = float(loss_fn(p))
            view[k] = orig
            num = (up - down) / (2 * eps)
            ana = float(grads[j].reshape(-1)[k])
            e = rel_err(ana, num)
            worst = max(worst, e)
            rows.append((name, k, ana, num, e))
    return GradCheckResult(len(rows), worst, rows)
