"""Numeric substrate: seeded RNG, cosine similarity and a finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects; every verification path runs in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

DTYPE = torch.float64
EPS_NORM = 1e-8


class ContractError(ValueError):
    """Raised when an operation's shape or argument contract is violated."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based Philox generator; extra ``stream`` ints derive independent substreams."""
    if stream:
        seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(s) for s in stream]])
        return np.random.Generator(np.random.Philox(seq))
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def randn(rng: np.random.Generator, *shape: int, scale: float = 1.0, dtype=DTYPE) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape) * scale).to(dtype)


def set_deterministic(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def cosine_sim(a: torch.Tensor, b: torch.Tensor, eps_norm: float = EPS_NORM) -> torch.Tensor:
    """Cosine similarity along the last axis, with norms floored at ``eps_norm``.

    Broadcasts over leading axes, so ``a`` of shape [..., D] against ``b`` of shape
    [..., D] yields [...].
    """
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"cosine_sim: length mismatch {a.shape[-1]} vs {b.shape[-1]}")
    na = a.norm(dim=-1).clamp_min(eps_norm)
    nb = b.norm(dim=-1).clamp_min(eps_norm)
    return (a * b).sum(-1) / (na * nb)


def normalize(x: torch.Tensor, eps_norm: float = EPS_NORM) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps_norm)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor, eps_norm: float = EPS_NORM) -> torch.Tensor:
    """Pairwise cosine similarities between rows of ``a`` [n, D] and ``b`` [m, D]."""
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"cosine_matrix: length mismatch {a.shape[-1]} vs {b.shape[-1]}")
    return normalize(a, eps_norm) @ normalize(b, eps_norm).transpose(-1, -2)


@dataclass
class ParamCheck:
    index: int
    name: str
    max_rel_error: float
    worst_entry: int
    checked: int
    nonfinite: bool = False
    nonsmooth: int = 0  # entries excluded because the loss has a kink inside [x-eps, x+eps]


@dataclass
class GradCheckReport:
    params: list[ParamCheck] = field(default_factory=list)
    nonfinite_loss: bool = False

    @property
    def max_rel_error(self) -> float:
        if not self.params:
            return 0.0
        return max(p.max_rel_error for p in self.params)

    def passed(self, tol: float = 1e-4) -> bool:
        if self.nonfinite_loss or any(p.nonfinite for p in self.params):
            return False
        return self.max_rel_error < tol

    @property
    def nonsmooth(self) -> int:
        return sum(p.nonsmooth for p in self.params)

    def worst(self) -> ParamCheck | None:
        return max(self.params, key=lambda p: p.max_rel_error, default=None)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    kink_tol: float | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` takes no arguments and must read the current values of ``params``.
    Relative error per entry is ``|a - n| / max(1, |a|, |n|)``. With ``max_entries``
    set, at most that many entries per tensor are probed (chosen by ``rng``).

    With ``kink_tol`` set, an entry whose error exceeds it is counted as
    ``nonsmooth`` (and left out of ``max_rel_error``) when its one-sided slopes
    differ by at least half the discrepancy: the signature of a ReLU/max/hinge
    kink between x - eps and x + eps. A wrong gradient on a smooth loss has
    near-equal one-sided slopes and is still reported. Callers should redraw
    inputs rather than accept a nonsmooth draw.
    """
    if not 1e-7 <= eps <= 1e-2:
        raise ContractError(f"grad_check: eps {eps} outside [1e-7, 1e-2]")
    params = list(params)
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    report = GradCheckReport()

    loss = loss_fn()
    f0 = float(loss.detach())
    if not torch.isfinite(loss).all():
        report.nonfinite_loss = True
        return report
    analytic = torch.autograd.grad(loss, params, allow_unused=True)

    for i, (p, g) in enumerate(zip(params, analytic)):
        g = torch.zeros_like(p) if g is None else g.detach()
        flat_p = p.data.view(-1)
        flat_g = g.reshape(-1)
        n = flat_p.numel()
        if max_entries is not None and n > max_entries:
            picker = rng if rng is not None else make_rng(0)
            entries = np.sort(picker.choice(n, size=max_entries, replace=False))
        else:
            entries = np.arange(n)
        worst, worst_idx, nonfinite, kinks = 0.0, -1, False, 0
        for e in entries:
            e = int(e)
            orig = flat_p[e].item()
            with torch.no_grad():
                flat_p[e] = orig + eps
                f_plus = loss_fn().item()
                flat_p[e] = orig - eps
                f_minus = loss_fn().item()
                flat_p[e] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = flat_g[e].item()
            if not (math.isfinite(numeric) and math.isfinite(a)):
                nonfinite, worst_idx = True, e
                break
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if kink_tol is not None and rel > kink_tol:
                asym = abs((f_plus - f0) - (f0 - f_minus)) / eps
                if asym >= 0.5 * abs(a - numeric):
                    kinks += 1
                    continue
            if rel > worst:
                worst, worst_idx = rel, e
        report.params.append(ParamCheck(i, names[i], worst, worst_idx, len(entries), nonfinite, kinks))
    return report
