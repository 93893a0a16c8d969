"""Consensus fusion of labeled/unlabeled prototypes (KAN, MLP or plain average) and
prototype-based voxel prediction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .kan import KANLinear
from .numerics import DTYPE, ContractError, cosine_sim, make_rng, normalize
from .ssd import PrototypeSet

STRATEGIES = ("kan", "mlp", "average")


class ConsensusUnavailable(ValueError):
    def __init__(self, class_id: int, detail: str = ""):
        super().__init__(f"no consensus prototypes for class {class_id}{': ' + detail if detail else ''}")
        self.class_id = class_id


@dataclass
class ConsensusPrototypes:
    prototypes: dict[int, torch.Tensor]  # class -> [K, D]
    step: int = -1

    def stacked(self, num_classes: int) -> torch.Tensor:
        missing = [c for c in range(num_classes) if c not in self.prototypes]
        if missing:
            raise ConsensusUnavailable(missing[0])
        return torch.stack([self.prototypes[c] for c in range(num_classes)])


class _Mlp(nn.Module):
    """Affine map followed (optionally) by SiLU; the KAN layer's shape-for-shape stand-in."""

    def __init__(self, d_in, d_out, rng, activate=True, dtype=DTYPE):
        super().__init__()
        w = rng.standard_normal((d_out, d_in)) * np.sqrt(2.0 / d_in)
        self.weight = nn.Parameter(torch.tensor(w, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=dtype))
        self.activate = activate

    def forward(self, x):
        y = F.linear(x, self.weight, self.bias)
        return F.silu(y) if self.activate else y


class Fusion(nn.Module):
    """Source-specific projection, batch mean pooling, concat, two-stage fusion.

    Layer widths: D -> D per source, 2D -> D_h, D_h -> D. ``strategy="average"``
    owns no parameters.
    """

    def __init__(self, dim: int, strategy: str = "kan", hidden: int | None = None, seed: int = 0,
                 G: int = 5, p: int = 3, use_base: bool = True, dtype=DTYPE):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ContractError(f"unknown fusion strategy {strategy!r}")
        self.dim, self.strategy = dim, strategy
        hidden = hidden or dim
        rng = make_rng(seed, 303)
        if strategy == "kan":
            make = lambda a, b, last=False: KANLinear(a, b, G, p, rng, use_base, dtype)  # noqa: E731
        elif strategy == "mlp":
            make = lambda a, b, last=False: _Mlp(a, b, rng, not last, dtype)  # noqa: E731
        if strategy != "average":
            self.proj_l = make(dim, dim)
            self.proj_u = make(dim, dim)
            self.stage1 = make(2 * dim, hidden)
            self.stage2 = make(hidden, dim, last=True)

    def pooled(self, lab: torch.Tensor, unl: torch.Tensor) -> torch.Tensor:
        """``lab`` [B_l, M, D], ``unl`` [B_u, M, D] (normalised) -> consensus [M, D]."""
        if self.strategy == "average":
            return (lab.mean(0) + unl.mean(0)) / 2
        h_l = self.proj_l(lab).mean(0)
        h_u = self.proj_u(unl).mean(0)
        return self.stage2(self.stage1(torch.cat([h_l, h_u], dim=-1)))


def _stack_source(sets: Sequence[PrototypeSet], class_id: int) -> torch.Tensor | None:
    rows = [s.subregion for s in sets if s.class_id == class_id]
    return torch.stack(rows) if rows else None


def fuse(
    labeled_sets: Sequence[PrototypeSet],
    unlabeled_sets: Sequence[PrototypeSet],
    fusion: Fusion,
    num_classes: int = 2,
    step: int = -1,
) -> ConsensusPrototypes:
    """Per (class, rank) consensus prototypes; unlabeled prototypes are detached."""
    if not labeled_sets or not unlabeled_sets:
        raise ConsensusUnavailable(0, "a source batch is empty")
    lab, unl, ks = [], [], set()
    for c in range(num_classes):
        pl, pu = _stack_source(labeled_sets, c), _stack_source(unlabeled_sets, c)
        if pl is None or pu is None:
            raise ConsensusUnavailable(c, "missing from " + ("labeled" if pl is None else "unlabeled") + " batch")
        ks.update({pl.shape[1], pu.shape[1]})
        lab.append(normalize(pl))
        unl.append(normalize(pu.detach()))
    if len(ks) != 1:
        raise ContractError(f"inconsistent region counts {sorted(ks)}")
    # pad-free batching over classes: each class may have a different batch size
    out = {}
    if len({t.shape[0] for t in lab}) == 1 and len({t.shape[0] for t in unl}) == 1:
        fused = fusion.pooled(torch.cat(lab, 1), torch.cat(unl, 1))
        K = lab[0].shape[1]
        for c in range(num_classes):
            out[c] = fused[c * K : (c + 1) * K]
    else:
        for c in range(num_classes):
            out[c] = fusion.pooled(lab[c], unl[c])
    return ConsensusPrototypes(out, step)


def labeled_bank(labeled_sets: Sequence[PrototypeSet], num_classes: int = 2, step: int = -1) -> ConsensusPrototypes:
    """Batch mean of normalised labeled prototypes; the bank used when fusion is off."""
    out = {}
    for c in range(num_classes):
        pl = _stack_source(labeled_sets, c)
        if pl is None:
            raise ConsensusUnavailable(c, "missing from labeled batch")
        out[c] = normalize(pl).mean(0)
    return ConsensusPrototypes(out, step)


def prototype_scores(features: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """``features`` [..., D, h, w, z], ``bank`` [C, K, D] -> max-over-k cosine [..., C, h, w, z]."""
    D = bank.shape[-1]
    if features.shape[-4] != D:
        raise ContractError(f"feature dim {features.shape[-4]} != prototype dim {D}")
    f = features.movedim(-4, -1).unsqueeze(-2).unsqueeze(-2)  # [..., h, w, z, 1, 1, D]
    sim = cosine_sim(f, bank)  # [..., h, w, z, C, K]
    return sim.amax(-1).movedim(-1, -4)


def prototype_predict(
    features: torch.Tensor, consensus: ConsensusPrototypes, tau_p: float = 0.1, num_classes: int = 2
) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax over classes of max-k cosine similarity / tau_p, and its argmax labels."""
    if not tau_p > 0:
        raise ContractError("tau_p must be > 0")
    bank = consensus.stacked(num_classes)
    scores = prototype_scores(features, bank)
    probs = torch.softmax(scores / tau_p, dim=-4)
    labels = torch.argmax(scores.detach(), dim=-4)
    return probs, labels
