"""Position-weighted prototype contrastive loss and positional decorrelation penalty."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch

from .numerics import ContractError, cosine_matrix

MEAN = "mean"


class NoValidPairs(ValueError):
    pass


@dataclass(frozen=True)
class PcclConfig:
    tau: float = 0.1
    alpha: float = 0.5
    lambda_div: float = 0.5
    w_same_region: float = 1.0
    w_diff_region: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError("tau must be > 0")
        if not -1.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [-1, 1]")
        if not 0.0 <= self.lambda_div <= 1.0:
            raise ContractError("lambda_div must lie in [0, 1]")


class Tag(NamedTuple):
    class_id: int
    region: int | str  # rank index or "mean"
    source: str  # sample identifier, e.g. "l0", "u3"


def pair_weight(i: Tag, j: Tag, cfg: PcclConfig = PcclConfig()) -> float:
    """Positive-pair weight; only meaningful when both tags share a class."""
    if i.class_id != j.class_id:
        return 0.0
    return cfg.w_same_region if i.region == j.region else cfg.w_diff_region


def contrastive_loss(
    prototypes: Sequence[tuple[Tag, torch.Tensor]], cfg: PcclConfig = PcclConfig()
) -> torch.Tensor:
    """``-(1/|P|) sum_i log(P+_i / (P+_i + P-_i))`` over anchors having both pair kinds.

    Positives are same-class prototypes (weighted by :func:`pair_weight`), negatives
    are other-class prototypes (unweighted).
    """
    if not prototypes:
        raise NoValidPairs("empty prototype set")
    tags = [t for t, _ in prototypes]
    vecs = torch.stack([v for _, v in prototypes])
    n = len(tags)
    cls = torch.tensor([t.class_id for t in tags])
    same = cls[:, None] == cls[None, :]
    eye = torch.eye(n, dtype=torch.bool)
    pos = same & ~eye
    neg = ~same
    reg = {r: i for i, r in enumerate(dict.fromkeys(t.region for t in tags))}
    region = torch.tensor([reg[t.region] for t in tags])
    same_region = region[:, None] == region[None, :]
    # pair_weight, vectorised; negatives stay unweighted
    weights = torch.where(
        same & ~same_region,
        torch.tensor(cfg.w_diff_region, dtype=vecs.dtype),
        torch.tensor(cfg.w_same_region, dtype=vecs.dtype),
    )
    weights = torch.where(same, weights, torch.ones((), dtype=vecs.dtype))
    valid = pos.any(1) & neg.any(1)
    if not valid.any():
        raise NoValidPairs("no anchor has both a positive and a negative pair")

    logits = (cosine_matrix(vecs, vecs) / cfg.tau)[valid]
    pos, neg, log_w = pos[valid], neg[valid], torch.log(weights[valid])
    ninf = torch.tensor(-torch.inf, dtype=vecs.dtype)
    log_pos = torch.logsumexp(torch.where(pos, logits + log_w, ninf), dim=1)
    log_neg = torch.logsumexp(torch.where(neg, logits, ninf), dim=1)
    # -log(P+ / (P+ + P-)) = log(1 + P-/P+)
    return torch.nn.functional.softplus(log_neg - log_pos).mean()


def decorrelation_loss(
    groups: Sequence[dict[int, torch.Tensor]], cfg: PcclConfig = PcclConfig()
) -> tuple[torch.Tensor, int]:
    """Hinge on pairwise similarity of one sample's ordered subregion prototypes.

    ``groups`` holds one mapping per sample, class id -> [K, D] prototypes. Per
    sample the penalty is averaged over its classes; the result averages over
    samples with at least one class having K >= 2. Returns (loss, samples counted).
    """
    per_sample = []
    for g in groups:
        terms = []
        for protos in g.values():
            K = protos.shape[0]
            if K < 2:
                continue
            sim = cosine_matrix(protos, protos)
            off = ~torch.eye(K, dtype=torch.bool)
            terms.append(torch.relu(sim[off] - cfg.alpha).sum() / (K * (K - 1)))
        if terms:
            per_sample.append(torch.stack(terms).mean())
    if not per_sample:
        return torch.zeros((), dtype=torch.float64), 0
    return torch.stack(per_sample).mean(), len(per_sample)


def spcl_loss(opt: torch.Tensor | float, div: torch.Tensor | float, cfg: PcclConfig = PcclConfig()):
    return (1.0 - cfg.lambda_div) * opt + cfg.lambda_div * div
