"""Randomised finite-difference checks for every differentiable op, grouped by module."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import ckaf, kan, pcc, ssd, trainer
from .backbone import SegNet, TeacherState
from .numerics import DTYPE, grad_check, make_rng, randn

# A case builder maps a seed to (loss_fn, params, names).
Case = Callable[[int], tuple[Callable[[], torch.Tensor], list[torch.Tensor], list[str]]]
MAX_ENTRIES = 12
# the end-to-end objective costs a full batch forward per probe; fewer entries per tensor
ENTRY_LIMITS = {"total_loss": 3}
# draws landing on a kink (ReLU, max over k, hinge) are replaced, up to this many per seed
MAX_REDRAWS = 5


def _leaf(t: torch.Tensor) -> torch.Tensor:
    return t.detach().clone().requires_grad_(True)


def _kan_params(rng, in_dim, out_dim, use_base=True):
    p = kan.kan_init(in_dim, out_dim, 5, 3, rng, use_base)
    p.spline_coeffs = _leaf(p.spline_coeffs * 5)  # init scale is tiny; enlarge for a sharper check
    p.base_weight = _leaf(p.base_weight)
    p.spline_scale = _leaf(p.spline_scale + randn(rng, out_dim, in_dim, scale=0.3))
    return p


def case_bspline(seed):
    rng = make_rng(seed, 1)
    grid = kan.SplineGrid(degree=int(rng.integers(1, 4)), num_intervals=int(rng.integers(3, 9)))
    x = _leaf(torch.from_numpy(rng.uniform(-0.97, 0.97, size=16)))
    w = randn(rng, 16, grid.num_basis)
    return (lambda: (kan.bspline_basis(x, grid) * w).sum()), [x], ["x"]


def _kan_case(use_base):
    def build(seed):
        rng = make_rng(seed, 2)
        p = _kan_params(rng, 6, 6, use_base)
        x = _leaf(torch.from_numpy(rng.uniform(-0.95, 0.95, size=(4, 6))))
        r = randn(rng, 4, 6)
        params = [x] + p.tensors()
        return (lambda: (kan.kan_forward(x, p) * r).sum()), params, ["x", "spline_coeffs", "base_weight", "spline_scale"]
    return build


def _random_sets(rng, n_lab=2, n_unl=2, K=3, D=8, grad=True):
    sets = []
    for src, n in (("l", n_lab), ("u", n_unl)):
        for i in range(n):
            for c in range(2):
                sub = randn(rng, K, D)
                sub = _leaf(sub) if grad else sub
                sets.append(ssd.PrototypeSet(c, sub, sub.mean(0), f"{src}{i}"))
    return sets


def case_contrastive(seed):
    rng = make_rng(seed, 3)
    sets = _random_sets(rng)
    cfg = pcc.PcclConfig(tau=float(rng.choice([0.1, 0.5, 1.0])))
    params = [s.subregion for s in sets]

    def loss():
        tagged = trainer.tagged([ssd.PrototypeSet(s.class_id, s.subregion, s.subregion.mean(0), s.source) for s in sets])
        return pcc.contrastive_loss(tagged, cfg)
    return loss, params, [f"{s.source}/c{s.class_id}" for s in sets]


def case_decorrelation(seed):
    rng = make_rng(seed, 4)
    sets = _random_sets(rng)
    cfg = pcc.PcclConfig(alpha=-0.3)
    params = [s.subregion for s in sets]
    return (lambda: pcc.decorrelation_loss(trainer.decorrelation_groups(sets), cfg)[0]), params, [
        f"{s.source}/c{s.class_id}" for s in sets]


def case_spcl(seed):
    opt_loss, params, names = case_contrastive(seed)
    rng = make_rng(seed, 5)
    cfg = pcc.PcclConfig(alpha=-0.3, lambda_div=float(rng.uniform(0, 1)))
    groups = [{0: params[0], 1: params[1]}, {0: params[2], 1: params[3]}]
    return (lambda: pcc.spcl_loss(opt_loss(), pcc.decorrelation_loss(groups, cfg)[0], cfg)), params, names


def _fuse_case(strategy):
    def build(seed):
        rng = make_rng(seed, 6)
        fusion = ckaf.Fusion(8, strategy, seed=seed)
        with torch.no_grad():
            for prm in fusion.parameters():
                prm.add_(randn(rng, *prm.shape, scale=0.1))
        sets = _random_sets(rng)
        lab = [s for s in sets if s.source.startswith("l")]
        unl = [s for s in sets if s.source.startswith("u")]
        r = randn(rng, 2, 3, 8)

        def loss():
            out = ckaf.fuse(lab, unl, fusion).stacked(2)
            return (out * r).sum()
        named = list(fusion.named_parameters())
        params = [p for _, p in named] + [s.subregion for s in lab]
        return loss, params, [n for n, _ in named] + [f"{s.source}/c{s.class_id}" for s in lab]
    return build


def case_prototype_predict(seed):
    rng = make_rng(seed, 7)
    feats = _leaf(randn(rng, 8, 4, 4, 4))
    bank = _leaf(randn(rng, 2, 3, 8))
    r = randn(rng, 2, 4, 4, 4)
    cons = lambda: ckaf.ConsensusPrototypes({0: bank[0], 1: bank[1]})  # noqa: E731
    return (lambda: (ckaf.prototype_predict(feats, cons(), 0.5)[0] * r).sum()), [feats, bank], ["features", "bank"]


def case_extract(seed):
    rng = make_rng(seed, 8)
    feats = _leaf(randn(rng, 4, 6, 6, 6))
    mask = (rng.uniform(size=(6, 6, 6)) < 0.4).astype(np.uint8)
    r = randn(rng, 3, 4)

    def loss():
        ps = ssd.extract_prototypes(feats, mask, 1, 3, make_rng(seed, 9))
        return (ps.subregion * r).sum() + ps.mean.sum()
    return loss, [feats], ["features"]


def _small_net(seed):
    net = SegNet(seed=seed, dtype=DTYPE)
    rng = make_rng(seed, 10)
    with torch.no_grad():
        for prm in net.parameters():
            if prm.dim() == 1:
                prm.add_(randn(rng, *prm.shape, scale=0.1))
    return net


def case_seg_forward(seed):
    rng = make_rng(seed, 11)
    net = _small_net(seed)
    x = _leaf(torch.from_numpy(rng.uniform(size=(1, 1, 4, 4, 4))))
    r = randn(rng, 1, 16, 2, 2, 2)

    def loss():
        logits, feats = net(x)
        return logits.sum() + (feats * r).sum()
    named = list(net.named_parameters())
    return loss, [x] + [p for _, p in named], ["volume"] + [n for n, _ in named]


def case_hybrid(seed):
    rng = make_rng(seed, 12)
    logits = _leaf(randn(rng, 2, 3, 4, 4))
    target = torch.from_numpy(rng.integers(0, 2, size=(3, 4, 4)))
    return (lambda: trainer.hybrid_loss(torch.softmax(logits, 0), target)), [logits], ["logits"]


def case_total(seed):
    """Eq.-7 objective end to end: backbone, prototypes, contrastive, fusion, prototype prediction."""
    rng = make_rng(seed, 13)
    cfg = trainer.TrainConfig(steps=10, labeled_per_batch=2, unlabeled_per_batch=2, crop_size=8,
                              dtype="float64", seed=seed, K=2)
    models = trainer.Models(cfg)
    with torch.no_grad():
        for prm in list(models.student.parameters()) + list(models.fusion.parameters()):
            if prm.dim() == 1:
                prm.add_(randn(rng, *prm.shape, scale=0.1))
        models.teacher = TeacherState(models.student, cfg.ema_decay)
    vol = torch.from_numpy(rng.uniform(size=(4, 1, 8, 8, 8)))
    mask_l = torch.zeros(2, 8, 8, 8, dtype=torch.long)
    mask_l[:, 2:6, 1:7, 2:6] = 1
    # make teacher pseudo-labels contain both classes
    with torch.no_grad():
        models.teacher.net.head_b.copy_(torch.tensor([0.0, 0.0]))
        models.teacher.net.head_w[1].add_(1.0)
    batch = trainer.Batch(vol[:2], mask_l, vol[2:])

    def loss():
        total, _ = trainer.compute_losses(batch, models, cfg, 7, make_rng(seed, 14))
        return total
    named = list(models.student.named_parameters()) + [("fusion." + n, p) for n, p in models.fusion.named_parameters()]
    return loss, [p for _, p in named], [n for n, _ in named]


SUITES: dict[str, dict[str, Case]] = {
    "kan": {
        "bspline_basis": case_bspline,
        "kan_forward": _kan_case(True),
        "kan_forward_spline_only": _kan_case(False),
    },
    "pcc": {
        "contrastive_loss": case_contrastive,
        "decorrelation_loss": case_decorrelation,
        "spcl_loss": case_spcl,
    },
    "ckaf": {
        "fuse_kan": _fuse_case("kan"),
        "fuse_mlp": _fuse_case("mlp"),
        "prototype_predict": case_prototype_predict,
    },
    "ssd": {"extract_prototypes": case_extract},
    "backbone": {"seg_forward": case_seg_forward},
    "trainer": {"hybrid_loss": case_hybrid, "total_loss": case_total},
}


@dataclass
class OpResult:
    module: str
    op: str
    seeds: int
    max_rel_error: float
    passed: bool
    worst_seed: int
    worst_param: str
    seconds: float
    redraws: int = 0


def check_op(module: str, op: str, build: Case, seeds: int = 20, eps: float = 1e-5, tol: float = 1e-4) -> OpResult:
    t0 = time.perf_counter()
    worst, worst_seed, worst_param, ok, redraws = 0.0, -1, "", True, 0
    limit = ENTRY_LIMITS.get(op, MAX_ENTRIES)
    for seed in range(seeds):
        for attempt in range(MAX_REDRAWS + 1):
            draw = seed + 100_000 * attempt
            loss_fn, params, names = build(draw)
            rep = grad_check(loss_fn, params, eps, names, max_entries=limit, rng=make_rng(draw, 99),
                             kink_tol=tol / 100)
            if rep.nonsmooth == 0:
                break
            redraws += 1
        if not rep.passed(tol) or rep.nonsmooth:
            ok = False
        w = rep.worst()
        err = float("inf") if (rep.nonfinite_loss or any(p.nonfinite for p in rep.params)) else rep.max_rel_error
        if rep.nonsmooth:
            err = max(err, float("inf"))
        if err >= worst:
            worst, worst_seed, worst_param = err, seed, (w.name if w else "loss")
    return OpResult(module, op, seeds, worst, ok, worst_seed, worst_param, time.perf_counter() - t0, redraws)


def run_suite(module: str = "all", seeds: int = 20, eps: float = 1e-5, tol: float = 1e-4,
              report: Callable[[OpResult], None] | None = None) -> list[OpResult]:
    if module != "all" and module not in SUITES:
        raise KeyError(module)
    mods = list(SUITES) if module == "all" else [module]
    results = []
    for m in mods:
        for op, build in SUITES[m].items():
            res = check_op(m, op, build, seeds, eps, tol)
            results.append(res)
            if report is not None:
                report(res)
    return results
