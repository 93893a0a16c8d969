"""Loss assembly, the per-step semi-supervised procedure and the training loop."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np
import torch

from . import ssd
from .backbone import NUM_CLASSES, SegNet, TeacherState, ema_update, pseudo_label
from .ckaf import ConsensusUnavailable, Fusion, fuse, labeled_bank, prototype_predict
from .data import random_crop
from .numerics import ContractError, child_seed, make_rng
from .pcc import MEAN, NoValidPairs, PcclConfig, Tag, contrastive_loss, decorrelation_loss, spcl_loss

DICE_SMOOTH = 1e-5
PROB_FLOOR = 1e-12
DTYPES = {"float32": torch.float32, "float64": torch.float64}
WINDOW_BATCH = 32  # sliding-window patches per forward pass at evaluation


class NumericalFailure(RuntimeError):
    def __init__(self, report: "StepReport"):
        super().__init__(f"non-finite total loss at step {report.step}: {report.to_dict()}")
        self.report = report


@dataclass
class TrainConfig:
    steps: int = 2000
    labeled_per_batch: int = 4
    unlabeled_per_batch: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    ema_decay: float = 0.99
    K: int = 3
    crop_size: int = 32
    use_pl: bool = True
    use_ssd: bool = True
    use_pcc: bool = True
    use_ckaf: bool = True
    fusion_strategy: str = "kan"
    pccl: PcclConfig = field(default_factory=PcclConfig)
    tau_p: float = 0.1
    kan_grid: int = 5
    kan_degree: int = 3
    kan_use_base: bool = True
    tap_level: int = 1
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.labeled_per_batch < 1 or self.unlabeled_per_batch < 1:
            raise ContractError("both batch halves must be non-empty")
        if self.crop_size % 4:
            raise ContractError("crop_size must be divisible by 4")
        if (self.use_ssd or self.use_pcc or self.use_ckaf) and not self.use_pl:
            raise ContractError("use_ssd/use_pcc/use_ckaf require use_pl")
        if self.dtype not in DTYPES:
            raise ContractError(f"dtype must be one of {sorted(DTYPES)}")
        if self.K < 1:
            raise ContractError("K must be >= 1")
        if self.fusion_strategy not in ("kan", "mlp", "average"):
            raise ContractError(f"fusion_strategy {self.fusion_strategy!r} not in kan|mlp|average")

    @property
    def regions(self) -> int:
        return self.K if self.use_ssd else 1

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


@dataclass
class StepReport:
    step: int
    lambda_gs: float
    seg_l: float = 0.0
    seg_u: float = 0.0
    proto_l: float = 0.0
    proto_u: float = 0.0
    opt: float = 0.0
    div: float = 0.0
    spcl: float = 0.0
    total: float = 0.0
    no_valid_pairs: bool = False
    consensus_unavailable: bool = False
    skipped_prototypes: int = 0
    div_samples: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def hybrid_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``(soft Dice on the foreground channel + voxelwise cross-entropy) / 2``.

    ``probs`` is [C, ...] (class axis first), ``target`` the integer map [...].
    """
    if tuple(probs.shape[1:]) != tuple(target.shape):
        raise ContractError(f"hybrid_loss: probs {list(probs.shape)} vs target {list(target.shape)}")
    target = target.long()
    fg = (target == 1).to(probs.dtype)
    p_fg = probs[1]
    dice = 1 - (2 * (p_fg * fg).sum() + DICE_SMOOTH) / (p_fg.sum() + fg.sum() + DICE_SMOOTH)
    picked = torch.gather(probs, 0, target.unsqueeze(0)).squeeze(0)
    ce = -torch.log(picked.clamp_min(PROB_FLOOR)).mean()
    return 0.5 * (dice + ce)


def warmup(s: float, s_max: float) -> float:
    """Gaussian ramp ``exp(-5 (1 - s/s_max)^2)``."""
    if s_max <= 0 or not 0 <= s <= s_max:
        raise ContractError(f"warmup needs 0 <= s <= s_max, s_max > 0 (got s={s}, s_max={s_max})")
    return math.exp(-5.0 * (1.0 - s / s_max) ** 2)


def total_loss(seg_l, seg_u, proto_l, proto_u, spcl, lambda_gs: float):
    """``seg_l + seg_u + proto_l + lambda_gs * (proto_u + spcl)`` accumulated in float64."""
    def f64(x):
        return x.to(torch.float64) if isinstance(x, torch.Tensor) else float(x)

    return f64(seg_l) + f64(seg_u) + f64(proto_l) + lambda_gs * (f64(proto_u) + f64(spcl))


def recompute_total(r: StepReport) -> float:
    return r.seg_l + r.seg_u + r.proto_l + r.lambda_gs * (r.proto_u + r.spcl)


class Models:
    """Student, EMA teacher, fusion module and the SGD optimizer over student + fusion."""

    def __init__(self, cfg: TrainConfig):
        dtype = cfg.torch_dtype
        self.student = SegNet(seed=cfg.seed, tap_level=cfg.tap_level, dtype=dtype)
        self.teacher = TeacherState(self.student, cfg.ema_decay)
        self.fusion = Fusion(
            self.student.feature_dim, cfg.fusion_strategy if cfg.use_ckaf else "average", seed=cfg.seed,
            G=cfg.kan_grid, p=cfg.kan_degree, use_base=cfg.kan_use_base, dtype=dtype,
        )
        params = list(self.student.parameters()) + list(self.fusion.parameters())
        self.optimizer = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)

    def state(self) -> dict[str, torch.Tensor]:
        out = {f"student.{k}": v for k, v in self.student.state_dict().items()}
        out.update({f"teacher.{k}": v for k, v in self.teacher.net.state_dict().items()})
        out.update({f"fusion.{k}": v for k, v in self.fusion.state_dict().items()})
        return out

    def load_state(self, tensors: dict[str, torch.Tensor]) -> None:
        for prefix, module in (("student.", self.student), ("teacher.", self.teacher.net), ("fusion.", self.fusion)):
            sub = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
            ref = module.state_dict()
            module.load_state_dict({k: sub[k].to(ref[k].dtype) for k in ref})


@dataclass
class Batch:
    vol_l: torch.Tensor  # [B_l, 1, H, W, Z]
    mask_l: torch.Tensor  # [B_l, H, W, Z]
    vol_u: torch.Tensor  # [B_u, 1, H, W, Z]


def sample_batch(cases, labeled_ids, unlabeled_ids, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    vl, ml, vu = [], [], []
    for _ in range(cfg.labeled_per_batch):
        vol, mask = cases[labeled_ids[int(rng.integers(len(labeled_ids)))]]
        v, m = random_crop(vol, mask, cfg.crop_size, rng)
        vl.append(v)
        ml.append(m)
    for _ in range(cfg.unlabeled_per_batch):
        vol, _ = cases[unlabeled_ids[int(rng.integers(len(unlabeled_ids)))]]
        # unlabeled crops never consult the mask
        corner = [int(rng.integers(0, n - cfg.crop_size + 1)) for n in vol.shape]
        vu.append(vol[tuple(slice(c, c + cfg.crop_size) for c in corner)])
    dtype = cfg.torch_dtype
    return Batch(
        vol_l=torch.from_numpy(np.stack(vl)).unsqueeze(1).to(dtype),
        mask_l=torch.from_numpy(np.stack(ml).astype(np.int64)),
        vol_u=torch.from_numpy(np.stack(vu)).unsqueeze(1).to(dtype),
    )


def _downsample(mask: torch.Tensor, stride: int) -> torch.Tensor:
    return mask[..., ::stride, ::stride, ::stride] if stride > 1 else mask


def collect_prototypes(feats, masks, source: str, cfg: TrainConfig, rng) -> tuple[list, int]:
    sets, skipped = [], 0
    for i in range(feats.shape[0]):
        for c in range(NUM_CLASSES):
            res = ssd.extract_prototypes(feats[i], masks[i], c, cfg.regions, rng, source=f"{source}{i}")
            if isinstance(res, ssd.Skipped):
                skipped += 1
            else:
                sets.append(res)
    return sets, skipped


def tagged(sets) -> list[tuple[Tag, torch.Tensor]]:
    out = []
    for s in sets:
        for k in range(s.subregion.shape[0]):
            out.append((Tag(s.class_id, k, s.source), s.subregion[k]))
        out.append((Tag(s.class_id, MEAN, s.source), s.mean))
    return out


def decorrelation_groups(sets) -> list[dict[int, torch.Tensor]]:
    groups: dict[str, dict[int, torch.Tensor]] = {}
    for s in sets:
        groups.setdefault(s.source, {})[s.class_id] = s.subregion
    return [groups[k] for k in sorted(groups)]


def compute_losses(
    batch: Batch, models: Models, cfg: TrainConfig, s: int, rng: np.random.Generator
) -> tuple[torch.Tensor, StepReport]:
    """Forward passes and every loss term; returns the float64 total and its report."""
    report = StepReport(step=s, lambda_gs=warmup(s, cfg.steps))
    student, teacher = models.student, models.teacher
    B_l = batch.vol_l.shape[0]

    logits, feats = student(torch.cat([batch.vol_l, batch.vol_u]))
    t_logits, t_feats = teacher(batch.vol_u)
    pseudo = pseudo_label(t_logits.transpose(0, 1))  # class axis first for argmax

    probs = torch.softmax(logits, dim=1).transpose(0, 1)  # [C, B, ...]
    seg_l = hybrid_loss(probs[:, :B_l], batch.mask_l)
    seg_u = hybrid_loss(probs[:, B_l:], pseudo)
    zero = torch.zeros((), dtype=logits.dtype)
    proto_l = proto_u = spcl = zero

    if cfg.use_pl:
        stride = student.feature_stride
        mask_l_ds, pseudo_ds = _downsample(batch.mask_l, stride), _downsample(pseudo, stride)
        lab_sets, sk_l = collect_prototypes(feats[:B_l], mask_l_ds, "l", cfg, rng)
        unl_sets, sk_u = collect_prototypes(t_feats, pseudo_ds, "u", cfg, rng)
        report.skipped_prototypes = sk_l + sk_u

        if cfg.use_pcc:
            all_sets = lab_sets + unl_sets
            try:
                opt = contrastive_loss(tagged(all_sets), cfg.pccl)
            except NoValidPairs:
                opt = zero
                report.no_valid_pairs = True
            div, report.div_samples = decorrelation_loss(decorrelation_groups(all_sets), cfg.pccl)
            div = div.to(logits.dtype)
            spcl = spcl_loss(opt, div, cfg.pccl)
            report.opt, report.div = float(opt.detach()), float(div.detach())

        try:
            if cfg.use_ckaf:
                bank = fuse(lab_sets, unl_sets, models.fusion, NUM_CLASSES, step=s)
            else:
                bank = labeled_bank(lab_sets, NUM_CLASSES, step=s)
            pp_l, _ = prototype_predict(feats[:B_l], bank, cfg.tau_p)
            pp_u, _ = prototype_predict(feats[B_l:], bank, cfg.tau_p)
            proto_l = hybrid_loss(pp_l.transpose(0, 1), mask_l_ds)
            proto_u = hybrid_loss(pp_u.transpose(0, 1), pseudo_ds)
        except ConsensusUnavailable:
            report.consensus_unavailable = True

    total = total_loss(seg_l, seg_u, proto_l, proto_u, spcl, report.lambda_gs)
    report.seg_l, report.seg_u = float(seg_l.detach()), float(seg_u.detach())
    report.proto_l, report.proto_u, report.spcl = float(proto_l.detach()), float(proto_u.detach()), float(spcl.detach())
    report.total = float(total.detach())
    return total, report


def train_step(batch: Batch, models: Models, cfg: TrainConfig, s: int, rng: np.random.Generator) -> StepReport:
    """One optimisation step: forward, losses, backward, SGD, EMA."""
    total, report = compute_losses(batch, models, cfg, s, rng)
    if not math.isfinite(report.total):
        raise NumericalFailure(report)

    models.optimizer.zero_grad(set_to_none=True)
    total.backward()
    models.optimizer.step()
    ema_update(models.teacher, models.student)
    return report


def fit(
    cfg: TrainConfig,
    cases: dict,
    labeled_ids: list[int],
    unlabeled_ids: list[int],
    on_step: Callable[[StepReport], None] | None = None,
) -> Models:
    torch.use_deterministic_algorithms(True)
    models = Models(cfg)
    rng = make_rng(cfg.seed, 202)
    for s in range(cfg.steps):
        batch_rng = make_rng(child_seed(rng))
        batch = sample_batch(cases, labeled_ids, unlabeled_ids, cfg, batch_rng)
        report = train_step(batch, models, cfg, s, batch_rng)
        if on_step is not None:
            on_step(report)
    return models


@torch.no_grad()
def predict_volume(net: SegNet, volume: np.ndarray, window: int | None = None) -> np.ndarray:
    """Argmax segmentation of a whole volume.

    With ``window`` set, softmax probabilities are averaged over overlapping
    ``window``-sized patches (stride window/2), so inference sees inputs of the
    same size as training crops. Without it the whole volume is one forward pass.
    """
    dtype = next(net.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(volume)).to(dtype)[None, None]
    if window is None or all(window >= n for n in volume.shape):
        logits, _ = net(x)
        return pseudo_label(logits[0]).numpy().astype(np.uint8)
    stride = max(window // 2, 1)
    starts = []
    for n in volume.shape:
        s = list(range(0, n - window + 1, stride))
        if s[-1] != n - window:
            s.append(n - window)
        starts.append(s)
    corners = [(i, j, k) for i in starts[0] for j in starts[1] for k in starts[2]]
    probs = torch.zeros((NUM_CLASSES, *volume.shape), dtype=dtype)
    count = torch.zeros(volume.shape, dtype=dtype)
    for b in range(0, len(corners), WINDOW_BATCH):
        chunk = corners[b : b + WINDOW_BATCH]
        slices = [tuple(slice(c, c + window) for c in corner) for corner in chunk]
        logits, _ = net(torch.stack([x[(0, 0) + sl] for sl in slices])[:, None])
        for sl, p in zip(slices, torch.softmax(logits, 1)):
            probs[(slice(None),) + sl] += p
            count[sl] += 1
    return pseudo_label(probs / count).numpy().astype(np.uint8)
