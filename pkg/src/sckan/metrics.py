"""Dice, Jaccard, HD95 and ASD in voxel units, plus the labeled/unlabeled Dice-gap report."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .numerics import ContractError

_SIX = ndimage.generate_binary_structure(3, 1)


class GapUndefined(ValueError):
    pass


@dataclass
class MetricReport:
    dice: float
    jaccard: float
    hd95: float
    asd: float
    defined: bool


def overlap_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p, g = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    inter = int((p & g).sum())
    total = int(p.sum()) + int(g.sum())
    union = int((p | g).sum())
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / union


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour in background (out of bounds counts)."""
    m = np.asarray(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=0)


def surface_distances(pred: np.ndarray, gt: np.ndarray) -> np.ndarray | None:
    """Concatenation of d(P->G) and d(G->P) over surface voxels, or None if a surface is empty."""
    if pred.shape != gt.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {gt.shape}")
    sp, sg = surface(pred), surface(gt)
    if not sp.any() or not sg.any():
        return None
    to_g = ndimage.distance_transform_edt(~sg)
    to_p = ndimage.distance_transform_edt(~sp)
    return np.concatenate([to_g[sp], to_p[sg]])


def nearest_rank(values: np.ndarray, q: float) -> float:
    v = np.sort(values)
    rank = max(1, math.ceil(q * len(v)))
    return float(v[rank - 1])


def surface_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, bool]:
    d = surface_distances(pred, gt)
    if d is None:
        return math.nan, math.nan, False
    return nearest_rank(d, 0.95), float(d.mean()), True


def evaluate_case(pred: np.ndarray, gt: np.ndarray) -> MetricReport:
    dice, jac = overlap_metrics(pred, gt)
    hd95, asd, ok = surface_metrics(pred, gt)
    return MetricReport(dice, jac, hd95, asd, ok)


def gap_report(per_case: Iterable[tuple[str, float]]) -> tuple[float, float, float]:
    """(mean labeled Dice, mean unlabeled Dice, labeled minus unlabeled)."""
    by_role: dict[str, list[float]] = {"labeled": [], "unlabeled": []}
    for role, dice in per_case:
        if role in by_role:
            by_role[role].append(float(dice))
    missing = [r for r, v in by_role.items() if not v]
    if missing:
        raise GapUndefined(f"no cases for role(s): {', '.join(missing)}")
    l_dice = float(np.mean(by_role["labeled"]))
    u_dice = float(np.mean(by_role["unlabeled"]))
    return l_dice, u_dice, l_dice - u_dice


CSV_FIELDS = ("case_id", "role", "dice", "jaccard", "hd95", "asd")


def cases_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (_fmt(r[k]) if isinstance(r[k], float) else r[k]) for k in CSV_FIELDS})
    return buf.getvalue()


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def mean_std(values: Sequence[float]) -> dict:
    """Mean and population std over the finite entries."""
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=float)
    if len(v) == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(len(v))}


def summarize(rows: Sequence[dict]) -> dict:
    return {k: mean_std([r[k] for r in rows]) for k in ("dice", "jaccard", "hd95", "asd")}


def report_json(rows: Sequence[dict], extra: dict | None = None) -> str:
    doc = {"units": "voxel", "cases": len(rows), "summary": summarize(rows)}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)


def report_row(case_id, role, pred, gt) -> dict:
    r = asdict(evaluate_case(pred, gt))
    r.update(case_id=case_id, role=role)
    return r
