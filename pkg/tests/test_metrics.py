import itertools
import math

import numpy as np
import pytest

from sckan.metrics import (CSV_FIELDS, GapUndefined, cases_to_csv, evaluate_case, gap_report, mean_std,
                           overlap_metrics, surface_metrics)


def brute_surface(m):
    out = []
    H, W, Z = m.shape
    for i, j, k in itertools.product(range(H), range(W), range(Z)):
        if not m[i, j, k]:
            continue
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = i + d[0], j + d[1], k + d[2]
            if not (0 <= a < H and 0 <= b < W and 0 <= c < Z) or not m[a, b, c]:
                out.append((i, j, k))
                break
    return out


def brute_metrics(p, g):
    inter = union = sp = sg = 0
    for idx in itertools.product(*map(range, p.shape)):
        a, b = bool(p[idx]), bool(g[idx])
        inter += a and b
        union += a or b
        sp += a
        sg += b
    dice = 1.0 if sp + sg == 0 else 2 * inter / (sp + sg)
    jac = 1.0 if union == 0 else inter / union
    SP, SG = brute_surface(p), brute_surface(g)
    if not SP or not SG:
        return dice, jac, math.nan, math.nan
    d = [min(math.dist(x, y) for y in SG) for x in SP] + [min(math.dist(y, x) for x in SP) for y in SG]
    d.sort()
    hd = d[math.ceil(0.95 * len(d)) - 1]
    return dice, jac, hd, sum(d) / len(d)


@pytest.mark.parametrize("seed", range(50))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((8, 8, 8)) < rng.uniform(0.05, 0.6)
    g = rng.random((8, 8, 8)) < rng.uniform(0.05, 0.6)
    want = brute_metrics(p, g)
    dice, jac = overlap_metrics(p, g)
    hd, asd, defined = surface_metrics(p, g)
    assert defined
    got = (dice, jac, hd, asd)
    assert max(abs(a - b) for a, b in zip(got, want)) < 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.random((8, 8, 8)) < 0.3, rng.random((8, 8, 8)) < 0.3
    assert overlap_metrics(p, g) == overlap_metrics(g, p)
    a, b = surface_metrics(p, g), surface_metrics(g, p)
    assert abs(a[0] - b[0]) < 1e-12 and abs(a[1] - b[1]) < 1e-12


def test_examples():
    m = np.zeros((4, 4, 4), bool)
    m[1:3, 1:3, 1] = True
    assert overlap_metrics(m, m) == (1.0, 1.0)
    assert surface_metrics(m, m)[:2] == (0.0, 0.0)
    other = np.zeros_like(m)
    other[0, 0, 3] = True
    assert overlap_metrics(m, other) == (0.0, 0.0)
    p, g = np.zeros((8,), bool), np.zeros((8,), bool)
    p[:4], g[2:6] = True, True
    d, j = overlap_metrics(p.reshape(2, 2, 2), g.reshape(2, 2, 2))
    assert d == 0.5 and j == pytest.approx(1 / 3, abs=1e-15)
    assert overlap_metrics(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == (1.0, 1.0)


def test_single_voxels_three_apart():
    p, g = np.zeros((8, 8, 8), bool), np.zeros((8, 8, 8), bool)
    p[2, 4, 4], g[5, 4, 4] = True, True
    hd, asd, defined = surface_metrics(p, g)
    assert defined and hd == 3.0 and asd == 3.0


def test_undefined_when_empty():
    p = np.zeros((4, 4, 4), bool)
    g = p.copy()
    g[1, 1, 1] = True
    hd, asd, defined = surface_metrics(p, g)
    assert not defined and math.isnan(hd) and math.isnan(asd)
    rep = evaluate_case(p, g)
    assert rep.dice == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        overlap_metrics(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_jaccard_not_above_dice():
    rng = np.random.default_rng(0)
    for _ in range(50):
        d, j = overlap_metrics(rng.random((5, 5, 5)) < 0.4, rng.random((5, 5, 5)) < 0.4)
        assert j <= d + 1e-15


def test_gap_report():
    assert gap_report([("labeled", 0.9), ("labeled", 0.9), ("unlabeled", 0.8)]) == pytest.approx((0.9, 0.8, 0.1))
    assert gap_report([("labeled", 0.7), ("unlabeled", 0.7)])[2] == 0.0
    with pytest.raises(GapUndefined):
        gap_report([("labeled", 0.9)])


def test_csv_and_summary():
    rows = [{"case_id": 1, "role": "test", "dice": 0.5, "jaccard": 1 / 3, "hd95": 2.0, "asd": 1.0},
            {"case_id": 2, "role": "test", "dice": 0.7, "jaccard": 0.5, "hd95": math.nan, "asd": math.nan}]
    text = cases_to_csv(rows)
    assert text.splitlines()[0] == ",".join(CSV_FIELDS)
    assert len(text.splitlines()) == 3
    ms = mean_std([0.5, 0.7, math.nan])
    assert ms["mean"] == pytest.approx(0.6) and ms["std"] == pytest.approx(0.1) and ms["n"] == 2
