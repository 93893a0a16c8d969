"""Property-based checks of module invariants over generated inputs."""
import math

import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sckan.backbone import SegNet, TeacherState, ema_update
from sckan.kan import SplineGrid, bspline_basis
from sckan.metrics import overlap_metrics, surface_metrics
from sckan.pcc import PcclConfig, decorrelation_loss
from sckan.trainer import warmup

finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(1, 10), st.lists(finite, min_size=1, max_size=30))
def test_partition_of_unity_any_input(p, G, xs):
    B = bspline_basis(torch.tensor(xs, dtype=torch.float64), SplineGrid(p, G))
    assert (B >= 0).all()
    assert (B.sum(-1) - 1).abs().max().item() < 1e-12
    assert int((B > 0).sum(-1).max()) <= p + 1


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10_000), st.data())
def test_warmup_bounded_and_monotone(s_max, data):
    a = data.draw(st.integers(0, s_max))
    b = data.draw(st.integers(a, s_max))
    wa, wb = warmup(a, s_max), warmup(b, s_max)
    assert math.exp(-5) - 1e-15 <= wa <= wb <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_decorrelation_in_unit_range(seed, alpha):
    rng = np.random.default_rng(seed)
    groups = [{c: torch.from_numpy(rng.normal(size=(3, 4))) for c in range(2)} for _ in range(2)]
    val, n = decorrelation_loss(groups, PcclConfig(alpha=alpha))
    assert n == 2
    assert 0.0 <= val.item() <= 1.0 - alpha + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.7), st.floats(0.05, 0.7))
def test_metrics_symmetric_and_bounded(seed, fp, fg):
    rng = np.random.default_rng(seed)
    p, g = rng.random((6, 6, 6)) < fp, rng.random((6, 6, 6)) < fg
    d1, j1 = overlap_metrics(p, g)
    d2, j2 = overlap_metrics(g, p)
    assert d1 == d2 and j1 == j2
    assert 0.0 <= j1 <= d1 <= 1.0
    h1, a1, ok1 = surface_metrics(p, g)
    h2, a2, ok2 = surface_metrics(g, p)
    assert ok1 == ok2
    if ok1:
        assert h1 == h2 and abs(a1 - a2) < 1e-12
        assert h1 >= 0.0 and a1 >= 0.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 1000), st.floats(0.0, 1.0), st.sampled_from([torch.float32, torch.float64]))
def test_ema_contraction_any_decay(seed_s, seed_t, decay, dtype):
    student = SegNet(seed_s, dtype=dtype)
    teacher = TeacherState(SegNet(seed_t, dtype=dtype), decay)
    before = [t.clone() for t in teacher.net.parameters()]
    ema_update(teacher, student)
    for b, t, s in zip(before, teacher.net.parameters(), student.parameters()):
        assert torch.all((t.double() - s.double()).abs() <= decay * (b.double() - s.double()).abs())
