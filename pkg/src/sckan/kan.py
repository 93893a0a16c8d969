"""B-spline basis evaluation and the KANLinear layer."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE, ContractError


@dataclass(frozen=True)
class SplineGrid:
    """Uniform knot vector over ``[g_min, g_max]`` extended by ``degree`` knots each side."""

    degree: int = 3
    num_intervals: int = 5
    g_min: float = -1.0
    g_max: float = 1.0

    def __post_init__(self):
        if self.degree < 1 or self.num_intervals < 1 or not self.g_max > self.g_min:
            raise ContractError(f"invalid spline grid {self}")

    @property
    def num_basis(self) -> int:
        return self.num_intervals + self.degree

    @property
    def spacing(self) -> float:
        return (self.g_max - self.g_min) / self.num_intervals

    def knots(self, dtype=DTYPE) -> torch.Tensor:
        p, G = self.degree, self.num_intervals
        idx = torch.arange(-p, G + p + 1, dtype=dtype)
        return self.g_min + idx * self.spacing

    def greville(self, dtype=DTYPE) -> torch.Tensor:
        """Greville abscissae: the spline with these coefficients is the identity map."""
        t = self.knots(dtype)
        p = self.degree
        return torch.stack([t[b + 1 : b + p + 1].mean() for b in range(self.num_basis)])


def bspline_basis(x: torch.Tensor, grid: SplineGrid) -> torch.Tensor:
    """All ``G + p`` basis values at each entry of ``x``; output shape ``x.shape + (G+p,)``.

    Inputs are clamped into the grid range first, so the result always sums to one.
    """
    t = grid.knots(x.dtype)
    x = x.clamp(grid.g_min, grid.g_max).unsqueeze(-1)
    # x == g_max lands in the first extension span; the dropped basis there is 0 for p >= 1
    bases = ((x >= t[:-1]) & (x < t[1:])).to(x.dtype)
    for k in range(1, grid.degree + 1):
        left = (x - t[: -(k + 1)]) / (t[k:-1] - t[: -(k + 1)]) * bases[..., :-1]
        right = (t[k + 1 :] - x) / (t[k + 1 :] - t[1:-k]) * bases[..., 1:]
        bases = left + right
    return bases


@dataclass
class KanLayerParams:
    grid: SplineGrid
    spline_coeffs: torch.Tensor  # [out, in, G+p]
    base_weight: torch.Tensor  # [out, in]
    spline_scale: torch.Tensor  # [out, in]
    use_base: bool = True

    @property
    def in_dim(self) -> int:
        return self.base_weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.base_weight.shape[0]

    def tensors(self) -> list[torch.Tensor]:
        return [self.spline_coeffs, self.base_weight, self.spline_scale]


def kan_forward(x: torch.Tensor, params: KanLayerParams) -> torch.Tensor:
    """``out[n, j] = sum_i base_weight[j,i] silu(x[n,i]) + spline_scale[j,i] sum_b c[j,i,b] B_b(x[n,i])``."""
    if x.dim() != 2 or x.shape[1] != params.in_dim:
        raise ContractError(f"kan_forward: expected [N, {params.in_dim}], got {list(x.shape)}")
    basis = bspline_basis(x, params.grid)  # [N, in, nb]
    weights = params.spline_coeffs * params.spline_scale.unsqueeze(-1)
    out = torch.einsum("nib,oib->no", basis, weights)
    if params.use_base:
        out = out + F.silu(x) @ params.base_weight.transpose(0, 1)
    return out


def kan_init(
    in_dim: int,
    out_dim: int,
    G: int = 5,
    p: int = 3,
    rng: np.random.Generator | None = None,
    use_base: bool = True,
    dtype=DTYPE,
) -> KanLayerParams:
    if in_dim < 1 or out_dim < 1:
        raise ContractError("kan_init: dimensions must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    grid = SplineGrid(degree=p, num_intervals=G)
    coeffs = rng.standard_normal((out_dim, in_dim, G + p)) * (0.1 / math.sqrt(in_dim))
    base = rng.standard_normal((out_dim, in_dim)) * math.sqrt(2.0 / in_dim)
    return KanLayerParams(
        grid=grid,
        spline_coeffs=torch.tensor(coeffs, dtype=dtype),
        base_weight=torch.tensor(base, dtype=dtype),
        spline_scale=torch.ones(out_dim, in_dim, dtype=dtype),
        use_base=use_base,
    )


class KANLinear(nn.Module):
    """Module wrapper owning a :class:`KanLayerParams` as trainable parameters."""

    def __init__(self, in_dim, out_dim, G=5, p=3, rng=None, use_base=True, dtype=DTYPE):
        super().__init__()
        init = kan_init(in_dim, out_dim, G, p, rng, use_base, dtype)
        self.grid = init.grid
        self.use_base = use_base
        self.spline_coeffs = nn.Parameter(init.spline_coeffs)
        self.base_weight = nn.Parameter(init.base_weight)
        self.spline_scale = nn.Parameter(init.spline_scale)

    @property
    def params(self) -> KanLayerParams:
        return KanLayerParams(self.grid, self.spline_coeffs, self.base_weight, self.spline_scale, self.use_base)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-1]
        out = kan_forward(x.reshape(-1, x.shape[-1]), self.params)
        return out.reshape(*lead, out.shape[-1])
