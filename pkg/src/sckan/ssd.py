"""Structure-aware spatial decomposition: K-means on mask coordinates and ordered prototypes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .numerics import ContractError

MAX_ITER = 50


class InsufficientVoxels(ValueError):
    pass


@dataclass
class Skipped:
    class_id: int
    reason: str


@dataclass
class RegionDecomposition:
    assignments: np.ndarray  # [N] cluster index per valid voxel
    centers: np.ndarray  # [K, 3] voxel units
    class_id: int = -1
    valid_count: int = 0
    order: np.ndarray | None = None  # rank -> cluster index
    converged: bool = True
    iterations: int = 0


@dataclass
class PrototypeSet:
    class_id: int
    subregion: torch.Tensor  # [K, D], rank-ordered
    mean: torch.Tensor  # [D]
    source: str  # "labeled" | "unlabeled"
    centers: np.ndarray | None = None  # rank-ordered region centers


def _kmeans_pp(coords: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(coords)
    centers = [coords[int(rng.integers(n))]]
    d2 = ((coords - centers[0]) ** 2).sum(1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, total), side="right"))
            idx = min(idx, n - 1)
        centers.append(coords[idx])
        d2 = np.minimum(d2, ((coords - coords[idx]) ** 2).sum(1))
    return np.array(centers, dtype=float)


def _assign(coords, centers):
    d2 = ((coords[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1), d2


def kmeans_spatial(coords: np.ndarray, K: int, rng: np.random.Generator) -> RegionDecomposition:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are refilled with the point farthest from its own center.
    Stops when no assignment changes, or after 50 iterations (``converged=False``).
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 3)
    n = len(coords)
    if K < 1:
        raise ContractError("K must be >= 1")
    if n < K:
        raise InsufficientVoxels(f"{n} valid voxels for K={K}")
    centers = _kmeans_pp(coords, K, rng)
    labels = None
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        new, d2 = _assign(coords, centers)
        counts = np.bincount(new, minlength=K)
        for k in np.flatnonzero(counts == 0):
            own = d2[np.arange(n), new]
            # only steal from clusters that keep at least one member
            own = np.where(counts[new] > 1, own, -1.0)
            far = int(np.argmax(own))
            counts[new[far]] -= 1
            new[far] = k
            counts[k] = 1
        if labels is not None and np.array_equal(new, labels):
            converged = True
            break
        labels = new
        counts = np.bincount(labels, minlength=K)[:, None]
        sums = np.stack([np.bincount(labels, weights=coords[:, d], minlength=K) for d in range(3)], 1)
        centers = sums / counts
    return RegionDecomposition(
        assignments=labels, centers=centers, valid_count=n, converged=converged, iterations=it
    )


def principal_axis(coords: np.ndarray) -> np.ndarray | None:
    """Unit eigenvector of the largest covariance eigenvalue, sign-fixed; None if degenerate."""
    c = np.asarray(coords, dtype=float).reshape(-1, 3)
    if len(c) < 2:
        return None
    c = c - c.mean(0)
    cov = c.T @ c / len(c)
    w, v = np.linalg.eigh(cov)
    if w[-1] <= 1e-12:
        return None
    axis = v[:, -1]
    mags = np.abs(axis)
    lead = int(np.flatnonzero(mags >= mags.max() - 1e-12)[0])
    if axis[lead] < 0:
        axis = -axis
    return axis


def order_regions(centers: np.ndarray, all_coords: np.ndarray) -> np.ndarray:
    """Permutation mapping anatomical rank to cluster index, ascending along the principal axis."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    K = len(centers)
    axis = principal_axis(all_coords)
    if axis is None:
        keys = [(c[2], c[1], c[0]) for c in centers]
    else:
        proj = centers @ axis
        keys = [(round(float(p), 9), *c) for p, c in zip(proj, centers)]
    return np.array(sorted(range(K), key=lambda k: keys[k]), dtype=int)


def extract_prototypes(
    features: torch.Tensor,
    mask: np.ndarray | torch.Tensor,
    class_id: int,
    K: int,
    rng: np.random.Generator,
    source: str = "labeled",
) -> PrototypeSet | Skipped:
    """Mean feature over each of K ordered spatial subregions of ``mask == class_id``.

    ``features`` is [D, h, w, z]; ``mask`` must already be at feature resolution.
    Cluster assignments are constants: gradients reach only the feature averages.
    """
    mask = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    if tuple(mask.shape) != tuple(features.shape[1:]):
        raise ContractError(f"mask {mask.shape} not aligned with features {tuple(features.shape)}")
    coords = np.argwhere(mask == class_id)
    if len(coords) < max(K, 1):
        return Skipped(class_id, f"{len(coords)} voxels for K={K}")
    if K == 1:
        labels = np.zeros(len(coords), dtype=int)
        order = np.array([0])
        centers = coords.mean(0, keepdims=True)
    else:
        dec = kmeans_spatial(coords, K, rng)
        order = order_regions(dec.centers, coords)
        labels, centers = dec.assignments, dec.centers
    flat = features.reshape(features.shape[0], -1)  # [D, h*w*z]
    lin = np.ravel_multi_index(coords.T, mask.shape)
    protos = []
    for k in order:
        idx = torch.from_numpy(lin[labels == k])
        protos.append(flat[:, idx].mean(1))
    sub = torch.stack(protos)
    return PrototypeSet(class_id, sub, sub.mean(0), source, centers[order])
