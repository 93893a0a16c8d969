"""Synthetic curved-tube phantoms, dataset splits, random crops and the SCKV volume format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .numerics import ContractError, make_rng

VOLUME_MAGIC = b"SCKV"
VOLUME_VERSION = 1
HEADER_SIZE = 24
DTYPE_F64, DTYPE_U8 = 0, 1
FG_FRACTION = (0.005, 0.15)
MAX_ATTEMPTS = 20


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class GenerationFailed(RuntimeError):
    def __init__(self, seed: int):
        super().__init__(f"phantom generation failed for seed {seed} after {MAX_ATTEMPTS} attempts")
        self.seed = seed


@dataclass
class Phantom:
    volume: np.ndarray  # float64 in [0, 1]
    mask: np.ndarray  # uint8 in {0, 1}
    gen_axis: np.ndarray  # unit vector from head end to tail end
    seed: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.volume.shape)


def _bezier(p0, p1, p2, t):
    t = t[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _try_phantom(rng: np.random.Generator, shape: tuple[int, int, int]) -> Phantom | None:
    dims = np.asarray(shape, dtype=float)
    s = dims.min()

    direction = np.array([1.0, rng.normal(0, 0.3), rng.normal(0, 0.3)])
    direction /= np.linalg.norm(direction)
    length = rng.uniform(0.55, 0.75) * s
    center = dims / 2 + rng.uniform(-0.06, 0.06, size=3) * dims
    p0 = center - direction * length / 2
    p2 = center + direction * length / 2
    normal = np.cross(direction, rng.normal(size=3))
    normal /= np.linalg.norm(normal)
    p1 = center + normal * rng.uniform(0.05, 0.2) * length
    r_head = rng.uniform(0.09, 0.12) * s
    r_tail = rng.uniform(0.045, 0.06) * s

    ts = np.linspace(0.0, 1.0, 160)
    spine = _bezier(p0, p1, p2, ts)
    radius = r_head + (r_tail - r_head) * ts

    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in shape], indexing="ij"), -1)
    dist, nearest = cKDTree(spine).query(grid.reshape(-1, 3))
    mask = (dist <= radius[nearest]).reshape(shape)

    frac = mask.mean()
    if not FG_FRACTION[0] <= frac <= FG_FRACTION[1]:
        return None
    border = np.ones(shape, bool)
    border[1:-1, 1:-1, 1:-1] = False
    if (mask & border).any():
        return None

    texture = ndimage.gaussian_filter(rng.normal(size=shape), 1.0)
    texture /= max(texture.std(), 1e-12)
    volume = 0.25 + 0.08 * rng.normal(size=shape)
    volume[mask] = 0.62 + 0.05 * texture[mask] + 0.06 * rng.normal(size=int(mask.sum()))

    keep_out = ndimage.binary_dilation(mask, iterations=2)
    placed, tries = 0, 0
    target = int(rng.integers(2, 6))
    while placed < target:
        tries += 1
        if tries > 60:
            return None
        c = rng.uniform(0.15, 0.85, size=3) * dims
        radii = rng.uniform(0.05, 0.11, size=3) * s
        ell = ((((grid - c) / radii) ** 2).sum(-1)) <= 1.0
        if not ell.any() or (ell & keep_out).any():
            continue
        volume[ell] = rng.uniform(0.45, 0.75) + 0.06 * rng.normal(size=int(ell.sum()))
        keep_out |= ell
        placed += 1

    volume = np.clip(volume, 0.0, 1.0)
    return Phantom(volume=volume, mask=mask.astype(np.uint8), gen_axis=direction, seed=0)


def gen_phantom(seed: int, shape: Sequence[int] = (48, 48, 48)) -> Phantom:
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 16:
        raise ContractError(f"phantom shape must be 3 dims each >= 16, got {shape}")
    for attempt in range(MAX_ATTEMPTS):
        ph = _try_phantom(make_rng(seed, attempt), shape)
        if ph is not None:
            ph.seed = seed
            return ph
    raise GenerationFailed(seed)


def phantom_seed(dataset_seed: int, index: int) -> int:
    """Phantom ``index`` depends only on (dataset seed, index)."""
    return int(make_rng(dataset_seed, 7, index).integers(0, 2**31 - 1))


@dataclass
class SplitManifest:
    dataset_seed: int
    shape: list[int]
    entries: list[dict] = field(default_factory=list)  # id, role, seed, gen_axis

    def ids(self, role: str) -> list[int]:
        return [e["id"] for e in self.entries if e["role"] == role]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls(**json.loads(Path(path).read_text()))


def make_split(
    dataset_seed: int, count: int, labeled_frac: float = 0.10, test_frac: float = 0.15
) -> dict[int, str]:
    if count < 3:
        raise ContractError("need at least 3 phantoms for a labeled/unlabeled/test split")
    n_lab = max(1, int(round(labeled_frac * count)))
    n_test = max(1, int(round(test_frac * count)))
    if n_lab + n_test >= count:
        raise ContractError(f"split leaves no unlabeled phantoms (count={count})")
    order = make_rng(dataset_seed, 11).permutation(count)
    roles = {}
    for rank, idx in enumerate(order):
        roles[int(idx)] = "labeled" if rank < n_lab else ("test" if rank < n_lab + n_test else "unlabeled")
    return roles


def random_crop(
    volume: np.ndarray, mask: np.ndarray, crop_size: int | Sequence[int], rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random crop holding at least one foreground voxel (mask-centred fallback)."""
    size = np.broadcast_to(np.asarray(crop_size, dtype=int), (3,))
    shape = np.asarray(volume.shape)
    if (size > shape).any():
        raise ContractError(f"crop {size.tolist()} larger than volume {shape.tolist()}")
    corner = None
    for _ in range(50):
        c = np.array([rng.integers(0, n + 1) for n in shape - size])
        sl = tuple(slice(a, a + b) for a, b in zip(c, size))
        if mask[sl].any():
            corner = c
            break
    if corner is None:
        fg = np.argwhere(mask)
        if len(fg):
            anchor = fg[np.argmin(((fg - fg.mean(0)) ** 2).sum(1))]
            corner = np.clip(anchor - size // 2, 0, shape - size)
        else:
            corner = (shape - size) // 2
    sl = tuple(slice(int(a), int(a + b)) for a, b in zip(corner, size))
    return volume[sl].copy(), mask[sl].copy()


def write_volume(path: str | Path, array: np.ndarray) -> None:
    """24-byte header (magic, version u32, dtype u8, rank u8, 2 reserved bytes, dims 3 x u32)."""
    if array.ndim != 3:
        raise ContractError("only rank-3 volumes are supported")
    if array.dtype == np.float64:
        code, payload = DTYPE_F64, array.astype("<f8")
    elif array.dtype in (np.uint8, np.bool_):
        code, payload = DTYPE_U8, array.astype(np.uint8)
    else:
        raise ContractError(f"unsupported dtype {array.dtype}")
    header = VOLUME_MAGIC + struct.pack("<IBBH3I", VOLUME_VERSION, code, 3, 0, *array.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(payload).tobytes())


def read_volume(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != VOLUME_MAGIC:
        raise FormatError("bad magic", 0)
    if len(buf) < HEADER_SIZE:
        raise FormatError("truncated header", len(buf))
    version, code, rank, reserved, *dims = struct.unpack_from("<IBBH3I", buf, 4)
    if version != VOLUME_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in (DTYPE_F64, DTYPE_U8):
        raise FormatError(f"unknown dtype code {code}", 8)
    if rank != 3:
        raise FormatError(f"unsupported rank {rank}", 9)
    if reserved != 0:
        raise FormatError("nonzero reserved bytes", 10)
    itemsize = 8 if code == DTYPE_F64 else 1
    need = HEADER_SIZE + itemsize * int(np.prod(dims))
    if len(buf) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after payload", need)
    dtype = "<f8" if code == DTYPE_F64 else np.uint8
    arr = np.frombuffer(buf, dtype=dtype, offset=HEADER_SIZE).reshape(dims)
    return arr.astype(np.float64 if code == DTYPE_F64 else np.uint8)


def volume_paths(root: str | Path, idx: int) -> tuple[Path, Path]:
    root = Path(root)
    return root / f"phantom_{idx:03d}_vol.sckv", root / f"phantom_{idx:03d}_mask.sckv"


def generate_corpus(
    out: str | Path,
    dataset_seed: int,
    count: int,
    shape: Sequence[int] = (48, 48, 48),
    labeled_frac: float = 0.10,
    test_frac: float = 0.15,
) -> SplitManifest:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    roles = make_split(dataset_seed, count, labeled_frac, test_frac)
    manifest = SplitManifest(dataset_seed=dataset_seed, shape=[int(n) for n in shape])
    for i in range(count):
        seed = phantom_seed(dataset_seed, i)
        ph = gen_phantom(seed, shape)
        vol_path, mask_path = volume_paths(out, i)
        write_volume(vol_path, ph.volume)
        write_volume(mask_path, ph.mask)
        manifest.entries.append(
            {"id": i, "role": roles[i], "seed": seed, "gen_axis": [round(float(v), 12) for v in ph.gen_axis]}
        )
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_corpus(root: str | Path) -> tuple[SplitManifest, dict[int, tuple[np.ndarray, np.ndarray]]]:
    manifest = SplitManifest.load(Path(root) / "manifest.json")
    cases = {}
    for e in manifest.entries:
        vol_path, mask_path = volume_paths(root, e["id"])
        cases[e["id"]] = (read_volume(vol_path), read_volume(mask_path))
    return manifest, cases
