"""Three-level 3D encoder-decoder, mean-teacher EMA and the SCKP checkpoint format."""
from __future__ import annotations

import copy
import math
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import DTYPE, ContractError, make_rng

NUM_CLASSES = 2
CKPT_MAGIC = b"SCKP"
CKPT_VERSION = 1


def _conv_weight(rng, c_out, c_in, k, dtype):
    fan_in = c_in * k**3
    w = rng.standard_normal((c_out, c_in, k, k, k)) * math.sqrt(2.0 / fan_in)
    return nn.Parameter(torch.tensor(w, dtype=dtype))


class SegNet(nn.Module):
    """Encoder 1->8->16->32, decoder 32(+16)->16 at half resolution, 16(+8)->8 at full.

    ``tap_level`` picks the exported feature map: 1 is the half-resolution decoder
    stage (D=16), 0 the full-resolution one (D=8).
    """

    widths = (8, 16, 32)

    def __init__(self, seed: int = 0, tap_level: int = 1, dtype=DTYPE, zero_head: bool = False):
        super().__init__()
        if tap_level not in (0, 1):
            raise ContractError(f"tap_level must be 0 or 1, got {tap_level}")
        self.tap_level = tap_level
        rng = make_rng(seed, 101)
        c1, c2, c3 = self.widths
        self.enc1_w = _conv_weight(rng, c1, 1, 3, dtype)
        self.enc2_w = _conv_weight(rng, c2, c1, 3, dtype)
        self.enc3_w = _conv_weight(rng, c3, c2, 3, dtype)
        self.dec2_w = _conv_weight(rng, c2, c3 + c2, 3, dtype)
        self.dec1_w = _conv_weight(rng, c1, c2 + c1, 3, dtype)
        self.enc1_b = nn.Parameter(torch.zeros(c1, dtype=dtype))
        self.enc2_b = nn.Parameter(torch.zeros(c2, dtype=dtype))
        self.enc3_b = nn.Parameter(torch.zeros(c3, dtype=dtype))
        self.dec2_b = nn.Parameter(torch.zeros(c2, dtype=dtype))
        self.dec1_b = nn.Parameter(torch.zeros(c1, dtype=dtype))
        head = np.zeros((NUM_CLASSES, c1, 1, 1, 1)) if zero_head else rng.standard_normal((NUM_CLASSES, c1, 1, 1, 1)) * math.sqrt(1.0 / c1)
        self.head_w = nn.Parameter(torch.tensor(head, dtype=dtype))
        self.head_b = nn.Parameter(torch.zeros(NUM_CLASSES, dtype=dtype))

    @property
    def feature_dim(self) -> int:
        return self.widths[1] if self.tap_level == 1 else self.widths[0]

    @property
    def feature_stride(self) -> int:
        return 2 if self.tap_level == 1 else 1

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``x`` [B,1,H,W,Z] -> (logits [B,2,H,W,Z], features [B,D,H/s,W/s,Z/s])."""
        if x.dim() != 5 or x.shape[1] != 1:
            raise ContractError(f"SegNet expects [B,1,H,W,Z], got {list(x.shape)}")
        if any(n % 4 for n in x.shape[2:]):
            raise ContractError(f"spatial dims must be divisible by 4, got {list(x.shape[2:])}")
        x = x.to(self.enc1_w.dtype)
        e1 = F.relu(F.conv3d(x, self.enc1_w, self.enc1_b, padding=1))
        e2 = F.relu(F.conv3d(_down(e1), self.enc2_w, self.enc2_b, padding=1))
        e3 = F.relu(F.conv3d(_down(e2), self.enc3_w, self.enc3_b, padding=1))
        d2 = F.relu(F.conv3d(torch.cat([_up(e3), e2], 1), self.dec2_w, self.dec2_b, padding=1))
        d1 = F.relu(F.conv3d(torch.cat([_up(d2), e1], 1), self.dec1_w, self.dec1_b, padding=1))
        logits = F.conv3d(d1, self.head_w, self.head_b)
        return logits, (d2 if self.tap_level == 1 else d1)


def _down(x):
    return F.interpolate(x, scale_factor=0.5, mode="trilinear", align_corners=False)


def _up(x):
    return F.interpolate(x, scale_factor=2.0, mode="trilinear", align_corners=False)


def seg_forward(volume: torch.Tensor, net: SegNet) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-volume forward: [1,H,W,Z] -> (logits [2,H,W,Z], features [D,h,w,z])."""
    if volume.dim() != 4 or volume.shape[0] != 1:
        raise ContractError(f"seg_forward expects [1,H,W,Z], got {list(volume.shape)}")
    logits, feats = net(volume.unsqueeze(0))
    return logits[0], feats[0]


class TeacherState:
    """EMA copy of a student network; never handed to an optimizer."""

    def __init__(self, student: SegNet, decay: float = 0.99):
        if not 0.0 <= decay <= 1.0:
            raise ContractError(f"EMA decay must be in [0,1], got {decay}")
        self.decay = decay
        self.net = copy.deepcopy(student)
        for p in self.net.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def __call__(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.net(x)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: nn.Module) -> TeacherState:
    t_params = dict(teacher.net.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ContractError("ema_update: parameter names differ")
    d = teacher.decay
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ContractError(f"ema_update: shape mismatch for {name}")
        s = s.detach()
        bound = d * (t.double() - s.double()).abs()
        t.mul_(d).add_(s, alpha=1.0 - d)
        _contract(t, s, bound)
    return teacher


@torch.no_grad()
def _contract(t: torch.Tensor, s: torch.Tensor, bound: torch.Tensor, max_steps: int = 8) -> None:
    """Round ``t`` toward ``s`` where rounding left |t - s| above ``bound``.

    Plain IEEE evaluation of the EMA update breaks |t' - s| <= d |t - s| by an ulp
    or two on a sizeable fraction of entries; stepping toward ``s`` restores it.
    """
    for _ in range(max_steps):
        bad = (t.double() - s.double()).abs() > bound
        if not bad.any():
            return
        t[bad] = torch.nextafter(t[bad], s[bad])
    bad = (t.double() - s.double()).abs() > bound
    t[bad] = s[bad]


def pseudo_label(logits: torch.Tensor) -> torch.Tensor:
    """Voxelwise argmax over the class axis (axis 0); ties go to the lower class index."""
    # torch.argmax returns the first maximal index
    return torch.argmax(logits.detach(), dim=0)


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor]) -> None:
    out = bytearray(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float64).contiguous().numpy()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    from .data import FormatError

    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(buf) < 8:
        raise FormatError("truncated checkpoint header", len(buf))
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos, out = 8, {}
    while pos < len(buf):
        start = pos
        try:
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"truncated record header: {exc}", start) from None
        count = int(np.prod(dims)) if rank else 1
        if pos + 8 * count > len(buf):
            raise FormatError(f"truncated data for {name!r}", len(buf))
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
        out[name] = torch.from_numpy(arr.copy())
        pos += 8 * count
    return out
