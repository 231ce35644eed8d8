"""Small U-Nets for noise prediction and denoising, gradients, and checkpoints.

Reverse-mode differentiation is torch autograd; parameters are initialised
from :class:`~daedkit.numerics.Rng` so a seed fully determines a network.
"""

from __future__ import annotations

import hashlib
import math
import struct
import zlib
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import Rng, ShapeError

KINDS = ("eps", "dae")


@dataclass(frozen=True)
class Topology:
    kind: str = "eps"
    levels: int = 2
    channels: tuple[int, ...] = (16, 32)
    time_dim: int = 32
    in_channels: int = 1
    kernel_size: int = 3
    dropout: float = 0.0
    attention: bool = False  # reserved; attention blocks are not implemented

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.levels < 1 or len(self.channels) != self.levels:
            raise ValueError("need levels >= 1 and one channel count per level")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.attention:
            raise NotImplementedError("attention blocks are not supported")
        if self.kind == "eps" and self.time_dim < 2:
            raise ValueError("noise predictors need a time embedding of size >= 2")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def uses_time(self) -> bool:
        return self.kind == "eps"

    def digest(self) -> bytes:
        desc = f"{self.kind}|{self.levels}|{self.channels}|{self.time_dim}|{self.in_channels}|{self.kernel_size}"
        return hashlib.sha256(desc.encode()).digest()[:8]


def sinusoidal_embedding(tau: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of normalised time ``tau`` in (0, 1]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=tau.dtype) / max(half - 1, 1))
    arg = (1000.0 * tau)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ConvBlock(nn.Module):
    """conv -> SiLU -> (+time bias) -> [dropout] -> conv -> SiLU."""

    def __init__(self, c_in: int, c_out: int, k: int, time_dim: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, k, padding=k // 2)
        self.conv2 = nn.Conv2d(c_out, c_out, k, padding=k // 2)
        self.time_proj = nn.Linear(time_dim, c_out) if time_dim else None
        self.dropout = nn.Dropout(dropout) if dropout else None

    def forward(self, x, temb):
        h = F.silu(self.conv1(x))
        if self.time_proj is not None:
            h = h + self.time_proj(temb)[:, :, None, None]
        if self.dropout is not None:
            h = self.dropout(h)
        return F.silu(self.conv2(h))


class UNet(nn.Module):
    def __init__(self, topo: Topology, seed: int = 0):
        super().__init__()
        self.topo = topo
        ch, k = topo.channels, topo.kernel_size
        tdim = topo.time_dim if topo.uses_time else 0
        if tdim:
            self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.down = nn.ModuleList()
        c_prev = topo.in_channels
        for c in ch:
            self.down.append(ConvBlock(c_prev, c, k, tdim, topo.dropout))
            c_prev = c
        self.up = nn.ModuleList(
            ConvBlock(ch[i + 1] + ch[i], ch[i], k, tdim, topo.dropout) for i in reversed(range(topo.levels - 1))
        )
        self.out = nn.Conv2d(ch[0], topo.in_channels, k, padding=k // 2)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Fan-in scaled uniform weights, zero biases, zero output layer."""
        rng = Rng(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("out.") or name.endswith("bias"):
                    p.zero_()
                    continue
                fan_in = p[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                u = rng.uniform(tuple(p.shape)) * 2.0 - 1.0
                p.copy_(torch.from_numpy(u * bound).to(p.dtype))

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.topo.in_channels:
            raise ShapeError(f"expected (B, {self.topo.in_channels}, H, W), got {tuple(x.shape)}")
        div = 2 ** (self.topo.levels - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(f"spatial size {tuple(x.shape[2:])} not divisible by {div}")

    def _run(self, x: torch.Tensor, temb) -> torch.Tensor:
        self._check_input(x)
        skips = []
        h = x
        for i, block in enumerate(self.down):
            if i:
                h = F.avg_pool2d(h, 2)
            h = block(h, temb)
            skips.append(h)
        skips.pop()
        for block in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.out(h)


class EpsilonNet(UNet):
    """Noise predictor eps_theta(x_t, tau) with tau = t / T."""

    def __init__(self, topo: Topology, seed: int = 0):
        if topo.kind != "eps":
            raise ValueError("EpsilonNet requires kind='eps'")
        super().__init__(topo, seed)

    def forward(self, x: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        if tau is None:
            raise ValueError("EpsilonNet needs a time input")
        tau = torch.as_tensor(tau, dtype=x.dtype).reshape(-1).expand(x.shape[0])
        temb = self.time_mlp(sinusoidal_embedding(tau, self.topo.time_dim))
        return self._run(x, temb)


class DaeNet(UNet):
    """Single-noise-level denoiser f_phi(x1)."""

    def __init__(self, topo: Topology, seed: int = 0):
        if topo.kind != "dae":
            raise ValueError("DaeNet requires kind='dae'")
        super().__init__(topo, seed)

    def forward(self, x: torch.Tensor, tau=None) -> torch.Tensor:
        if tau is not None:
            raise ValueError("DaeNet takes no time input")
        return self._run(x, None)


def build_unet(levels: int = 2, channels=(16, 32), time_dim: int = 32, in_channels: int = 1,
               seed: int = 0, kind: str = "eps", dropout: float = 0.0) -> UNet:
    topo = Topology(kind=kind, levels=levels, channels=tuple(channels), time_dim=time_dim,
                    in_channels=in_channels, dropout=dropout)
    return build_from_topology(topo, seed)


def build_from_topology(topo: Topology, seed: int = 0) -> UNet:
    return (EpsilonNet if topo.kind == "eps" else DaeNet)(topo, seed)


# --- flat parameter views and gradients --------------------------------------


def parameter_segments(net: nn.Module) -> list[tuple[str, int, int]]:
    """(name, start, stop) of each parameter inside the flat vector."""
    out, start = [], 0
    for name, p in net.named_parameters():
        out.append((name, start, start + p.numel()))
        start += p.numel()
    return out


def num_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def flat_parameters(net: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()])


def set_flat_parameters(net: nn.Module, flat: torch.Tensor) -> None:
    if flat.numel() != num_parameters(net):
        raise ShapeError("flat parameter length mismatch")
    with torch.no_grad():
        start = 0
        for p in net.parameters():
            p.copy_(flat[start:start + p.numel()].view_as(p))
            start += p.numel()


def parameter_checksum(net: nn.Module) -> str:
    return hashlib.sha256(flat_parameters(net).cpu().numpy().tobytes()).hexdigest()


class UnsupportedPrimitiveError(TypeError):
    pass


@dataclass
class GradientBundle:
    loss: float
    grad: torch.Tensor

    @property
    def finite(self) -> bool:
        return bool(torch.isfinite(self.grad).all()) and math.isfinite(self.loss)

    @property
    def norm(self) -> float:
        return float(self.grad.norm())


def loss_and_grad(net: nn.Module, loss_fn: Callable, batch=None) -> GradientBundle:
    """Evaluate ``loss_fn(net, batch)`` and its gradient w.r.t. every parameter.

    The loss must be built from torch operations; anything else (numpy
    arrays, python floats) is rejected because no gradient can flow through it.
    """
    params = list(net.parameters())
    loss = loss_fn(net, batch)
    if not isinstance(loss, torch.Tensor):
        raise UnsupportedPrimitiveError(
            f"loss_fn returned {type(loss).__module__}.{type(loss).__qualname__}; "
            "only torch operations are differentiable here")
    if loss.numel() != 1:
        raise ShapeError("loss must be a scalar")
    if loss.grad_fn is None:
        grads = [torch.zeros_like(p) for p in params]
    else:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    flat = torch.cat([g.reshape(-1) for g in grads])
    return GradientBundle(loss=float(loss.detach()), grad=flat.detach())


# --- checkpoints ---------------------------------------------------------------

MAGIC = b"DAEDCKPT"
VERSION = 1
_KIND_TAGS = {"eps": b"EPS\0", "dae": b"DAE\0"}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


class CheckpointError(Exception):
    code = "checkpoint"


class CheckpointMagicError(CheckpointError):
    code = "bad-magic"


class CheckpointVersionError(CheckpointError):
    code = "bad-version"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


class CheckpointTopologyError(CheckpointError):
    code = "topology"


class CheckpointCorruptError(CheckpointError):
    code = "crc"


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def check_frame(data: bytes) -> _Reader:
    """Validate magic, version and trailing CRC32; return a reader positioned after the version."""
    if len(data) < len(MAGIC) + 4 + 4:
        raise CheckpointTruncatedError("file too short for a checkpoint header")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointMagicError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointCorruptError("CRC mismatch")
    r = _Reader(body)
    r.pos = len(MAGIC) + 4
    return r


def seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def network_bytes(net: UNet) -> bytes:
    t = net.topo
    params = flat_parameters(net).to(torch.float32).cpu().numpy().astype("<f4")
    body = bytearray(MAGIC + struct.pack("<I", VERSION))
    body += _KIND_TAGS[t.kind]
    body += struct.pack("<IIIIIf", t.levels, t.in_channels, t.time_dim, t.kernel_size, len(t.channels), t.dropout)
    body += struct.pack(f"<{len(t.channels)}I", *t.channels)
    body += t.digest()
    body += struct.pack("<Q", params.size)
    body += params.tobytes()
    return seal(bytes(body))


def network_from_bytes(data: bytes, kind: str | None = None) -> UNet:
    r = check_frame(data)
    tag = r.take(4)
    if tag not in _TAG_KINDS:
        raise CheckpointTopologyError(f"unknown kind tag {tag!r}")
    found = _TAG_KINDS[tag]
    if kind is not None and kind != found:
        raise CheckpointTopologyError(f"checkpoint holds a {found!r} network, expected {kind!r}")
    levels, in_ch, tdim, ks, n_ch, dropout = r.unpack("<IIIIIf")
    channels = r.unpack(f"<{n_ch}I")
    digest = r.take(8)
    try:
        topo = Topology(kind=found, levels=levels, channels=channels, time_dim=tdim, in_channels=in_ch,
                        kernel_size=ks, dropout=round(dropout, 6))
    except (ValueError, NotImplementedError) as exc:
        raise CheckpointTopologyError(str(exc)) from exc
    if topo.digest() != digest:
        raise CheckpointTopologyError("topology hash mismatch")
    (count,) = r.unpack("<Q")
    net = build_from_topology(topo)
    if count != num_parameters(net):
        raise CheckpointTopologyError(f"parameter count {count} does not match topology ({num_parameters(net)})")
    params = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32)
    if r.pos != len(r.data):
        raise CheckpointTopologyError("trailing bytes after parameter block")
    set_flat_parameters(net, torch.from_numpy(params))
    return net


def save_checkpoint(net: UNet, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(network_bytes(net))
    return path


def load_checkpoint(path: str | Path, kind: str | None = None) -> UNet:
    return network_from_bytes(Path(path).read_bytes(), kind)
