"""Denoising auto-encoder plus diffusion generator (DAED).

The composite model draws x1 from a diffusion generator that runs over the
tail of a noise schedule, then maps x1 to a clean image with a single pass of
a denoising auto-encoder. It can be trained from scratch or built by cutting
a trained diffusion model at step k and handing the first k steps to a DAE.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import diffusion as D
from .network import (
    CheckpointTopologyError,
    DaeNet,
    EpsilonNet,
    MAGIC,
    VERSION,
    check_frame,
    network_bytes,
    network_from_bytes,
    seal,
)
from .numerics import Rng, gaussian
from .schedule import NoiseSchedule, StepError, StepLookup, step_at_log_snr

# (beta1, tail length) pairings for models trained from scratch, keyed by dataset;
# "T" is the length of the plain diffusion baseline.
TAIL_PRESETS = {
    "fashionmnist": {"T": 500, "tails": {0.001: 499, 0.025: 489, 0.1: 468, 0.2: 445, 0.3: 426}},
    "cifar10": {"T": 1000, "tails": {0.001: 999, 0.025: 979, 0.1: 900, 0.2: 891}},
    "celeba": {"T": 1000, "tails": {0.001: 999, 0.025: 979, 0.1: 900, 0.2: 890}},
}

SWEEP_BETA1 = (0.001, 0.025, 0.1, 0.2)


class NoiseLevelError(ValueError):
    pass


def preset_tail_steps(dataset: str, beta1: float) -> int:
    try:
        return TAIL_PRESETS[dataset.lower()]["tails"][beta1]
    except KeyError as exc:
        raise KeyError(f"no preset for dataset={dataset!r}, beta1={beta1}") from exc


class OffsetGenerator(nn.Module):
    """Expose a noise predictor trained on the full schedule as a tail-schedule predictor.

    Tail step j is source step k + j. The prediction is rescaled so that the
    tail reverse mean equals the source reverse mean at that step.
    """

    def __init__(self, net: EpsilonNet, source: NoiseSchedule, k: int):
        super().__init__()
        self.net, self.source, self.k = net, source, int(k)
        self.tail_T = source.T - self.k
        ab = source.alpha_bar
        tail_ab = ab[self.k:] / ab[self.k - 1]
        self.register_buffer("scale", torch.from_numpy(np.sqrt((1 - tail_ab) / (1 - ab[self.k:]))), persistent=False)

    @property
    def topo(self):
        return self.net.topo

    def forward(self, x: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        tau = torch.as_tensor(tau, dtype=x.dtype).reshape(-1).expand(x.shape[0])
        j = torch.round(tau * self.tail_T).long().clamp(1, self.tail_T)
        src_tau = (j + self.k).to(x.dtype) / self.source.T
        return self.scale.to(x.dtype)[j - 1].view(-1, 1, 1, 1) * self.net(x, src_tau)


@dataclass
class Split:
    beta1: float
    tail: NoiseSchedule
    generator: OffsetGenerator
    k: int


def tail_schedule(s: NoiseSchedule, k: int) -> NoiseSchedule:
    """Steps k+1..T of ``s`` reindexed from 1; its alpha_bar equals alpha_bar_{k+j} / alpha_bar_k."""
    return NoiseSchedule(s.beta[k:], kind="tail")


def split_from_ddgm(s: NoiseSchedule, net: EpsilonNet, k: int) -> Split:
    if not 1 <= k < s.T:
        raise StepError(f"split step {k} outside [1, {s.T - 1}]")
    if s.T - k < 1:
        raise StepError("nothing left for the generator")
    # 1 - alpha_bar_1 is beta_1 analytically; take it verbatim to avoid a rounding step
    beta1 = s.beta_at(1) if k == 1 else 1.0 - s.alpha_bar_at(k)
    return Split(beta1, tail_schedule(s, k), OffsetGenerator(net, s, k), k)


def step_for_noise_level(s: NoiseSchedule, beta: float) -> int:
    """Smallest k with 1 - alpha_bar_k >= beta."""
    hits = np.nonzero(1.0 - s.alpha_bar >= beta)[0]
    if hits.size == 0:
        raise NoiseLevelError(f"schedule too short for noise level {beta}")
    return int(hits[0]) + 1


def nearest_step_for_noise_level(s: NoiseSchedule, beta: float) -> int:
    return int(np.argmin(np.abs((1.0 - s.alpha_bar) - beta))) + 1


def choose_switch_point(s: NoiseSchedule, dataset_ms: float, target_log_snr: float = 4.0) -> StepLookup:
    return step_at_log_snr(s, dataset_ms, target_log_snr)


@dataclass
class DaedModel:
    beta1: float
    tail: NoiseSchedule
    dae: DaeNet
    generator: nn.Module
    switch_step: int | None = None

    def __post_init__(self):
        if not 0 <= self.beta1 < 1:
            raise ValueError("beta1 must lie in [0, 1)")

    @classmethod
    def from_split(cls, split: Split, dae: DaeNet) -> "DaedModel":
        return cls(split.beta1, split.tail, dae, split.generator, switch_step=split.k)


def daed_sample(
    m: DaedModel,
    shape,
    rng: Rng,
    cfg: D.ReverseKernelConfig = D.ReverseKernelConfig("beta"),
) -> torch.Tensor:
    """Generate x1 with the tail diffusion, then denoise it in one DAE pass."""
    x1 = D.ancestral_sample(m.tail, cfg, m.generator, shape, rng, clamp=False, final_noise=True)
    with torch.no_grad():
        return m.dae(x1).clamp(-1.0, 1.0)


def daed_objective(m: DaedModel, x0: torch.Tensor, rng: Rng, objective: str = "simple",
                   cfg: D.ReverseKernelConfig | None = None) -> dict[str, torch.Tensor]:
    """Denoiser and generator losses on one draw of x1 and their sum."""
    x1 = D.corrupt(x0, m.beta1, gaussian(rng, x0.shape, x0.dtype))
    loss_dae = ((x0 - m.dae(x1)) ** 2).mean()
    t = torch.from_numpy(rng.integers(1, m.tail.T + 1, x0.shape[0])).long()
    eps = gaussian(rng, x0.shape, x0.dtype)
    if objective == "simple":
        loss_diff = D.eps_squared_error(m.tail, m.generator, x1, t, eps).mean()
    elif objective == "vlb":
        kernel = cfg or D.ReverseKernelConfig("beta_tilde")
        loss_diff = (D.vlb_term(m.tail, kernel, m.generator, x1, t, eps) / x0[0].numel()).mean()
    else:
        raise ValueError(f"unknown objective {objective!r}")
    return {"loss_dae": loss_dae, "loss_diff": loss_diff, "total": loss_dae + loss_diff}


# --- model containers --------------------------------------------------------------


def _pack_schedule(s: NoiseSchedule | None) -> bytes:
    if s is None:
        return struct.pack("<I", 0)
    kind = s.kind.encode()
    return (struct.pack("<I", s.T) + s.beta.astype("<f8").tobytes()
            + struct.pack("<B", len(kind)) + kind + struct.pack("<d", s.cosine_offset or 0.0))


def _unpack_schedule(r) -> NoiseSchedule | None:
    (T,) = r.unpack("<I")
    if T == 0:
        return None
    beta = np.frombuffer(r.take(8 * T), dtype="<f8").astype(np.float64)
    (n,) = r.unpack("<B")
    kind = r.take(n).decode()
    (c,) = r.unpack("<d")
    return NoiseSchedule(beta, kind=kind, cosine_offset=c or None)


def _pack_blob(blob: bytes) -> bytes:
    return struct.pack("<Q", len(blob)) + blob


def _unpack_blob(r) -> bytes:
    (n,) = r.unpack("<Q")
    return r.take(n)


def _expect_tag(r, tag: bytes) -> None:
    found = r.take(4)
    if found != tag:
        raise CheckpointTopologyError(f"container kind {found!r}, expected {tag!r}")


def ddgm_bytes(s: NoiseSchedule, net: EpsilonNet) -> bytes:
    return seal(MAGIC + struct.pack("<I", VERSION) + b"DDGM" + _pack_schedule(s) + _pack_blob(network_bytes(net)))


def save_ddgm(path: str | Path, s: NoiseSchedule, net: EpsilonNet) -> Path:
    path = Path(path)
    path.write_bytes(ddgm_bytes(s, net))
    return path


def load_ddgm(path: str | Path) -> tuple[NoiseSchedule, EpsilonNet]:
    r = check_frame(Path(path).read_bytes())
    _expect_tag(r, b"DDGM")
    s = _unpack_schedule(r)
    net = network_from_bytes(_unpack_blob(r), kind="eps")
    return s, net


def daed_bytes(m: DaedModel) -> bytes:
    gen = m.generator
    source, k = (gen.source, gen.k) if isinstance(gen, OffsetGenerator) else (None, 0)
    inner = gen.net if isinstance(gen, OffsetGenerator) else gen
    body = MAGIC + struct.pack("<I", VERSION) + b"DAED"
    body += struct.pack("<di", m.beta1, -1 if m.switch_step is None else m.switch_step)
    body += _pack_schedule(m.tail) + _pack_schedule(source) + struct.pack("<I", k)
    body += _pack_blob(network_bytes(m.dae)) + _pack_blob(network_bytes(inner))
    return seal(body)


def save_daed(path: str | Path, m: DaedModel) -> Path:
    path = Path(path)
    path.write_bytes(daed_bytes(m))
    return path


def load_daed(path: str | Path) -> DaedModel:
    r = check_frame(Path(path).read_bytes())
    _expect_tag(r, b"DAED")
    beta1, switch = r.unpack("<di")
    tail = _unpack_schedule(r)
    source = _unpack_schedule(r)
    (k,) = r.unpack("<I")
    dae = network_from_bytes(_unpack_blob(r), kind="dae")
    net = network_from_bytes(_unpack_blob(r), kind="eps")
    generator = OffsetGenerator(net, source, k) if source is not None else net
    return DaedModel(beta1, tail, dae, generator, None if switch < 0 else switch)


def container_kind(path: str | Path) -> str:
    r = check_frame(Path(path).read_bytes())
    return r.take(4).rstrip(b"\0").decode()
