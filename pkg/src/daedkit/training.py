"""Optimisation: step samplers, AdamW, the per-step loss ledger and training loops."""

from __future__ import annotations

import csv
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffusion as D
from .network import DaeNet, EpsilonNet, UNet, flat_parameters, loss_and_grad, set_flat_parameters
from .numerics import Rng, gaussian
from .schedule import NoiseSchedule

LOG_COLUMNS = ("update", "t_drawn_mean", "loss", "loss_dae", "loss_diff", "grad_norm", "clipped")


@dataclass
class TrainConfig:
    objective: str = "simple"  # simple | vlb
    sampler: str = "uniform"  # uniform | beta_weighted
    batch_size: int = 32
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0
    seed: int = 0
    model: str = "ddgm"  # ddgm | daed
    variance_mode: str | None = None  # None: beta_tilde for vlb, beta for simple
    snapshot_fractions: tuple[float, ...] = (0.02, 0.1, 0.25, 0.5, 0.75, 1.0)

    def __post_init__(self):
        if self.objective not in ("simple", "vlb"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.sampler not in ("uniform", "beta_weighted"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.model not in ("ddgm", "daed"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.batch_size < 1 or self.steps < 1 or not self.lr >= 0:
            raise ValueError("need batch_size >= 1, steps >= 1 and lr >= 0")

    @property
    def kernel(self) -> D.ReverseKernelConfig:
        mode = self.variance_mode or ("beta_tilde" if self.objective == "vlb" else "beta")
        return D.ReverseKernelConfig(variance_mode=mode)


# --- step samplers -------------------------------------------------------------


@dataclass(frozen=True)
class StepSampler:
    kind: str
    weights: np.ndarray

    @classmethod
    def for_schedule(cls, kind: str, s: NoiseSchedule) -> "StepSampler":
        if kind == "uniform":
            w = np.full(s.T, 1.0 / s.T)
        elif kind == "beta_weighted":
            w = s.beta / s.beta.sum()
        else:
            raise ValueError(f"unknown sampler {kind!r}")
        return cls(kind, w)

    @classmethod
    def uniform(cls, T: int) -> "StepSampler":
        return cls("uniform", np.full(T, 1.0 / T))

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or not np.all(w > 0):
            raise ValueError("sampler weights must be positive")
        object.__setattr__(self, "weights", w / w.sum())

    @property
    def T(self) -> int:
        return len(self.weights)

    def sample(self, rng: Rng, n: int) -> torch.Tensor:
        if self.T == 1:
            return torch.ones(n, dtype=torch.long)
        if self.kind == "uniform":
            return torch.from_numpy(rng.integers(1, self.T + 1, n)).long()
        return torch.from_numpy(rng.choice(self.weights, n) + 1).long()


def sample_step(sampler: StepSampler, rng: Rng) -> int:
    return int(sampler.sample(rng, 1)[0])


# --- AdamW ------------------------------------------------------------------------


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: torch.Tensor) -> "AdamState":
        return cls(torch.zeros_like(params), torch.zeros_like(params))


def adamw_update(
    params: torch.Tensor,
    grads: torch.Tensor,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> tuple[torch.Tensor, AdamState, bool]:
    """One AdamW step on flat vectors; returns (params, state, applied).

    Non-finite gradients leave everything untouched and bump ``state.skipped``.
    """
    if params.shape != grads.shape:
        raise ValueError("params and grads must be aligned")
    if not torch.isfinite(grads).all():
        state.skipped += 1
        return params, state, False
    b1, b2 = betas
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    new = params * (1 - lr * weight_decay) - lr * m_hat / (v_hat.sqrt() + eps)
    return new, AdamState(m, v, step, state.skipped), True


# --- loss ledger --------------------------------------------------------------------


@dataclass
class LossLedger:
    """Running per-step sums of the training loss, with progress snapshots."""

    T: int
    sums: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)
    snapshots: list[tuple[float, np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.sums = np.zeros(self.T)
        self.counts = np.zeros(self.T, dtype=np.int64)

    def record(self, steps: torch.Tensor, losses: torch.Tensor) -> None:
        idx = steps.cpu().numpy() - 1
        np.add.at(self.sums, idx, losses.detach().double().cpu().numpy())
        np.add.at(self.counts, idx, 1)

    def snapshot(self, fraction: float) -> None:
        self.snapshots.append((fraction, self.sums.copy(), self.counts.copy()))

    @property
    def total_draws(self) -> int:
        return int(self.counts.sum())

    def means(self, since: float | None = None) -> np.ndarray:
        """Per-step mean loss, optionally only over draws after the snapshot at ``since``."""
        sums, counts = self.sums, self.counts
        if since is not None:
            base = [snap for snap in self.snapshots if snap[0] <= since + 1e-12]
            if base:
                _, s0, c0 = base[-1]
                sums, counts = sums - s0, counts - c0
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


# --- training state and loops ----------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    ledger: LossLedger
    log: list[dict] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    opt: dict[str, AdamState] = field(default_factory=dict)
    updates: int = 0

    def running_loss(self, window: int = 100, end: int | None = None, key: str = "loss") -> float:
        rows = self.log[:end] if end is not None else self.log
        vals = [r[key] for r in rows[-window:]]
        return float(np.mean(vals))

    def write_log(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for row in self.log:
                w.writerow(row)
        return path


def _optimize(net: UNet, loss_fn: Callable, cfg: TrainConfig, state: TrainState, name: str, update: int):
    bundle = loss_and_grad(net, loss_fn)
    grad, norm, clipped = bundle.grad, bundle.norm, False
    if cfg.grad_clip is not None and math.isfinite(norm) and norm > cfg.grad_clip:
        grad = grad * (cfg.grad_clip / norm)
        clipped = True
        state.events.append(f"update {update}: {name} grad norm {norm:.4g} clipped to {cfg.grad_clip}")
    params = flat_parameters(net)
    opt = state.opt.setdefault(name, AdamState.zeros_like(params))
    new, state.opt[name], applied = adamw_update(
        params, grad, opt, cfg.lr, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay)
    if applied:
        set_flat_parameters(net, new)
    else:
        state.events.append(f"update {update}: {name} non-finite gradient, update skipped")
    return bundle.loss, norm, clipped


def diffusion_objective(s: NoiseSchedule, cfg: TrainConfig, net, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor):
    """Per-image objective: eps squared error (simple) or the sampled bound term in nats per pixel (vlb)."""
    if cfg.objective == "simple":
        return D.eps_squared_error(s, net, x0, t, eps)
    return D.vlb_term(s, cfg.kernel, net, x0, t, eps) / x0[0].numel()


def _seed_dropout(net: UNet, rng: Rng) -> None:
    if net.topo.dropout:
        torch.manual_seed(int(rng.integers(0, 2**31 - 1, 1)[0]))


def _snapshot_due(cfg: TrainConfig, update: int) -> float | None:
    for f in cfg.snapshot_fractions:
        if update == max(1, round(f * cfg.steps)):
            return f
    return None


def train_ddgm(
    cfg: TrainConfig,
    s: NoiseSchedule,
    net: EpsilonNet,
    data: torch.Tensor,
    rng: Rng,
    on_update: Callable[[int, TrainState], None] | None = None,
) -> TrainState:
    """Fit ``net`` by drawing one step per image and optimising that term only."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    sampler = StepSampler.for_schedule(cfg.sampler, s)
    state = TrainState(cfg, LossLedger(s.T))
    _seed_dropout(net, rng)
    net.train()
    for update in range(1, cfg.steps + 1):
        x0 = data[torch.from_numpy(rng.integers(0, len(data), cfg.batch_size))]
        t = sampler.sample(rng, cfg.batch_size)
        eps = gaussian(rng, x0.shape, x0.dtype)
        per_image = {}

        def loss_fn(model, _):
            per_image["v"] = diffusion_objective(s, cfg, model, x0, t, eps)
            return per_image["v"].mean()

        loss, norm, clipped = _optimize(net, loss_fn, cfg, state, "generator", update)
        state.ledger.record(t, per_image["v"])
        state.log.append(dict(update=update, t_drawn_mean=float(t.double().mean()), loss=loss,
                              loss_dae=0.0, loss_diff=loss, grad_norm=norm, clipped=int(clipped)))
        state.updates = update
        if (f := _snapshot_due(cfg, update)) is not None:
            state.ledger.snapshot(f)
        if on_update is not None:
            on_update(update, state)
    net.eval()
    return state


def dae_loss(dae: DaeNet, x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Squared reconstruction error, mean over pixels and batch."""
    return ((x0 - dae(x1)) ** 2).mean()


def train_daed(
    cfg: TrainConfig,
    tail: NoiseSchedule | None,
    dae: DaeNet,
    eps_net: EpsilonNet | None,
    data: torch.Tensor,
    rng: Rng,
    beta1: float,
    on_update: Callable[[int, TrainState], None] | None = None,
) -> TrainState:
    """Train the denoiser and the tail generator on their own objectives.

    Each update draws fresh x1 ~ N(sqrt(1 - beta1) x0, beta1 I). The denoiser
    reconstructs x0 from x1; the generator fits the tail diffusion started at
    x1. The two losses are differentiated separately, so no gradient crosses
    between the parameter sets. With ``eps_net=None`` only the denoiser trains.
    """
    if not 0 <= beta1 < 1:
        raise ValueError("beta1 must lie in [0, 1)")
    if len(data) == 0:
        raise ValueError("empty dataset")
    sampler = StepSampler.for_schedule(cfg.sampler, tail) if eps_net is not None else None
    state = TrainState(cfg, LossLedger(tail.T if tail is not None else 1))
    _seed_dropout(dae, rng)
    dae.train()
    if eps_net is not None:
        eps_net.train()
    for update in range(1, cfg.steps + 1):
        x0 = data[torch.from_numpy(rng.integers(0, len(data), cfg.batch_size))]
        x1 = D.corrupt(x0, beta1, gaussian(rng, x0.shape, x0.dtype))
        l_dae, n_dae, c_dae = _optimize(dae, lambda m, _: dae_loss(m, x0, x1), cfg, state, "dae", update)
        l_diff, n_diff, c_diff, t_mean = 0.0, 0.0, False, float("nan")
        if eps_net is not None:
            t = sampler.sample(rng, cfg.batch_size)
            eps = gaussian(rng, x0.shape, x0.dtype)
            per_image = {}

            def loss_fn(model, _):
                per_image["v"] = diffusion_objective(tail, cfg, model, x1, t, eps)
                return per_image["v"].mean()

            l_diff, n_diff, c_diff = _optimize(eps_net, loss_fn, cfg, state, "generator", update)
            state.ledger.record(t, per_image["v"])
            t_mean = float(t.double().mean())
        state.log.append(dict(update=update, t_drawn_mean=t_mean, loss=l_dae + l_diff, loss_dae=l_dae,
                              loss_diff=l_diff, grad_norm=math.hypot(n_dae, n_diff),
                              clipped=int(c_dae or c_diff)))
        state.updates = update
        if (f := _snapshot_due(cfg, update)) is not None:
            state.ledger.snapshot(f)
        if on_update is not None:
            on_update(update, state)
    dae.eval()
    if eps_net is not None:
        eps_net.eval()
    return state


def train_dae(cfg: TrainConfig, dae: DaeNet, data: torch.Tensor, rng: Rng, beta1: float, **kw) -> TrainState:
    return train_daed(cfg, None, dae, None, data, rng, beta1, **kw)


# --- ledger reports ---------------------------------------------------------------------


def ledger_cumsum(ledger: LossLedger, since: float | None = None):
    """Per-step mean loss and its cumulative sum ordered by t, as an AnalysisReport."""
    from .analysis import AnalysisReport

    if ledger.total_draws == 0:
        raise ValueError("ledger is empty")
    means = ledger.means(since)
    filled = np.nan_to_num(means, nan=0.0)
    cum = np.cumsum(filled)
    total = cum[-1] if cum[-1] != 0 else 1.0
    rows = [[t + 1, float(means[t]), float(cum[t]), float(cum[t] / total), int(ledger.counts[t])]
            for t in range(ledger.T)]
    meta = {"T": ledger.T, "draws": ledger.total_draws, "window_since": "start" if since is None else since}
    for frac, sums, counts in ledger.snapshots:
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        meta[f"snapshot_{frac:g}_total"] = float(m.sum())
    return AnalysisReport("loss-dynamics", ["t", "mean_loss", "cumsum", "cum_fraction", "draws"], rows, meta)


def head_share(report, fraction: float = 0.1) -> float:
    """Share of the total per-step loss mass carried by the first ``fraction`` of steps."""
    T = len(report.rows)
    k = max(1, int(round(fraction * T)))
    return float(report.rows[k - 1][3])


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["kernel"] = cfg.kernel.variance_mode
    return d
