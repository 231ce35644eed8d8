"""Experiment drivers that turn schedules and trained models into tabular reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffusion as D
from .daed import DaedModel, daed_sample, nearest_step_for_noise_level, split_from_ddgm, step_for_noise_level
from .metrics import MAE_VISIBLE, MS_SSIM_VISIBLE, gaussian_frechet_report, mae_per_image, ms_ssim_report
from .network import Topology, build_from_topology, parameter_checksum
from .numerics import Rng, gaussian
from .schedule import NoiseSchedule, log_snr_curve, mean_square
from .training import LossLedger, TrainConfig, head_share, ledger_cumsum, train_dae


class ZeroSignalError(ValueError):
    pass


@dataclass
class AnalysisReport:
    kind: str
    columns: list[str]
    rows: list[list]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ValueError(f"row {row!r} does not match columns {self.columns}")

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self, path: str | Path) -> Path:
        """Write the table plus a ``<name>.manifest`` key=value sidecar."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        lines = [f"kind={self.kind}"] + [f"{k}={v}" for k, v in sorted(self.metadata.items())]
        path.with_suffix(path.suffix + ".manifest").write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "AnalysisReport":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            columns = next(reader)
            rows = [[_parse(v) for v in row] for row in reader]
        meta, kind = {}, "unknown"
        side = path.with_suffix(path.suffix + ".manifest")
        if side.exists():
            for line in side.read_text().splitlines():
                key, _, value = line.partition("=")
                if key == "kind":
                    kind = value
                else:
                    meta[key] = value
        return cls(kind, columns, rows, meta)


def _parse(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def _model_hash(net) -> str:
    return parameter_checksum(net)[:16] if net is not None else "none"


# --- SNR ----------------------------------------------------------------------------


def snr_report(s: NoiseSchedule, x0: torch.Tensor, dataset_id: str = "unknown") -> AnalysisReport:
    """Mean log-SNR per step, its spread over images, and its discrete derivative."""
    if len(x0) == 0:
        raise ValueError("empty dataset")
    per_image_ms = (x0.double() ** 2).flatten(1).mean(1).numpy()
    if not np.any(per_image_ms > 0):
        raise ZeroSignalError("zero signal: SNR is undefined for an all-zero dataset")
    ms = mean_square(x0)
    curve = log_snr_curve(s, ms)
    # per-image log-SNR differs from the mean curve by a constant shift, so its spread is step independent
    nz = per_image_ms[per_image_ms > 0]
    spread = float(np.std(np.log(nz))) if len(nz) > 1 else 0.0
    crossing = int(np.argmax(curve <= 0)) + 1 if np.any(curve <= 0) else None
    rows = []
    for i in range(s.T):
        delta = float(curve[i] - curve[i - 1]) if i else float("nan")
        rows.append([i + 1, float(curve[i]), spread, delta, int(crossing == i + 1)])
    meta = {"schedule": s.digest(), "schedule_kind": s.kind, "T": s.T, "dataset": dataset_id,
            "mean_square": ms, "zero_crossing_step": crossing,
            "zero_crossing_fraction": None if crossing is None else crossing / s.T,
            "zero_signal_images": int(np.sum(per_image_ms == 0)),
            "largest_drop_step": int(np.argmin(np.diff(curve))) + 2}
    return AnalysisReport("snr", ["t", "log_snr_mean", "log_snr_std", "delta_log_snr", "zero_crossing"], rows, meta)


# --- reconstruction ------------------------------------------------------------------------


def reconstruct(s: NoiseSchedule, cfg: D.ReverseKernelConfig, net, x0: torch.Tensor, beta: float, k: int,
                seed: int) -> torch.Tensor:
    """Corrupt with variance ``beta`` then run k reverse steps; noise is seeded by (seed, k)."""
    rng = Rng(seed).spawn(k)
    noisy = D.corrupt(x0, beta, gaussian(rng, x0.shape, x0.dtype))
    return D.reverse_chain(s, cfg, net, noisy, k, rng).clamp(-1.0, 1.0)


def _recon_row(x0, rec):
    errs = mae_per_image(x0, rec)
    sem = float(errs.std(ddof=1) / math.sqrt(len(errs))) if len(errs) > 1 else 0.0
    return float(errs.mean()), sem, ms_ssim_report(x0, rec).value


def recon_sweep(
    s: NoiseSchedule,
    cfg: D.ReverseKernelConfig,
    net,
    x0: torch.Tensor,
    t_max_fraction: float = 0.2,
    stride: int = 1,
    seed: int = 0,
    dataset_id: str = "unknown",
) -> AnalysisReport:
    """Reconstruction error of x_t ~ q(x_t | x0) pushed back through the reverse chain."""
    if not 0 < t_max_fraction <= 1:
        raise ValueError("t_max_fraction must lie in (0, 1]")
    t_max = max(1, int(round(t_max_fraction * s.T)))
    rows = []
    for t in range(1, t_max + 1, max(1, stride)):
        beta = 1.0 - s.alpha_bar_at(t)
        m, sem, ssim = _recon_row(x0, reconstruct(s, cfg, net, x0, beta, t, seed))
        rows.append([t, t / s.T, beta, m, sem, ssim])
    report = AnalysisReport("recon", ["t", "t_fraction", "noise_level", "mae", "mae_sem", "ms_ssim"], rows)
    maes = report.column("mae")
    floor = maes[0]
    above = [r[0] for r in rows if r[3] > 2 * floor]
    report.metadata.update({
        "schedule": s.digest(), "model": _model_hash(net), "dataset": dataset_id, "seed": seed,
        "variance_mode": cfg.variance_mode, "mae_floor": floor,
        "mae_doubling_step": above[0] if above else None,
        "mae_doubling_fraction": above[0] / s.T if above else None,
        "first_step_mae_above_0.1": next((r[0] for r in rows if r[3] > MAE_VISIBLE), None),
        "first_step_ms_ssim_below_0.9": next((r[0] for r in rows if r[5] < MS_SSIM_VISIBLE[0]), None),
    })
    return report


def mae_nondecreasing(report: AnalysisReport) -> bool:
    """True if no MAE entry drops below an earlier one by more than that point's standard error."""
    maes, sems = report.column("mae"), report.column("mae_sem")
    best = -math.inf
    for m, e in zip(maes, sems):
        if m < best - max(e, 1e-12):
            return False
        best = max(best, m)
    return True


def transfer_recon(
    s: NoiseSchedule,
    cfg: D.ReverseKernelConfig,
    net,
    targets: dict[str, torch.Tensor],
    beta: float = 0.1,
    seed: int = 0,
    dae=None,
) -> AnalysisReport:
    """Denoise single-shot corrupted targets with the diffusion chain and, if given, a DAE."""
    k = step_for_noise_level(s, beta)
    rows = []
    for name, x0 in targets.items():
        rows.append([name, "ddgm", k, beta, *_recon_row(x0, reconstruct(s, cfg, net, x0, beta, k, seed))])
        if dae is not None:
            rng = Rng(seed).spawn(k)
            noisy = D.corrupt(x0, beta, gaussian(rng, x0.shape, x0.dtype))
            with torch.no_grad():
                rec = dae(noisy).clamp(-1.0, 1.0)
            rows.append([name, "daed", 0, beta, *_recon_row(x0, rec)])
    meta = {"schedule": s.digest(), "model": _model_hash(net), "dae": _model_hash(dae), "seed": seed,
            "noise_level": beta, "ddgm_steps": k, "ddgm_noise_level": 1.0 - s.alpha_bar_at(k)}
    return AnalysisReport("transfer", ["dataset", "path", "steps", "noise_level", "mae", "mae_sem", "ms_ssim"],
                          rows, meta)


def transfer_lookup(report: AnalysisReport, dataset: str, path: str, column: str = "mae") -> float:
    i = report.columns.index(column)
    for r in report.rows:
        if r[0] == dataset and r[1] == path:
            return r[i]
    raise KeyError((dataset, path))


# --- switching point sweep --------------------------------------------------------------


def switch_sweep(
    s: NoiseSchedule,
    net,
    dae_cfg: TrainConfig,
    targets,
    data: torch.Tensor,
    heldout: torch.Tensor,
    seed: int = 0,
    n_samples: int = 256,
    dae_topology: Topology | None = None,
    proj_dim: int = 64,
    sample_cfg: D.ReverseKernelConfig = D.ReverseKernelConfig("beta"),
) -> AnalysisReport:
    """Split the diffusion model at each target beta1, train a DAE, and score samples."""
    topo = dae_topology or Topology(kind="dae", levels=net.topo.levels, channels=net.topo.channels,
                                    time_dim=0, in_channels=net.topo.in_channels)
    ms = mean_square(data)
    curve = log_snr_curve(s, ms)
    rows = []
    for i, target in enumerate(targets):
        k = nearest_step_for_noise_level(s, target)
        split = split_from_ddgm(s, net, k)
        dae = build_from_topology(topo, seed=seed + i)
        train_dae(dae_cfg, dae, data, Rng(seed).spawn(1, i), split.beta1)
        model = DaedModel.from_split(split, dae)
        shape = (n_samples, *data.shape[1:])
        samples = daed_sample(model, shape, Rng(seed).spawn(2, i), sample_cfg)
        fd = gaussian_frechet_report(samples, heldout, proj_dim, seed)
        consistency = abs((1.0 - s.alpha_bar_at(k)) - split.beta1)
        rows.append([float(target), k, split.beta1, consistency, float(curve[k - 1]), fd.value])
    rows.sort(key=lambda r: r[4])
    meta = {"schedule": s.digest(), "model": _model_hash(net), "seed": seed, "n_samples": n_samples,
            "dae_updates": dae_cfg.steps, "proj_dim": proj_dim}
    return AnalysisReport("switch", ["beta1_target", "k", "beta1", "beta1_consistency", "log_snr", "frechet"],
                          rows, meta)


# --- loss dynamics -------------------------------------------------------------------------


def loss_dynamics_report(ledger: LossLedger, since: float | None = None) -> AnalysisReport:
    report = ledger_cumsum(ledger, since)
    report.metadata["head_10pct_share"] = head_share(report, 0.1)
    report.metadata["first_step_share"] = float(report.rows[0][3])
    return report
