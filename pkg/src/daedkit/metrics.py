"""Reconstruction and distribution metrics: MAE, MS-SSIM and a Gaussian Frechet proxy."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import Rng, ShapeError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03

# reporting thresholds for reconstruction quality on the [-1, 1] range
MAE_VISIBLE = 0.1
MS_SSIM_VISIBLE = (0.9, 0.95)


@dataclass
class MetricReport:
    name: str
    value: float
    per_image: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mae(a: torch.Tensor, b: torch.Tensor) -> float:
    _same_shape(a, b)
    return float((a.double() - b.double()).abs().mean())


def mae_per_image(a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
    _same_shape(a, b)
    return (a.double() - b.double()).abs().flatten(1).mean(1).numpy()


def _gauss_window(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    k = len(g)
    x = F.conv2d(x, g.view(1, 1, 1, k))
    return F.conv2d(x, g.view(1, 1, k, 1))


def _ssim_terms(x: torch.Tensor, y: torch.Tensor, g: torch.Tensor):
    c1, c2 = K1**2, K2**2
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return (lum * cs).flatten(1).mean(1), cs.flatten(1).mean(1)


def to_luminance(x: torch.Tensor) -> torch.Tensor:
    """[-1, 1] images to single-channel [0, 1] luminance (channel mean)."""
    return ((x.double() + 1.0) / 2.0).mean(dim=1, keepdim=True)


def usable_scales(size: int, scales: int) -> int:
    n = scales
    while n > 0 and size < 2 ** (n - 1) * WINDOW_SIZE:
        n -= 1
    return n


def ms_ssim_report(a: torch.Tensor, b: torch.Tensor, scales: int = 5, weights=None) -> MetricReport:
    """Multi-scale SSIM, with the scale count reduced to what the image size supports."""
    _same_shape(a, b)
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales] if weights is None else weights, dtype=np.float64)
    if len(weights) != scales:
        raise ValueError("one weight per scale required")
    n = usable_scales(min(a.shape[-2:]), scales)
    if n == 0:
        raise ShapeError(f"images smaller than the {WINDOW_SIZE}px window")
    w = weights[:n] / weights[:n].sum()
    g = _gauss_window(WINDOW_SIZE, WINDOW_SIGMA)
    x, y = to_luminance(a), to_luminance(b)
    result = torch.ones(a.shape[0], dtype=torch.float64)
    for i in range(n):
        ssim, cs = _ssim_terms(x, y, g)
        # negative structure correlation maps to zero so fractional powers stay real
        term = (ssim if i == n - 1 else cs).clamp(min=0.0)
        result = result * term ** float(w[i])
        if i < n - 1:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    per = result.numpy()
    config = {"scales_requested": scales, "scales_used": n, "weights": w.tolist(),
              "window": WINDOW_SIZE, "sigma": WINDOW_SIGMA, "K": (K1, K2)}
    return MetricReport("ms_ssim", float(per.mean()), per, config)


def ms_ssim(a: torch.Tensor, b: torch.Tensor, scales: int = 5, weights=None) -> float:
    return ms_ssim_report(a, b, scales, weights).value


def projection_matrix(dim: int, proj_dim: int, seed: int) -> np.ndarray:
    """Random matrix with orthonormal rows, shape (min(proj_dim, dim), dim)."""
    k = min(proj_dim, dim)
    g = Rng(seed).normal((dim, k))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q.T


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_gaussian(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + tr(cov1 + cov2 - 2 (cov1 cov2)^(1/2)) via symmetric eigendecompositions."""
    s1 = _sqrt_psd(cov1)
    middle = s1 @ cov2 @ s1
    vals = np.clip(np.linalg.eigvalsh((middle + middle.T) / 2), 0, None)
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2 * np.sum(np.sqrt(vals)))
    return max(d, 0.0)


def gaussian_frechet_report(a: torch.Tensor, b: torch.Tensor, proj_dim: int = 64, seed: int = 0) -> MetricReport:
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two images per set")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError("image shapes differ between sets")
    fa = a.double().flatten(1).numpy()
    fb = b.double().flatten(1).numpy()
    P = projection_matrix(fa.shape[1], proj_dim, seed)
    za, zb = fa @ P.T, fb @ P.T
    mu1, mu2 = za.mean(0), zb.mean(0)
    cov1 = np.atleast_2d(np.cov(za, rowvar=False))
    cov2 = np.atleast_2d(np.cov(zb, rowvar=False))
    regularized = False
    for cov in (cov1, cov2):
        if np.linalg.eigvalsh(cov).min() <= 1e-10 * max(np.trace(cov), 1e-300):
            regularized = True
    if regularized:
        eye = 1e-6 * np.eye(len(mu1))
        cov1, cov2 = cov1 + eye, cov2 + eye
    value = frechet_gaussian(mu1, cov1, mu2, cov2)
    config = {"proj_dim": int(P.shape[0]), "seed": seed, "regularized": regularized}
    return MetricReport("gaussian_frechet", value, None, config)


def gaussian_frechet(a: torch.Tensor, b: torch.Tensor, proj_dim: int = 64, seed: int = 0) -> float:
    return gaussian_frechet_report(a, b, proj_dim, seed).value
