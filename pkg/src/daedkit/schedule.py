"""Noise schedules and the signal-to-noise quantities derived from them.

Steps are 1-based throughout the public API: ``t`` runs from 1 to ``T`` and
``alpha_bar_at(0)`` is defined as 1. Internal arrays are 0-based, so entry
``i`` holds step ``i + 1``.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAX_BETA = 0.999
DEFAULT_COSINE_OFFSET = 0.008


class StepError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    kind: str = "custom"
    cosine_offset: float | None = None
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    beta_tilde: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).copy()
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a nonempty 1-D array")
        if not np.all((beta > 0) & (beta <= MAX_BETA)):
            raise ValueError(f"every beta must lie in (0, {MAX_BETA}]")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if not np.all(np.diff(alpha_bar) < 0) or not 0 < alpha_bar[-1] < 1:
            raise ValueError("alpha_bar must be strictly decreasing inside (0, 1)")
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        beta_tilde = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
        for name, value in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar), ("beta_tilde", beta_tilde)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_step(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise StepError(f"step {t} outside [{lo}, {self.T}]")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self.check_step(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self.check_step(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        if int(t) == 0:
            return 1.0
        return float(self.alpha_bar[self.check_step(t) - 1])

    def beta_tilde_at(self, t: int) -> float:
        if int(t) == 1:
            raise StepError("beta_tilde is undefined at t=1 (alpha_bar_0 = 1 makes it zero)")
        return float(self.beta_tilde[self.check_step(t) - 1])

    def table(self, name: str, t: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        """Gather a per-step table at 1-based step indices ``t``."""
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.T):
            raise StepError(f"steps outside [1, {self.T}]")
        return self._tables(dtype)[name][t - 1]

    def _tables(self, dtype: torch.dtype) -> dict[str, torch.Tensor]:
        cache = self.__dict__.setdefault("_cache", {})
        if dtype not in cache:
            arrays = {
                "beta": self.beta,
                "alpha": self.alpha,
                "alpha_bar": self.alpha_bar,
                "alpha_bar_prev": np.concatenate([[1.0], self.alpha_bar[:-1]]),
                "beta_tilde": self.beta_tilde,
            }
            cache[dtype] = {k: torch.tensor(v, dtype=dtype) for k, v in arrays.items()}
        return cache[dtype]

    def digest(self) -> str:
        return hashlib.sha256(self.beta.tobytes()).hexdigest()[:16]


def build_linear(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    t = np.arange(T, dtype=np.float64)
    beta = beta_start + t / (T - 1) * (beta_end - beta_start)
    beta[0], beta[-1] = beta_start, beta_end
    return NoiseSchedule(beta, kind="linear")


def build_linear_scaled(T: int) -> NoiseSchedule:
    """Linear schedule whose endpoints are rescaled from the 1000-step 1e-4..0.02 range.

    Keeps the total amount of noise comparable when T is short.
    """
    scale = 1000.0 / T
    return build_linear(T, 1e-4 * scale, min(0.02 * scale, MAX_BETA))


def cosine_alpha_bar(T: int, c: float) -> np.ndarray:
    """The unclipped cumulative signal fraction f(t)/f(0) for t = 0..T."""
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + c) / (1 + c) * math.pi / 2) ** 2
    return f / f[0]


def build_cosine(T: int, c: float = DEFAULT_COSINE_OFFSET, clip: float = MAX_BETA) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if c <= 0:
        raise ValueError("cosine offset c must be positive")
    ab = cosine_alpha_bar(T, c)
    beta = np.minimum(1.0 - ab[1:] / ab[:-1], clip)
    return NoiseSchedule(beta, kind="cosine", cosine_offset=c)


# --- signal-to-noise ratio ---------------------------------------------------


def snr(s: NoiseSchedule, x0: torch.Tensor, t: int) -> torch.Tensor:
    """Elementwise SNR of x_t given x0."""
    ab = s.alpha_bar_at(s.check_step(t))
    return ab * x0**2 / (1.0 - ab)


def mean_snr(s: NoiseSchedule, x0: torch.Tensor, t: int) -> float:
    """SNR averaged over pixels, then over the batch."""
    per_image = snr(s, x0, t).flatten(1).mean(1)
    return float(per_image.mean())


def mean_square(x0: torch.Tensor) -> float:
    return float((x0.double() ** 2).flatten(1).mean(1).mean())


def log_snr_curve(s: NoiseSchedule, x0_ms: float) -> np.ndarray:
    """log of the batch-mean SNR for t = 1..T given the dataset mean of x0**2.

    The mean is taken before the log, so zero pixels never produce -inf.
    """
    if x0_ms <= 0:
        raise ValueError("mean square signal must be positive")
    return np.log(s.alpha_bar) - np.log1p(-s.alpha_bar) + math.log(x0_ms)


def log_snr_delta(s: NoiseSchedule, x0: torch.Tensor | float) -> np.ndarray:
    """Discrete derivative of the mean log-SNR curve, entry i is step i+2 minus step i+1."""
    ms = x0 if isinstance(x0, float) else mean_square(x0)
    return np.diff(log_snr_curve(s, ms))


@dataclass(frozen=True)
class StepLookup:
    step: int
    clamped: bool = False


def step_at_log_snr(s: NoiseSchedule, x0_ms: float, target: float) -> StepLookup:
    """Smallest step whose mean log-SNR is at or below ``target``.

    Targets below the curve's end return T with ``clamped`` set.
    """
    curve = log_snr_curve(s, x0_ms)
    below = np.nonzero(curve <= target)[0]
    if below.size == 0:
        return StepLookup(s.T, clamped=True)
    return StepLookup(int(below[0]) + 1)


def export_csv(s: NoiseSchedule, path: str | Path, x0_ms: float = 1.0) -> Path:
    path = Path(path)
    curve = log_snr_curve(s, x0_ms)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "beta", "alpha_bar", "beta_tilde", "log_snr_mean", "delta_log_snr"])
        for i in range(s.T):
            first = i == 0
            w.writerow([
                i + 1,
                repr(float(s.beta[i])),
                repr(float(s.alpha_bar[i])),
                "" if first else repr(float(s.beta_tilde[i])),
                repr(float(curve[i])),
                "" if first else repr(float(curve[i] - curve[i - 1])),
            ])
    return path
