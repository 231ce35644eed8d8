"""Closed-form Gaussian diffusion mathematics.

Every function is pure given a schedule, tensors and an explicit :class:`Rng`.
Noise predictors are any callable ``eps_fn(x, tau)`` where ``tau`` is the
normalised time ``t / T`` as a float tensor of shape ``(B,)``.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass

import torch

from .numerics import Rng, ShapeError, gaussian
from .schedule import NoiseSchedule, StepError

EpsFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

LOG_FLOOR = math.log(1e-12)
BIN_HALF_WIDTH = 1.0 / 255.0


@dataclass
class ImageBatch:
    """Images of shape (B, C, H, W) with nominal range [-1, 1].

    ``provenance`` is a dataset id, or ``"sampled"`` for model output. Dataset
    batches are checked to lie inside the range.
    """

    tensor: torch.Tensor
    provenance: str = "sampled"

    def __post_init__(self):
        if self.tensor.dim() != 4:
            raise ShapeError(f"images must be (B, C, H, W), got {tuple(self.tensor.shape)}")
        if self.provenance != "sampled":
            lo, hi = float(self.tensor.min()), float(self.tensor.max())
            if lo < -1.0 or hi > 1.0:
                raise ValueError(f"dataset images must lie in [-1, 1], got [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.tensor.shape)

    def __len__(self) -> int:
        return self.tensor.shape[0]


@dataclass(frozen=True)
class ReverseKernelConfig:
    """Fixed reverse-process variance.

    ``variance_mode`` picks sigma_t^2 = beta_t or the posterior variance
    beta_tilde_t. In beta_tilde mode step 1 (where beta_tilde is zero) uses
    beta_tilde_2. ``temperature`` scales the injected noise at sampling time;
    0 gives a deterministic chain.
    """

    variance_mode: str = "beta_tilde"
    temperature: float = 1.0

    def __post_init__(self):
        if self.variance_mode not in ("beta", "beta_tilde"):
            raise ValueError(f"unknown variance_mode {self.variance_mode!r}")


def _steps(t, batch: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.dim() == 1:
        if len(t) != batch:
            raise ShapeError("one step per batch element required")
        return t.long()
    return torch.full((batch,), int(t), dtype=torch.long)


def _coef(s: NoiseSchedule, name: str, t, x: torch.Tensor) -> torch.Tensor:
    steps = _steps(t, x.shape[0])
    return s.table(name, steps, x.dtype).view(-1, *([1] * (x.dim() - 1)))


def normalized_time(s: NoiseSchedule, t, batch: int, dtype=torch.float32) -> torch.Tensor:
    return _steps(t, batch).to(dtype) / s.T


def sigma2(s: NoiseSchedule, cfg: ReverseKernelConfig, t) -> torch.Tensor:
    """Reverse-kernel variance at 1-based steps ``t`` (float64 tensor)."""
    t = torch.as_tensor(t, dtype=torch.long)
    if cfg.variance_mode == "beta":
        return s.table("beta", t, torch.float64)
    return s.table("beta_tilde", torch.clamp(t, min=2), torch.float64)


# --- forward process ---------------------------------------------------------


def forward_marginal(s: NoiseSchedule, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    if eps.shape != x0.shape:
        raise ShapeError("eps must match x0")
    ab = _coef(s, "alpha_bar", t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def forward_step(s: NoiseSchedule, x_prev: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """One transition q(x_t | x_{t-1})."""
    if eps.shape != x_prev.shape:
        raise ShapeError("eps must match x_prev")
    b = _coef(s, "beta", t, x_prev)
    return (1 - b).sqrt() * x_prev + b.sqrt() * eps


def corrupt(x0: torch.Tensor, beta: float, eps: torch.Tensor) -> torch.Tensor:
    """Single-shot corruption with variance ``beta``: N(sqrt(1-beta) x0, beta I)."""
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    if eps.shape != x0.shape:
        raise ShapeError("eps must match x0")
    return math.sqrt(1 - beta) * x0 + math.sqrt(beta) * eps


def posterior_coefficients(s: NoiseSchedule, t: int) -> tuple[float, float]:
    """Weights (on x0, on x_t) of the forward posterior mean."""
    t = s.check_step(t)
    if t == 1:
        raise StepError("t=1 posterior targets x0 directly; use the decoder likelihood term")
    ab, ab_prev = s.alpha_bar_at(t), s.alpha_bar_at(t - 1)
    b, a = s.beta_at(t), s.alpha_at(t)
    return math.sqrt(ab_prev) * b / (1 - ab), math.sqrt(a) * (1 - ab_prev) / (1 - ab)


def forward_posterior(s: NoiseSchedule, x0: torch.Tensor, xt: torch.Tensor, t):
    """Mean and variance of q(x_{t-1} | x_t, x0); valid for t >= 2."""
    if isinstance(t, torch.Tensor) and t.dim() == 1:
        if int(t.min()) < 2:
            raise StepError("t=1 posterior targets x0 directly; use the decoder likelihood term")
        ab = _coef(s, "alpha_bar", t, x0)
        ab_prev = _coef(s, "alpha_bar_prev", t, x0)
        b = _coef(s, "beta", t, x0)
        a = 1 - b
        mean = ab_prev.sqrt() * b / (1 - ab) * x0 + a.sqrt() * (1 - ab_prev) / (1 - ab) * xt
        return mean, _coef(s, "beta_tilde", t, x0)
    c0, ct = posterior_coefficients(s, t)
    return c0 * x0 + ct * xt, s.beta_tilde_at(t)


# --- reverse process ---------------------------------------------------------


def model_mean(s: NoiseSchedule, xt: torch.Tensor, t, eps_pred: torch.Tensor) -> torch.Tensor:
    """Reverse mean implied by a noise prediction."""
    b = _coef(s, "beta", t, xt)
    ab = _coef(s, "alpha_bar", t, xt)
    return (xt - b / (1 - ab).sqrt() * eps_pred) / (1 - b).sqrt()


def predict_eps(s: NoiseSchedule, net: EpsFn, xt: torch.Tensor, t) -> torch.Tensor:
    return net(xt, normalized_time(s, t, xt.shape[0], xt.dtype))


def reverse_step(
    s: NoiseSchedule,
    cfg: ReverseKernelConfig,
    net: EpsFn,
    xt: torch.Tensor,
    t: int,
    rng: Rng,
    final_noise: bool = False,
) -> torch.Tensor:
    """Draw x_{t-1} from the model kernel; at t=1 return the mean unless ``final_noise``."""
    t = s.check_step(t)
    with torch.no_grad():
        mean = model_mean(s, xt, t, predict_eps(s, net, xt, t))
    if t == 1 and not final_noise:
        return mean
    z = gaussian(rng, xt.shape, xt.dtype)
    sigma = math.sqrt(float(sigma2(s, cfg, t))) * cfg.temperature
    return mean + sigma * z


def reverse_chain(
    s: NoiseSchedule,
    cfg: ReverseKernelConfig,
    net: EpsFn,
    xt: torch.Tensor,
    t_start: int,
    rng: Rng,
    final_noise: bool = False,
) -> torch.Tensor:
    """Apply reverse steps t_start, ..., 1 to ``xt``."""
    x = xt
    for t in range(s.check_step(t_start), 0, -1):
        x = reverse_step(s, cfg, net, x, t, rng, final_noise=final_noise)
    return x


def ancestral_sample(
    s: NoiseSchedule,
    cfg: ReverseKernelConfig,
    net: EpsFn,
    shape,
    rng: Rng,
    clamp: bool = True,
    final_noise: bool = False,
) -> torch.Tensor:
    """Start from x_T ~ N(0, I) and run the whole reverse chain."""
    x = gaussian(rng, shape)
    x = reverse_chain(s, cfg, net, x, s.T, rng, final_noise=final_noise)
    return x.clamp(-1.0, 1.0) if clamp else x


# --- likelihood terms --------------------------------------------------------


def _log_ndtr(x: torch.Tensor) -> torch.Tensor:
    return torch.special.log_ndtr(x)


def discretized_gaussian_log_probs(x0: torch.Tensor, mean: torch.Tensor, sigma: float) -> torch.Tensor:
    """Per-pixel log mass of the 256-level bin containing ``x0``.

    Bins are [x - 1/255, x + 1/255] with open ends at -1 and +1. Computed in
    float64 and floored at log(1e-12).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out_dtype = mean.dtype
    x = x0.double()
    m = mean.double()
    lo = (x - BIN_HALF_WIDTH - m) / sigma
    hi = (x + BIN_HALF_WIDTH - m) / sigma
    # tail-aware difference: use the mirrored CDF when the bin sits right of the mean
    right = lo > 0
    upper = torch.where(right, -lo, hi)
    lower = torch.where(right, -hi, lo)
    log_up, log_low = _log_ndtr(upper), _log_ndtr(lower)
    diff = log_up + torch.log1p(-torch.exp(torch.clamp(log_low - log_up, max=-1e-300)))
    logp = torch.where(
        x >= 1.0 - 1e-6,
        _log_ndtr(-lo),
        torch.where(x <= -1.0 + 1e-6, _log_ndtr(hi), diff),
    )
    return torch.clamp(logp, min=LOG_FLOOR).to(out_dtype)


def discretized_gaussian_ll(x0: torch.Tensor, mean: torch.Tensor, sigma: float) -> torch.Tensor:
    """Log-likelihood per image (summed over pixels)."""
    return discretized_gaussian_log_probs(x0, mean, sigma).flatten(1).sum(1)


def normal_kl(mean1, var1, mean2, var2) -> torch.Tensor:
    """Elementwise KL(N(mean1, var1) || N(mean2, var2))."""
    var1 = torch.as_tensor(var1, dtype=torch.float64)
    var2 = torch.as_tensor(var2, dtype=torch.float64)
    const = 0.5 * (torch.log(var2 / var1) + var1 / var2 - 1.0)
    return const.to(mean1.dtype) + (mean1 - mean2) ** 2 / (2 * var2.to(mean1.dtype))


def prior_kl(s: NoiseSchedule, x0: torch.Tensor) -> torch.Tensor:
    """KL(q(x_T | x0) || N(0, I)) per image."""
    ab = s.alpha_bar_at(s.T)
    kl = normal_kl(math.sqrt(ab) * x0, 1 - ab, torch.zeros_like(x0), 1.0)
    return kl.flatten(1).sum(1)


def vlb_term(
    s: NoiseSchedule,
    cfg: ReverseKernelConfig,
    net: EpsFn,
    x0: torch.Tensor,
    t,
    eps: torch.Tensor,
) -> torch.Tensor:
    """The single bound term selected by ``t`` for each image, in nats per image.

    t=1 gives the decoder term -ln p(x0 | x1); t >= 2 gives the KL between the
    forward posterior and the model kernel at step t. Differentiable in ``net``.
    """
    B = x0.shape[0]
    steps = _steps(t, B)
    xt = forward_marginal(s, x0, steps, eps)
    mean = model_mean(s, xt, steps, predict_eps(s, net, xt, steps))
    var = sigma2(s, cfg, steps)

    safe = torch.clamp(steps, min=2)
    post_mean, post_var = forward_posterior(s, x0, xt, safe)
    var_img = var.to(x0.dtype).view(-1, 1, 1, 1)
    const = 0.5 * (torch.log(var / post_var.flatten().double()) + post_var.flatten().double() / var - 1.0)
    kl = ((post_mean - mean) ** 2 / (2 * var_img)).flatten(1).sum(1) + const.to(x0.dtype) * x0[0].numel()

    sigma1 = math.sqrt(float(sigma2(s, cfg, 1)))
    decoder = -discretized_gaussian_ll(x0, mean, sigma1)
    return torch.where(steps == 1, decoder, kl)


@dataclass
class VlbTerms:
    """Per-image bound terms in nats: decoder is L0, kl[:, i] is the term at step i + 2, prior is L_T."""

    decoder: torch.Tensor
    kl: torch.Tensor
    prior: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.decoder + self.kl.sum(1) + self.prior


def vlb_terms(
    s: NoiseSchedule,
    cfg: ReverseKernelConfig,
    net: EpsFn,
    x0: torch.Tensor,
    rng: Rng,
) -> VlbTerms:
    """Single-sample estimate of every bound term, fresh noise per step."""
    B = x0.shape[0]
    with torch.no_grad():
        per_step = [vlb_term(s, cfg, net, x0, t, gaussian(rng, x0.shape, x0.dtype)) for t in range(1, s.T + 1)]
    kl = torch.stack(per_step[1:], dim=1) if s.T > 1 else x0.new_zeros(B, 0)
    return VlbTerms(decoder=per_step[0], kl=kl, prior=prior_kl(s, x0))


# --- noise-prediction objectives --------------------------------------------


def loss_weight(s: NoiseSchedule, cfg: ReverseKernelConfig, t) -> torch.Tensor:
    """beta_t^2 / (2 sigma_t^2 alpha_t (1 - alpha_bar_t)) as a float64 tensor."""
    t = torch.as_tensor(t, dtype=torch.long)
    b = s.table("beta", t, torch.float64)
    ab = s.table("alpha_bar", t, torch.float64)
    return b**2 / (2 * sigma2(s, cfg, t) * (1 - b) * (1 - ab))


def _draw_eps(rng: Rng | None, eps: torch.Tensor | None, x0: torch.Tensor) -> torch.Tensor:
    if (rng is None) == (eps is None):
        raise ValueError("pass exactly one of rng or eps")
    return gaussian(rng, x0.shape, x0.dtype) if eps is None else eps


def eps_squared_error(s: NoiseSchedule, net: EpsFn, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Per-image mean over pixels of (eps - eps_theta(x_t, t))^2."""
    xt = forward_marginal(s, x0, t, eps)
    err = (eps - predict_eps(s, net, xt, t)) ** 2
    return err.flatten(1).mean(1)


def loss_simple(s: NoiseSchedule, net: EpsFn, x0: torch.Tensor, t, rng: Rng | None = None, *, eps=None) -> torch.Tensor:
    eps = _draw_eps(rng, eps, x0)
    return eps_squared_error(s, net, x0, t, eps).mean()


def loss_weighted(
    s: NoiseSchedule,
    cfg: ReverseKernelConfig,
    net: EpsFn,
    x0: torch.Tensor,
    t,
    rng: Rng | None = None,
    *,
    eps=None,
) -> torch.Tensor:
    eps = _draw_eps(rng, eps, x0)
    if isinstance(t, torch.Tensor) and t.dim() == 1:
        w = loss_weight(s, cfg, t).to(x0.dtype)
        return (w * eps_squared_error(s, net, x0, t, eps)).mean()
    return float(loss_weight(s, cfg, int(t))) * loss_simple(s, net, x0, t, eps=eps)
