"""Array primitives shared by every other module.

Tensors are plain ``torch.Tensor`` values (float32 by default, float64 on
request). Randomness never goes through torch's global generator: every draw
comes from :class:`Rng`, a Philox counter-based stream keyed by a 64-bit seed,
with normals produced by Box-Muller so streams are reproducible bit-for-bit.
"""

from __future__ import annotations

import contextlib
from collections.abc import Sequence

import numpy as np
import torch

_DTYPE = torch.float32

REDUCTIONS = ("mean", "sum", "max", "min", "mean_abs", "mean_sq")


class ShapeError(ValueError):
    pass


def default_dtype() -> torch.dtype:
    return _DTYPE


def set_default_dtype(dtype: torch.dtype) -> None:
    global _DTYPE
    if dtype not in (torch.float32, torch.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype: torch.dtype = torch.float64):
    """Temporarily switch the default tensor dtype (used for gradient checks)."""
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"shape must be nonempty with positive extents, got {shape}")
    return shape


class Rng:
    """Seeded counter-based generator.

    Identical seed and call sequence give identical output. Child streams for
    parallel or per-item work are derived with :meth:`spawn`, never by sharing.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"

    def spawn(self, *index: int) -> "Rng":
        """Independent stream derived from this seed and an index path."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, *index])
        return Rng(int(ss.generate_state(1, np.uint64)[0]))

    def uniform(self, shape: Sequence[int] | int = ()) -> np.ndarray:
        """Doubles in the open interval (0, 1)."""
        u = self._gen.random(shape)
        # random() is [0, 1); nudge exact zeros so log() stays finite
        return np.where(u == 0.0, 2.0**-53, u)

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        shape = _check_shape(shape)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def choice(self, probs: np.ndarray, size: int) -> np.ndarray:
        """Indices drawn from a discrete distribution by inverse CDF."""
        cdf = np.cumsum(probs)
        cdf /= cdf[-1]
        idx = np.searchsorted(cdf, self.uniform(size), side="right")
        return np.minimum(idx, len(probs) - 1)


def gaussian(rng: Rng, shape: Sequence[int], dtype: torch.dtype | None = None) -> torch.Tensor:
    """I.i.d. standard normal tensor drawn from ``rng``."""
    z = rng.normal(shape)
    return torch.from_numpy(z).to(dtype or _DTYPE)


def axpy_like(a: float, x: torch.Tensor, b: float, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if b == 0:
        return x * a if a != 1 else x.clone()
    if a == 0:
        return y * b if b != 1 else y.clone()
    return a * x + b * y


def reduce(t: torch.Tensor, op: str, axes: Sequence[int] | int | None = None) -> torch.Tensor:
    """Reduction over ``axes`` (all axes when None, giving a rank-0 tensor)."""
    if op not in REDUCTIONS:
        raise ValueError(f"unknown reduction {op!r}; expected one of {REDUCTIONS}")
    if axes is None:
        dims = tuple(range(t.dim()))
    else:
        dims = (axes,) if isinstance(axes, int) else tuple(axes)
        for d in dims:
            if not -t.dim() <= d < t.dim():
                raise ShapeError(f"axis {d} out of range for rank {t.dim()}")
    if t.dim() == 0:
        dims = ()
    if op == "mean_abs":
        t, op = t.abs(), "mean"
    elif op == "mean_sq":
        t, op = t * t, "mean"
    if not dims:
        return t.clone()
    if op == "mean":
        return t.mean(dim=dims)
    if op == "sum":
        return t.sum(dim=dims)
    out = t
    for d in sorted((d % t.dim() for d in dims), reverse=True):
        out = out.amax(dim=d) if op == "max" else out.amin(dim=d)
    return out
