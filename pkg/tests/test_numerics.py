import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from daedkit.numerics import Rng, ShapeError, axpy_like, gaussian, precision, default_dtype, reduce


def test_gaussian_is_deterministic_per_seed():
    a = gaussian(Rng(7), [4])
    b = gaussian(Rng(7), [4])
    assert torch.equal(a, b)
    assert not torch.equal(a, gaussian(Rng(8), [4]))


def test_gaussian_moments():
    n = 10**6
    z = gaussian(Rng(123), [n], torch.float64).numpy()
    assert abs(z.mean()) < 4 / math.sqrt(n)
    assert abs(z.var() - 1) < 0.01


@pytest.mark.parametrize("shape", [[], [0], [3, 0]])
def test_gaussian_rejects_empty_shapes(shape):
    with pytest.raises(ShapeError):
        gaussian(Rng(0), shape)


def test_spawned_streams_are_independent_and_reproducible():
    r = Rng(5)
    a, b = r.spawn(1), r.spawn(2)
    assert a.seed != b.seed
    assert Rng(5).spawn(1).seed == a.seed


def test_precision_switch():
    assert default_dtype() == torch.float32
    with precision(torch.float64):
        assert gaussian(Rng(0), [2]).dtype == torch.float64
    assert default_dtype() == torch.float32


def test_axpy_identities():
    x, y = torch.tensor([1.5, -2.0]), torch.tensor([4.0, 0.25])
    assert torch.equal(axpy_like(1, x, 0, y), x)
    assert torch.equal(axpy_like(0, x, 1, y), y)
    assert torch.equal(axpy_like(0.5, torch.tensor([2.0]), 0.5, torch.tensor([4.0])), torch.tensor([3.0]))
    with pytest.raises(ShapeError):
        axpy_like(1, x, 1, torch.zeros(3))


@given(st.floats(-10, 10), st.floats(-10, 10), st.lists(st.floats(-100, 100), min_size=1, max_size=20))
def test_axpy_matches_elementwise(a, b, xs):
    x = torch.tensor(xs, dtype=torch.float64)
    y = torch.flip(x, [0])
    out = axpy_like(a, x, b, y)
    assert torch.allclose(out, a * x + b * y)


def test_reductions():
    assert float(reduce(torch.tensor([1.0, 2.0, 3.0]), "mean")) == 2.0
    assert float(reduce(torch.tensor([-1.0, 1.0]), "mean_abs")) == 1.0
    assert float(reduce(torch.zeros(3, 3), "sum")) == 0.0
    t = torch.arange(6.0).reshape(2, 3)
    assert reduce(t, "sum").dim() == 0
    assert torch.equal(reduce(t, "max", 1), torch.tensor([2.0, 5.0]))
    assert torch.equal(reduce(t, "min", (0, 1)), torch.tensor(0.0))
    assert float(reduce(torch.tensor([2.0, -2.0]), "mean_sq")) == 4.0
    with pytest.raises(ShapeError):
        reduce(t, "sum", 2)
    with pytest.raises(ValueError):
        reduce(t, "median")


def test_choice_frequencies():
    idx = Rng(0).choice(np.array([0.2, 0.8]), 100_000)
    assert abs((idx == 1).mean() - 0.8) < 0.01
