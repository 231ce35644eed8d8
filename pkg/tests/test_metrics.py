import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import linalg

from daedkit import metrics as MT
from daedkit.numerics import ShapeError


def _imgs(n=4, size=16, seed=0):
    return torch.rand(n, 1, size, size, generator=torch.Generator().manual_seed(seed)) * 2 - 1


def test_mae_basics():
    a, b = _imgs(seed=0), _imgs(seed=1)
    assert MT.mae(a, a) == 0.0
    assert MT.mae(a, b) == MT.mae(b, a)
    assert MT.mae(a, b) == pytest.approx(MT.mae_per_image(a, b).mean())
    assert MT.mae(torch.zeros(1, 1, 2, 2), torch.full((1, 1, 2, 2), 0.5)) == 0.5
    with pytest.raises(ShapeError):
        MT.mae(a, b[:, :, :8])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
def test_mae_triangle_inequality(s1, s2, s3):
    a, b, c = _imgs(2, 4, s1), _imgs(2, 4, s2), _imgs(2, 4, s3)
    assert MT.mae(a, c) <= MT.mae(a, b) + MT.mae(b, c) + 1e-12


def test_usable_scales():
    assert MT.usable_scales(16, 5) == 1
    assert MT.usable_scales(22, 5) == 2
    assert MT.usable_scales(176, 5) == 5
    assert MT.usable_scales(10, 5) == 0


@pytest.mark.parametrize("size", [16, 32, 176])
def test_ms_ssim_identity_is_exactly_one(size):
    a = _imgs(2, size)
    assert MT.ms_ssim(a, a) == 1.0


def test_ms_ssim_symmetric_and_bounded():
    a, b = _imgs(seed=2), _imgs(seed=3)
    v = MT.ms_ssim(a, b)
    assert v == pytest.approx(MT.ms_ssim(b, a), abs=1e-12)
    assert 0.0 <= v < 1.0


def test_ms_ssim_checkerboard_vs_inverse_is_low():
    yy, xx = torch.meshgrid(torch.arange(32), torch.arange(32), indexing="ij")
    board = (((yy // 2 + xx // 2) % 2) * 2 - 1).float()[None, None]
    assert MT.ms_ssim(board, -board) < 0.2


def test_ms_ssim_decreases_with_noise():
    gen = torch.Generator().manual_seed(0)
    yy, xx = torch.meshgrid(torch.linspace(-1, 1, 32), torch.linspace(-1, 1, 32), indexing="ij")
    clean = torch.exp(-(yy**2 + xx**2) * 3)[None, None] * 2 - 1
    noise = torch.randn(clean.shape, generator=gen)
    vals = [MT.ms_ssim(clean, (clean + s * noise).clamp(-1, 1)) for s in (0.0, 0.05, 0.2, 0.5)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def _ssim_oracle(a, b):
    # direct sliding-window SSIM over valid 11x11 positions, single scale
    g1 = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5**2))
    w = np.outer(g1, g1) / g1.sum() ** 2
    x, y = (a + 1) / 2, (b + 1) / 2
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * px * px).sum() - mx**2
            vy = (w * py * py).sum() - my**2
            cxy = (w * px * py).sum() - mx * my
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_single_scale_matches_sliding_window_oracle():
    a = _imgs(1, 16, 5)
    b = (a + 0.3 * _imgs(1, 16, 6)).clamp(-1, 1)
    oracle = _ssim_oracle(a[0, 0].double().numpy(), b[0, 0].double().numpy())
    assert MT.ms_ssim(a, b) == pytest.approx(oracle, rel=1e-10)


def test_ms_ssim_report_config_and_errors():
    rep = MT.ms_ssim_report(_imgs(2, 16), _imgs(2, 16, 1))
    assert rep.config["scales_used"] == 1 and rep.per_image.shape == (2,)
    assert len(rep.config_hash) == 12
    with pytest.raises(ShapeError):
        MT.ms_ssim(_imgs(1, 8), _imgs(1, 8))
    with pytest.raises(ValueError):
        MT.ms_ssim(_imgs(1, 16), _imgs(1, 16), weights=[1.0])


def test_projection_rows_orthonormal():
    P = MT.projection_matrix(50, 8, 3)
    assert P.shape == (8, 50)
    assert np.allclose(P @ P.T, np.eye(8), atol=1e-12)
    assert np.array_equal(P, MT.projection_matrix(50, 8, 3))
    assert MT.projection_matrix(5, 64, 0).shape == (5, 5)


def test_frechet_closed_form_matches_sqrtm():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    c1, c2 = A @ A.T + 0.1 * np.eye(4), B @ B.T + 0.1 * np.eye(4)
    m1, m2 = rng.normal(size=4), rng.normal(size=4)
    oracle = np.sum((m1 - m2) ** 2) + np.trace(c1 + c2 - 2 * linalg.sqrtm(c1 @ c2).real)
    assert MT.frechet_gaussian(m1, c1, m2, c2) == pytest.approx(oracle, rel=1e-9)


def test_frechet_one_dimensional_unit_shift():
    gen = torch.Generator().manual_seed(0)
    a = torch.randn(40_000, 1, 1, 1, generator=gen, dtype=torch.float64)
    b = torch.randn(40_000, 1, 1, 1, generator=gen, dtype=torch.float64) + 1.0
    assert MT.gaussian_frechet(a, b) == pytest.approx(1.0, abs=0.05)


def test_frechet_symmetry_and_self_distance():
    a, b = _imgs(300, 8, 0), _imgs(300, 8, 1) * 0.5
    assert MT.gaussian_frechet(a, b) == pytest.approx(MT.gaussian_frechet(b, a), rel=1e-9)
    assert MT.gaussian_frechet(a, a) == pytest.approx(0.0, abs=1e-8)


def test_frechet_monotone_along_interpolation():
    a, b = _imgs(400, 8, 0), _imgs(400, 8, 1) * 0.2 + 0.5
    d = [MT.gaussian_frechet(a, (1 - w) * a + w * b) for w in (0.0, 0.25, 0.5, 0.75, 1.0)]
    assert all(x < y for x, y in zip(d, d[1:]))


def test_frechet_regularizes_singular_covariance():
    rep = MT.gaussian_frechet_report(_imgs(10, 8, 0), _imgs(10, 8, 1), proj_dim=32)
    assert rep.config["regularized"] is True
    assert np.isfinite(rep.value)
    assert MT.gaussian_frechet_report(_imgs(500, 4, 0), _imgs(500, 4, 1), 8).config["regularized"] is False
    with pytest.raises(ValueError):
        MT.gaussian_frechet(_imgs(1), _imgs(1))
