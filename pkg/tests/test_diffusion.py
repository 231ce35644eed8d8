import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from daedkit import diffusion as D
from daedkit import schedule as S
from daedkit.numerics import Rng, ShapeError, gaussian
from daedkit.schedule import StepError

BETA = D.ReverseKernelConfig("beta")
TILDE = D.ReverseKernelConfig("beta_tilde")


def _zero_net(x, tau):
    return torch.zeros_like(x)


class _LinearNet(torch.nn.Module):
    """Tiny differentiable eps predictor for identity checks."""

    def __init__(self):
        super().__init__()
        self.a = torch.nn.Parameter(torch.tensor(0.3))
        self.b = torch.nn.Parameter(torch.tensor(-0.2))

    def forward(self, x, tau):
        return self.a * x + self.b * tau.view(-1, 1, 1, 1)


def test_image_batch_checks():
    with pytest.raises(ShapeError):
        D.ImageBatch(torch.zeros(3, 4, 4))
    with pytest.raises(ValueError):
        D.ImageBatch(torch.full((1, 1, 2, 2), 1.5), provenance="blobs")
    assert len(D.ImageBatch(torch.full((2, 1, 2, 2), 1.5))) == 2


def test_forward_marginal_matches_composed_steps_mc():
    s = S.build_linear(5, 0.05, 0.3)
    rng = Rng(11)
    n = 100_000
    x0 = torch.full((n, 1, 1, 1), 0.7, dtype=torch.float64)
    x = x0
    for t in range(1, 6):
        x = D.forward_step(s, x, t, gaussian(rng, x.shape, torch.float64))
    ab = s.alpha_bar_at(5)
    mean, var = math.sqrt(ab) * 0.7, 1 - ab
    se_mean = math.sqrt(var / n)
    se_var = var * math.sqrt(2 / (n - 1))
    assert abs(float(x.mean()) - mean) < 3 * se_mean
    assert abs(float(x.var()) - var) < 3 * se_var


def test_posterior_coefficients_two_step_oracle():
    s = S.build_linear(2, 0.1, 0.1)
    c0, ct = D.posterior_coefficients(s, 2)
    # hand-derived for beta=(0.1, 0.1): ab1=0.9, ab2=0.81
    assert c0 == pytest.approx(math.sqrt(0.9) * 0.1 / 0.19, rel=1e-12)
    assert ct == pytest.approx(math.sqrt(0.9) * 0.1 / 0.19, rel=1e-12)
    assert c0 + ct == pytest.approx(2 * math.sqrt(0.9) * 0.1 / 0.19, rel=1e-12)
    assert s.beta_tilde_at(2) == pytest.approx(0.1 * 0.1 / 0.19, rel=1e-12)


@pytest.mark.parametrize("t", [2, 7, 20])
def test_posterior_matches_gaussian_conditioning(t):
    s = S.build_cosine(20)
    ab, ab_prev, a = s.alpha_bar_at(t), s.alpha_bar_at(t - 1), s.alpha_at(t)
    # joint of (x_{t-1}, x_t) given x0, then condition on x_t
    cov = math.sqrt(a) * (1 - ab_prev)
    var_t = 1 - ab
    x0, xt = 0.4, -0.9
    mean = math.sqrt(ab_prev) * x0 + cov / var_t * (xt - math.sqrt(ab) * x0)
    var = (1 - ab_prev) - cov**2 / var_t
    m, v = D.forward_posterior(s, torch.tensor([[[[x0]]]], dtype=torch.float64),
                               torch.tensor([[[[xt]]]], dtype=torch.float64), t)
    assert float(m) == pytest.approx(mean, rel=1e-10)
    assert v == pytest.approx(var, rel=1e-10)


def test_posterior_batched_matches_scalar():
    s = S.build_linear(10)
    x0 = torch.randn(3, 1, 2, 2, dtype=torch.float64)
    xt = torch.randn(3, 1, 2, 2, dtype=torch.float64)
    steps = torch.tensor([2, 5, 10])
    m, v = D.forward_posterior(s, x0, xt, steps)
    for i, t in enumerate(steps.tolist()):
        ms, vs = D.forward_posterior(s, x0[i:i + 1], xt[i:i + 1], t)
        assert torch.allclose(m[i:i + 1], ms)
        assert float(v[i]) == pytest.approx(vs)


def test_posterior_rejects_step_one():
    s = S.build_linear(10)
    x = torch.zeros(1, 1, 1, 1)
    with pytest.raises(StepError):
        D.forward_posterior(s, x, x, 1)
    with pytest.raises(StepError):
        D.forward_posterior(s, x, x, torch.tensor([1]))


def test_normal_kl_matches_quadrature():
    m1, v1, m2, v2 = 0.3, 0.5, -0.2, 1.7
    p, q = stats.norm(m1, math.sqrt(v1)), stats.norm(m2, math.sqrt(v2))
    oracle, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), -20, 20)
    kl = D.normal_kl(torch.tensor(m1, dtype=torch.float64), v1, torch.tensor(m2, dtype=torch.float64), v2)
    assert float(kl) == pytest.approx(oracle, rel=1e-8)


def test_kl_zero_when_model_matches_posterior():
    s = S.build_linear(10)
    x0 = torch.rand(2, 1, 3, 3, dtype=torch.float64) * 2 - 1
    xt = torch.randn_like(x0)
    for t in (2, 5, 10):
        mean, var = D.forward_posterior(s, x0, xt, t)
        sig = float(D.sigma2(s, TILDE, t))
        assert float(D.normal_kl(mean, var, mean, sig).abs().max()) == 0.0


def _levels():
    return torch.linspace(-1, 1, 256, dtype=torch.float64)


def test_bin_masses_sum_to_one():
    rng = np.random.default_rng(3)
    x = _levels()
    for _ in range(100):
        mean = rng.uniform(-1.5, 1.5)
        sigma = float(np.exp(rng.uniform(np.log(1e-3), np.log(2.0))))
        logp = D.discretized_gaussian_log_probs(x, torch.full_like(x, mean), sigma)
        assert abs(float(logp.exp().sum()) - 1.0) < 1e-6


def test_bin_masses_match_scipy_cdf():
    x = _levels()
    mean, sigma = 0.13, 0.05
    logp = D.discretized_gaussian_log_probs(x, torch.full_like(x, mean), sigma).numpy()
    edges_hi = np.append(x.numpy()[:-1] + 1 / 255, np.inf)
    edges_lo = np.insert(x.numpy()[1:] - 1 / 255, 0, -np.inf)
    oracle = stats.norm.cdf(edges_hi, mean, sigma) - stats.norm.cdf(edges_lo, mean, sigma)
    big = oracle > 1e-10
    assert np.allclose(np.exp(logp[big]), oracle[big], rtol=1e-8)


def test_bin_log_probs_floor_and_dtype():
    x = torch.tensor([1.0], dtype=torch.float32)
    logp = D.discretized_gaussian_log_probs(x, torch.tensor([-1.0]), 1e-3)
    assert logp.dtype == torch.float32
    assert float(logp) == pytest.approx(D.LOG_FLOOR)
    with pytest.raises(ValueError):
        D.discretized_gaussian_log_probs(x, x, 0.0)


def test_weighted_loss_is_prefactor_times_simple():
    s = S.build_linear(20)
    net = _LinearNet()
    x0 = torch.rand(4, 1, 4, 4) * 2 - 1
    eps = gaussian(Rng(2), x0.shape)
    for cfg in (BETA, TILDE):
        for t in (1, 2, 9, 20):
            w = float(D.loss_weight(s, cfg, t))
            assert D.loss_weighted(s, cfg, net, x0, t, eps=eps) == w * D.loss_simple(s, net, x0, t, eps=eps)


def test_loss_weight_closed_form():
    s = S.build_linear(20)
    t = 7
    b, ab = s.beta_at(t), s.alpha_bar_at(t)
    assert float(D.loss_weight(s, BETA, t)) == pytest.approx(b / (2 * (1 - b) * (1 - ab)), rel=1e-12)
    bt = s.beta_tilde_at(t)
    assert float(D.loss_weight(s, TILDE, t)) == pytest.approx(b * b / (2 * bt * (1 - b) * (1 - ab)), rel=1e-12)


def test_kl_term_equals_weighted_squared_error():
    # with sigma^2 = beta_tilde the KL reduces to weight * sum of squared eps errors
    s = S.build_linear(20)
    net = _LinearNet().double()
    x0 = torch.rand(3, 1, 4, 4, dtype=torch.float64) * 2 - 1
    eps = gaussian(Rng(5), x0.shape, torch.float64)
    for t in (2, 10, 20):
        kl = D.vlb_term(s, TILDE, net, x0, t, eps)
        sq = D.eps_squared_error(s, net, x0, t, eps) * x0[0].numel()
        assert torch.allclose(kl, float(D.loss_weight(s, TILDE, t)) * sq, rtol=1e-9)


def test_vlb_term_step_one_is_decoder():
    s = S.build_linear(10)
    x0 = torch.rand(2, 1, 4, 4, dtype=torch.float64) * 2 - 1
    eps = gaussian(Rng(1), x0.shape, torch.float64)
    term = D.vlb_term(s, BETA, _zero_net, x0, 1, eps)
    x1 = D.forward_marginal(s, x0, 1, eps)
    mean = x1 / math.sqrt(s.alpha_at(1))
    expect = -D.discretized_gaussian_ll(x0, mean, math.sqrt(s.beta_at(1)))
    assert torch.allclose(term, expect)


def test_vlb_terms_shapes_and_prior():
    s = S.build_linear(6)
    x0 = torch.zeros(2, 1, 2, 2)
    terms = D.vlb_terms(s, TILDE, _zero_net, x0, Rng(0))
    assert terms.kl.shape == (2, 5)
    ab = s.alpha_bar_at(6)
    prior = 4 * 0.5 * (-math.log(1 - ab) + (1 - ab) - 1)
    assert torch.allclose(terms.prior, torch.full((2,), prior))
    assert torch.all(torch.isfinite(terms.total))


def test_ancestral_zero_net_deterministic_closed_form():
    s = S.build_linear(10)
    cfg = D.ReverseKernelConfig("beta", temperature=0.0)
    rng = Rng(4)
    out = D.ancestral_sample(s, cfg, _zero_net, (2, 1, 3, 3), rng, clamp=False)
    xT = gaussian(Rng(4), (2, 1, 3, 3))
    assert torch.allclose(out, xT / math.sqrt(s.alpha_bar_at(10)), rtol=1e-5)


def test_reverse_step_final_mean_and_noise():
    s = S.build_linear(10)
    x = torch.ones(1, 1, 2, 2)
    m = D.reverse_step(s, BETA, _zero_net, x, 1, Rng(0))
    assert torch.allclose(m, x / math.sqrt(s.alpha_at(1)))
    noisy = D.reverse_step(s, BETA, _zero_net, x, 1, Rng(0), final_noise=True)
    assert not torch.equal(noisy, m)


def test_sigma2_modes():
    s = S.build_linear(10)
    assert float(D.sigma2(s, BETA, 3)) == s.beta_at(3)
    assert float(D.sigma2(s, TILDE, 3)) == pytest.approx(s.beta_tilde_at(3))
    assert float(D.sigma2(s, TILDE, 1)) == pytest.approx(s.beta_tilde_at(2))
    with pytest.raises(ValueError):
        D.ReverseKernelConfig("learned")


def test_corrupt_validation_and_shape():
    x = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ValueError):
        D.corrupt(x, 1.0, x)
    with pytest.raises(ShapeError):
        D.corrupt(x, 0.1, torch.zeros(1, 1, 2, 3))
    assert torch.equal(D.corrupt(x, 0.0, torch.ones_like(x)), x)


def test_loss_requires_exactly_one_noise_source():
    s = S.build_linear(5)
    x = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ValueError):
        D.loss_simple(s, _zero_net, x, 2)
    with pytest.raises(ValueError):
        D.loss_simple(s, _zero_net, x, 2, Rng(0), eps=x)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 50), st.floats(-1, 1), st.floats(-3, 3), st.integers(0, 10_000))
def test_posterior_variance_below_beta(T, x0v, xtv, seed):
    s = S.build_cosine(T)
    t = seed % (T - 1) + 2
    _, var = D.forward_posterior(s, torch.full((1, 1, 1, 1), x0v), torch.full((1, 1, 1, 1), xtv), t)
    assert 0 < var <= s.beta_at(t)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.2, 1.2), st.floats(0.01, 1.0))
def test_bin_masses_normalized_property(mean, sigma):
    x = _levels()
    logp = D.discretized_gaussian_log_probs(x, torch.full_like(x, mean), sigma)
    assert abs(float(logp.exp().sum()) - 1.0) < 1e-6
    assert torch.all(logp <= 0)
