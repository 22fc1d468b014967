import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradient
from disent import regularizers as R
from disent.errors import ConfigurationError, DomainError
from disent.vae import EncoderOutput, kl_to_prior


def f64(x):
    return torch.tensor(x, dtype=torch.float64)


# -- beta / annealed --------------------------------------------------------


def test_beta_reg():
    assert R.beta_reg(2.0, 1.0) == 2.0
    assert R.beta_reg(2.0, 4.0) == 8.0
    assert R.beta_reg(0.0, 7.0) == 0.0


def test_capacity_schedule():
    assert R.capacity_at(0, 25.0, 1000) == 0.0
    assert R.capacity_at(1000, 25.0, 1000) == 25.0
    assert R.capacity_at(5000, 25.0, 1000) == 25.0
    assert R.capacity_at(500, 25.0, 1000) == 12.5
    with pytest.raises(ConfigurationError):
        R.capacity_at(10, 25.0, 0)
    values = [R.capacity_at(t, 3.0, 77) for t in range(200)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_annealed_reg():
    assert R.annealed_reg(2.0, 10.0, 2.0) == 0.0
    assert R.annealed_reg(3.0, 10.0, 1.0) == 20.0
    assert R.annealed_reg(1.0, 10.0, 3.0) == 20.0
    assert R.annealed_reg(f64(1.0), 10.0, 3.0).item() == 20.0


# -- permute dims -------------------------------------------------------------


def test_permute_single_row_is_identity():
    z = torch.randn(1, 5)
    assert torch.equal(R.permute_dims(z, np.random.default_rng(0)), z)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 20), d=st.integers(1, 6), seed=st.integers(0, 2 ** 16))
def test_permute_preserves_column_multisets(n, d, seed):
    z = torch.from_numpy(np.random.default_rng(seed).normal(size=(n, d)))
    out = R.permute_dims(z, np.random.default_rng(seed + 1))
    assert torch.equal(torch.sort(out, dim=0).values, torch.sort(z, dim=0).values)


def test_permute_matches_enumerated_oracle():
    z = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
    perms = list(itertools.permutations(range(3)))
    candidates = {(a, b): np.stack([z[list(a), 0], z[list(b), 1]], axis=1) for a in perms for b in perms}
    assert len(candidates) == 36
    for seed in range(10):
        out = R.permute_dims(z, np.random.default_rng(seed))
        replay = np.random.default_rng(seed)
        chosen = (tuple(replay.permutation(3)), tuple(replay.permutation(3)))
        matches = [k for k, c in candidates.items() if np.array_equal(c, out)]
        assert matches == [chosen]


# -- discriminator-based TC ---------------------------------------------------


def test_tc_estimate_examples():
    assert R.tc_estimate(f64([[0.3, 0.3], [-1.0, -1.0]])).item() == 0.0
    assert R.tc_estimate(f64([[2.0, 0.0]] * 4)).item() == pytest.approx(2.0, abs=1e-12)
    assert R.tc_estimate(f64([[1.0, 0.0], [0.0, 1.0]])).item() == 0.0


def test_factor_vae_reg():
    assert R.factor_vae_reg(1.5, 0.0, 0.7) == 1.5
    assert R.factor_vae_reg(1.0, 10.0, 0.2) == pytest.approx(3.0, abs=1e-12)
    assert R.factor_vae_reg(1.5, 10.0, 0.0) == 1.5


def test_discriminator_loss_examples():
    zeros = torch.zeros(4, 2, dtype=torch.float64)
    assert R.discriminator_loss(zeros, zeros).item() == pytest.approx(math.log(2), abs=1e-12)
    real = f64([[20.0, -20.0]] * 3)
    perm = f64([[-20.0, 20.0]] * 3)
    assert R.discriminator_loss(real, perm).item() < 1e-6


def test_discriminator_loss_oracle():
    rng = np.random.default_rng(2)
    real, perm = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))

    def ce(row, cls):
        return -(row[cls] - math.log(math.exp(row[0]) + math.exp(row[1])))

    expected = 0.5 * (np.mean([ce(r, 0) for r in real]) + np.mean([ce(r, 1) for r in perm]))
    got = R.discriminator_loss(torch.from_numpy(real), torch.from_numpy(perm)).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_tc_and_disc_loss_row_permutation_invariant():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(8, 2, generator=g, dtype=torch.float64)
    b = torch.randn(8, 2, generator=g, dtype=torch.float64)
    p = torch.randperm(8, generator=g)
    assert R.tc_estimate(a).item() == pytest.approx(R.tc_estimate(a[p]).item(), abs=1e-14)
    assert R.discriminator_loss(a, b).item() == pytest.approx(R.discriminator_loss(a[p], b[p]).item(), abs=1e-14)


def test_discriminator_shape():
    disc = R.Discriminator(10, R.DiscriminatorConfig(hidden_width=32))
    linears = [m for m in disc.modules() if isinstance(m, torch.nn.Linear)]
    assert len(linears) == 6
    assert disc(torch.randn(5, 10)).shape == (5, 2)
    with pytest.raises(ConfigurationError):
        R.DiscriminatorConfig(num_layers=1)


# -- DIP ----------------------------------------------------------------------


def test_latent_covariance_examples():
    cov = R.latent_covariance(f64([[1.0, 0.0], [-1.0, 0.0]]), "mu")
    assert torch.equal(cov, f64([[1.0, 0.0], [0.0, 0.0]]))
    const = R.latent_covariance(f64([[2.0, -3.0]] * 5), "z")
    assert torch.equal(const, torch.zeros(2, 2, dtype=torch.float64))
    with pytest.raises(DomainError):
        R.latent_covariance(f64([[1.0, 2.0]]), "mu")
    with pytest.raises(DomainError):
        R.latent_covariance(f64([[1.0, 2.0]] * 3), "sigma")


def test_latent_covariance_two_pass_oracle():
    s = np.random.default_rng(4).normal(size=(5, 3))
    n, d = s.shape
    mean = [sum(s[i, j] for i in range(n)) / n for j in range(d)]
    oracle = np.array([[sum((s[i, a] - mean[a]) * (s[i, b] - mean[b]) for i in range(n)) / n
                        for b in range(d)] for a in range(d)])
    cov = R.latent_covariance(torch.from_numpy(s), "z").numpy()
    np.testing.assert_allclose(cov, oracle, atol=1e-10, rtol=0)
    np.testing.assert_allclose(cov, cov.T, atol=1e-9)
    assert np.all(np.diag(cov) >= 0)


def test_dip_penalty_examples():
    assert R.dip_penalty(torch.eye(3, dtype=torch.float64), 10, 10).item() == 0.0
    assert R.dip_penalty(f64([[1.0, 0.5], [0.5, 1.0]]), 10, 10).item() == pytest.approx(5.0, abs=1e-12)
    assert R.dip_penalty(f64([[2.0, 0.0], [0.0, 1.0]]), 0, 10).item() == pytest.approx(10.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 5))
def test_dip_penalty_zero_only_at_identity(seed, d):
    a = np.random.default_rng(seed).normal(size=(d, d)) * 0.3
    cov = torch.from_numpy(np.eye(d) + a @ a.T + 1e-3 * np.eye(d))
    assert R.dip_penalty(cov, 1.0, 1.0).item() > 0
    assert abs(R.dip_penalty(torch.eye(d, dtype=torch.float64), 1.0, 1.0).item()) <= 1e-9


# -- beta-TCVAE -----------------------------------------------------------------


def _log_normal(z, mu, logvar):
    return -0.5 * (math.log(2 * math.pi) + logvar + (z - mu) ** 2 / math.exp(logvar))


def test_btc_single_dimension_has_zero_tc():
    g = torch.Generator().manual_seed(0)
    enc = EncoderOutput(torch.randn(6, 1, generator=g, dtype=torch.float64),
                        torch.randn(6, 1, generator=g, dtype=torch.float64))
    z = torch.randn(6, 1, generator=g, dtype=torch.float64)
    assert R.total_correlation(enc, z, 100).item() == 0.0
    assert R.btc_reg(enc, z, 6.0, 100).item() == kl_to_prior(enc).item()


def test_btc_two_points_hand_computation():
    mu, logvar, z, N = [0.3, -0.8], [0.1, -0.4], [0.5, -1.0], 10
    enc = EncoderOutput(f64([[m] for m in mu]), f64([[v] for v in logvar]))
    zt = f64([[v] for v in z])
    mi, tc, dwkl = R.btc_decomposition(enc, zt, N)
    log_qz = [math.log(sum(math.exp(_log_normal(z[i], mu[j], logvar[j])) for j in range(2)) / (N * 2))
              for i in range(2)]
    log_qzx = [_log_normal(z[i], mu[i], logvar[i]) for i in range(2)]
    log_pz = [_log_normal(z[i], 0.0, 0.0) for i in range(2)]
    assert mi.item() == pytest.approx(np.mean([a - b for a, b in zip(log_qzx, log_qz)]), abs=1e-12)
    assert dwkl.item() == pytest.approx(np.mean([a - b for a, b in zip(log_qz, log_pz)]), abs=1e-12)
    assert tc.item() == 0.0


def test_btc_two_dims_hand_tc():
    mu = [[0.2, -0.1], [1.0, 0.4]]
    logvar = [[-0.5, 0.2], [0.1, -0.3]]
    z = [[0.1, 0.0], [0.9, 0.7]]
    N, n = 50, 2
    enc = EncoderOutput(f64(mu), f64(logvar))
    tc = R.total_correlation(enc, f64(z), N).item()
    expected = 0.0
    for i in range(n):
        joint = math.log(sum(math.exp(sum(_log_normal(z[i][k], mu[j][k], logvar[j][k]) for k in range(2)))
                             for j in range(n)) / (N * n))
        marg = sum(math.log(sum(math.exp(_log_normal(z[i][k], mu[j][k], logvar[j][k])) for j in range(n)) / (N * n))
                   for k in range(2))
        expected += (joint - marg) / n
    assert tc == pytest.approx(expected, abs=1e-12)


def test_btc_decomposition_sums_to_sampled_kl():
    g = torch.Generator().manual_seed(1)
    mu = torch.randn(64, 3, generator=g, dtype=torch.float64)
    logvar = torch.randn(64, 3, generator=g, dtype=torch.float64) * 0.3
    enc = EncoderOutput(mu, logvar)
    z = mu + torch.exp(0.5 * logvar) * torch.randn(64, 3, generator=g, dtype=torch.float64)
    mi, tc, dwkl = R.btc_decomposition(enc, z, 1000)
    sampled_kl = (R._log_density_gaussian(z, mu, logvar).sum(1)
                  - R._log_density_gaussian(z, torch.zeros_like(z), torch.zeros_like(z)).sum(1)).mean()
    assert (mi + tc + dwkl).item() == pytest.approx(sampled_kl.item(), abs=1e-9)
    # the single-sample estimate tracks the closed form within sampling error
    assert abs(sampled_kl.item() - kl_to_prior(enc).item()) < 1.0
    assert R.btc_reg(enc, z, 1.0, 1000).item() == kl_to_prior(enc).item()


def test_btc_monotone_in_beta():
    g = torch.Generator().manual_seed(5)
    base = torch.randn(32, 1, generator=g, dtype=torch.float64)
    mu = torch.cat([base, base + 0.05 * torch.randn(32, 1, generator=g, dtype=torch.float64)], 1)
    enc = EncoderOutput(mu, torch.full_like(mu, -4.0))
    z = mu.clone()
    assert R.total_correlation(enc, z, 32).item() > 0
    vals = [R.btc_reg(enc, z, b, 32).item() for b in (1.0, 2.0, 6.0)]
    assert vals[0] < vals[1] < vals[2]


def test_btc_needs_two_samples():
    enc = EncoderOutput(f64([[0.0, 0.0]]), f64([[0.0, 0.0]]))
    with pytest.raises(DomainError):
        R.btc_reg(enc, f64([[0.0, 0.0]]), 2.0, 10)


# -- reductions and config ------------------------------------------------------


def test_reductions_equal_plain_kl():
    g = torch.Generator().manual_seed(0)
    enc = EncoderOutput(torch.randn(8, 3, generator=g), torch.randn(8, 3, generator=g))
    z = torch.randn(8, 3, generator=g)
    kl = kl_to_prior(enc)
    tc = torch.tensor(0.37)
    assert R.beta_reg(kl, 1.0).item() == kl.item()
    assert R.annealed_reg(kl, 1.0, 0.0).item() == kl.item()
    assert R.factor_vae_reg(kl, 0.0, tc).item() == kl.item()
    assert (kl + R.dip_penalty(R.latent_covariance(enc.mu), 0.0, 0.0)).item() == kl.item()
    assert R.btc_reg(enc, z, 1.0, 100).item() == kl.item()


def test_regularizer_config():
    cfg = R.RegularizerConfig.for_kind("factor")
    assert cfg.gamma == 20.0
    assert R.RegularizerConfig.for_kind("annealed").c_max == 25.0
    assert R.RegularizerConfig.for_kind("dip_i", lambda_d=5.0).lambda_d == 5.0
    with pytest.raises(ConfigurationError):
        R.RegularizerConfig(kind="bottleneck")
    with pytest.raises(ConfigurationError):
        R.RegularizerConfig(kind="beta", beta=-1.0)


# -- gradients ------------------------------------------------------------------------


def test_gradient_dip_penalty():
    s = torch.from_numpy(np.random.default_rng(0).normal(size=(6, 4)))
    check_gradient(lambda x: R.dip_penalty(R.latent_covariance(x, "z"), 10.0, 5.0), s)


def test_gradient_btc_reg():
    g = torch.Generator().manual_seed(3)
    eps = torch.randn(5, 3, generator=g, dtype=torch.float64)
    params = torch.randn(2, 5, 3, generator=g, dtype=torch.float64) * 0.5

    def f(p):
        enc = EncoderOutput(p[0], p[1])
        z = p[0] + torch.exp(0.5 * p[1]) * eps
        return R.btc_reg(enc, z, 6.0, 100)

    check_gradient(f, params)


def test_gradient_factor_vae_reg():
    g = torch.Generator().manual_seed(4)
    w = torch.randn(4, 2, generator=g, dtype=torch.float64)
    eps = torch.randn(6, 4, generator=g, dtype=torch.float64)
    params = torch.randn(2, 6, 4, generator=g, dtype=torch.float64) * 0.5

    def f(p):
        enc = EncoderOutput(p[0], p[1])
        z = p[0] + torch.exp(0.5 * p[1]) * eps
        tc = R.tc_estimate(torch.tanh(z) @ w)
        return R.factor_vae_reg(kl_to_prior(enc), 20.0, tc)

    check_gradient(f, params)


def test_gradient_annealed_away_from_kink():
    params = torch.from_numpy(np.random.default_rng(6).normal(size=(2, 3, 2)))

    def f(p):
        return R.annealed_reg(kl_to_prior(EncoderOutput(p[0], p[1])), 1000.0, 0.01)

    assert kl_to_prior(EncoderOutput(params[0], params[1])).item() > 0.1
    check_gradient(f, params)
