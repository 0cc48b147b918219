import math

import numpy as np
import pytest
from scipy import integrate, stats

from hawkes_st.gp import (
    CholeskyError,
    KernelSpec,
    LatentField,
    LinkSpec,
    gram_cholesky,
    grid_cholesky,
    kernel_eval,
    kernel_matrix,
    link_apply,
    link_derivative,
    link_invert,
    matern_correlation,
    prior_draw,
)
from hawkes_st.grid import Grid
from hawkes_st.model import DomainError, TriggeringSupport, branching_ratio, l1_distance
from hawkes_st.simulate import sequence_rng


def test_rbf_as_printed():
    assert kernel_eval(KernelSpec.rbf(1.0, 1.0), [0.0, 0.0], [1.0, 0.0]) == pytest.approx(math.exp(-1))
    assert kernel_eval(KernelSpec.rbf(2.5, 0.4), [0.3], [0.3]) == 2.5


@pytest.mark.parametrize("r", [0.1, 1.0, 2.0])
def test_matern_half_is_exponential(r):
    k = KernelSpec.matern(1.0, 0.7, 0.5)
    assert kernel_eval(k, [0.0], [r]) == pytest.approx(math.exp(-r / 0.7), abs=1e-10)


@pytest.mark.parametrize("tau", [0.5, 1.0, 1.5, 2.5, 5.0])
def test_matern_zero_lag_is_variance(tau):
    assert kernel_eval(KernelSpec.matern(1.7, 0.3, tau), [0.2, 0.4], [0.2, 0.4]) == pytest.approx(1.7)
    # continuity at the origin
    assert kernel_eval(KernelSpec.matern(1.7, 0.3, tau), [0.2], [0.2 + 1e-9]) == pytest.approx(1.7, rel=1e-6)


def test_matern_closed_forms():
    # tau = 3/2 and 5/2 have elementary forms in x = sqrt(2 tau) r / l
    r = np.linspace(0.01, 3.0, 40)
    x = math.sqrt(3) * r
    assert np.allclose(matern_correlation(r, 1.0, 1.5), (1 + x) * np.exp(-x), atol=1e-12)
    x = math.sqrt(5) * r
    assert np.allclose(matern_correlation(r, 1.0, 2.5), (1 + x + x**2 / 3) * np.exp(-x), atol=1e-12)


def test_matern_approaches_squared_exponential_monotonically():
    for q in (0.5, 1.0, 2.0):
        se = math.exp(-(q**2) / 2)
        gaps = [abs(float(matern_correlation(q, 1.0, tau)) - se) for tau in (10, 50, 100)]
        assert gaps[0] > gaps[1] > gaps[2]


def test_separable_is_product_of_factors():
    rng = np.random.default_rng(0)
    kt, ks = KernelSpec.matern(1.0, 0.2, 1.5), KernelSpec.rbf(1.0, 0.3)
    k = KernelSpec.separable(kt, ks, amplitude=1.3)
    for _ in range(100):
        u, v = rng.random(3), rng.random(3)
        expect = 1.3 * kernel_eval(kt, u[:1], v[:1]) * kernel_eval(ks, u[1:], v[1:])
        assert kernel_eval(k, u, v) == pytest.approx(expect, rel=1e-12, abs=1e-300)


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec.rbf(0.0, 1.0)
    with pytest.raises(ValueError):
        KernelSpec.matern(1.0, 1.0, -1.0)
    nested = KernelSpec.separable(KernelSpec.rbf(), KernelSpec.rbf())
    with pytest.raises(ValueError):
        KernelSpec.separable(nested, KernelSpec.rbf())
    with pytest.raises(ValueError):
        kernel_eval(KernelSpec.rbf(), [0.0], [0.0, 1.0])


def test_kernel_round_trip_dict():
    k = KernelSpec.separable(KernelSpec.matern(1.0, 0.2, 2.5), KernelSpec.rbf(0.5, 0.1), 2.0)
    assert KernelSpec.from_dict(k.to_dict()) == k


@pytest.mark.parametrize("spec", [KernelSpec.rbf(1.0, 0.3), KernelSpec.matern(2.0, 0.25, 1.5)])
def test_gram_symmetric_psd_and_diagonal_dominant(spec):
    nodes = Grid((0.0, 0.0), (1.0, 1.0), 6).nodes
    K = kernel_matrix(spec, nodes)
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() > -1e-8
    assert np.all(K <= np.diag(K)[:, None] + 1e-15)


def test_cholesky_single_node_and_two_nodes():
    spec = KernelSpec.rbf(2.0, 0.5)
    L = gram_cholesky(spec, np.array([[0.3]]))
    assert L[0, 0] == pytest.approx(math.sqrt(2.0 + 2.0 * 1e-10), rel=1e-14)
    L2 = gram_cholesky(spec, np.array([[0.0], [0.5]]))
    var = 2.0 * (1 + 1e-10)
    k = 2.0 * math.exp(-1.0)
    expect = np.array([[math.sqrt(var), 0.0], [k / math.sqrt(var), math.sqrt(var - k**2 / var)]])
    assert np.allclose(L2, expect, atol=1e-10)


def test_cholesky_reproduces_gram_with_jitter():
    spec = KernelSpec.matern(1.0, 0.3, 1.5)
    grid = Grid((0.0, 0.0), (1.0, 1.0), 8)
    L = grid_cholesky(spec, grid)
    K = kernel_matrix(spec, grid.nodes)
    assert np.max(np.abs(L @ L.T - K)) < 1e-8


def test_cholesky_failure_reports_diagnostics(monkeypatch):
    # a PSD Gram always factorizes once jitter reaches 1e-4 var, so force the failure path
    def refuse(_):
        raise np.linalg.LinAlgError("not positive definite")

    monkeypatch.setattr(np.linalg, "cholesky", refuse)
    with pytest.raises(CholeskyError, match="eigenvalue range"):
        gram_cholesky(KernelSpec.rbf(1.0, 0.3), np.linspace(0, 1, 5)[:, None])


def test_sampled_covariance_matches_gram():
    spec = KernelSpec.matern(1.5, 0.4, 1.5)
    grid = Grid((0.0, 0.0), (1.0, 1.0), 4)
    L = grid_cholesky(spec, grid)
    N = 1000
    draws = sequence_rng(3, 0).standard_normal((N, grid.size)) @ L.T
    emp = draws.T @ draws / N
    K = L @ L.T
    se = np.sqrt((np.outer(np.diag(K), np.diag(K)) + K**2) / N)
    assert np.all(np.abs(emp - K) <= 5 * se)


def test_links():
    assert float(link_apply(LinkSpec.softplus(), 0.0)) == pytest.approx(math.log(2))
    sig = LinkSpec.scaled_sigmoid(2.0, 1.0)
    assert float(link_apply(sig, 0.0)) == pytest.approx(1.0)
    xs = np.array([-30.0, -1.0, 0.0, 1.0, 30.0])
    sp = LinkSpec.softplus()
    assert np.allclose(link_invert(sp, link_apply(sp, xs)), xs, atol=1e-10, rtol=0)
    # the sigmoid saturates: near the ceiling float64 resolution, not the inverse, limits the round trip
    xs_sig = np.array([-30.0, -1.0, 0.0, 1.0, 5.0])
    assert np.allclose(link_invert(sig, link_apply(sig, xs_sig)), xs_sig, atol=1e-10, rtol=0)
    for link in (sp, sig):
        assert np.all(np.diff(link_apply(link, xs)) > 0)
    assert np.isfinite(link_apply(LinkSpec.softplus(), 800.0))
    with pytest.raises(DomainError):
        link_invert(sig, 2.0)
    with pytest.raises(DomainError):
        link_invert(LinkSpec.softplus(), 0.0)


def test_link_derivative_matches_finite_differences():
    xs = np.linspace(-5, 5, 21)
    for link in (LinkSpec.softplus(), LinkSpec.scaled_sigmoid(3.0, 0.7)):
        fd = (link_apply(link, xs + 1e-6) - link_apply(link, xs - 1e-6)) / 2e-6
        assert np.allclose(link_derivative(link, xs), fd, rtol=1e-6)


def test_whitening_round_trip():
    grid = Grid((0.0, 0.0), (1.0, 1.0), 6)
    field = LatentField.zeros(grid, KernelSpec.matern(1.0, 0.3, 1.5), LinkSpec.softplus())
    z = sequence_rng(1, 0).standard_normal(grid.size)
    f = field.with_z(z)
    assert np.allclose(f.rewhiten(f.values()), z, atol=1e-8)


def test_prior_draw_bounded_by_link_ceiling_and_deterministic():
    sup = TriggeringSupport(0.1, 0.1)
    k = KernelSpec.matern(1.0, 0.3, 1.5)
    links = (LinkSpec.softplus(), LinkSpec.scaled_sigmoid(0.5))
    for seed in range(20):
        f = prior_draw(k, k, links, sup, seed, d=1, cells=8)
        assert branching_ratio(f.g) <= 0.5 * 0.1 * 0.2
    a = prior_draw(k, k, links, sup, 7, d=1, cells=8)
    b = prior_draw(k, k, links, sup, 7, d=1, cells=8)
    assert l1_distance(a, b) == 0.0 and np.array_equal(a.mu.values, b.mu.values)


def test_prior_draw_fails_when_trigger_mass_cannot_stay_below_one():
    k = KernelSpec.rbf(1.0, 0.3)
    links = (LinkSpec.softplus(), LinkSpec.scaled_sigmoid(1000.0))
    with pytest.raises(ValueError, match="amplitude"):
        prior_draw(k, k, links, TriggeringSupport(0.4, 0.4), 0, d=1, cells=4, max_redraws=3)


def test_prior_pushforward_mean_at_a_node():
    spec = KernelSpec.matern(1.0, 0.3, 1.5)
    grid = Grid((0.0, 0.0), (1.0, 1.0), 4)
    L = grid_cholesky(spec, grid)
    node = 7
    x = sequence_rng(5, 0).standard_normal((5000, grid.size)) @ L[node]
    vals = np.logaddexp(0.0, x)
    sd = math.sqrt(L[node] @ L[node])
    exact = integrate.quad(lambda u: np.logaddexp(0.0, u) * stats.norm.pdf(u, scale=sd), -12 * sd, 12 * sd)[0]
    assert abs(vals.mean() - exact) < 4 * vals.std(ddof=1) / math.sqrt(len(vals))
