"""Tests for the simplex-constrained deconvolution fits and the grid EM."""

import json

import numpy as np
import pytest

from hamt.core import gauss_pdf
from hamt.deconv import (
    BasisConfig,
    GridSupport,
    constraint_sites,
    default_grid,
    fit_npmle,
    fit_prior,
    fit_prior_sigma_independent,
    load_model,
    model_from_dict,
    model_to_dict,
    prior_mass,
    save_model,
)
from hamt.pilot_kde import fit_pilot, pilot_density_batch

FEAS_EQ = 1e-6
FEAS_NEG = -1e-8


def _sample(m, seed=5):
    rng = np.random.Generator(np.random.Philox(seed))
    sigma = rng.uniform(0.5, 2.0, m)
    mu = np.where(rng.random(m) < 0.9, 0.0, rng.normal(3.0, 1.0, m))
    x = mu + sigma * rng.standard_normal(m)
    return x, sigma


@pytest.fixture(scope="module")
def medium_fit():
    data = _sample(600)
    pilot = fit_pilot(data)
    y = pilot_density_batch(pilot, data)
    grid = default_grid(data)
    model, report = fit_prior(data, pilot, grid, pilot_values=y)
    return data, pilot, y, grid, model, report


# ---------------------------------------------------------------------------
# grid, basis, sites
# ---------------------------------------------------------------------------


def test_default_grid_three_points():
    x = np.arange(11.0)
    g = default_grid((x, np.ones(11)), S=3)
    assert np.allclose(g.points, [0.0, 5.0, 10.0])


def test_default_grid_spacing():
    x = np.array([-1.0, 1.0, 0.3])
    g = default_grid((x, np.ones(3)), S=50)
    assert np.allclose(np.diff(g.points), 2.0 / 49.0)


def test_default_grid_degenerate():
    with pytest.raises(ValueError):
        default_grid((np.ones(5), np.ones(5)))


def test_grid_support_rejects_nonincreasing():
    with pytest.raises(ValueError):
        GridSupport(np.array([0.0, 0.0, 1.0]))


def test_basis_values():
    b = BasisConfig(K=3)
    q = b.matrix(np.array([0.0, 2.0]))
    assert q.shape == (2, 3)
    assert np.allclose(q[0], [1.0, 1.0, 1.0])
    assert np.allclose(q[1], [1.0, np.cos(2.0), np.cos(4.0)])


def test_basis_validation():
    with pytest.raises(ValueError):
        BasisConfig(K=0)
    with pytest.raises(ValueError):
        BasisConfig(kind="fourier")


def test_constraint_sites_are_unique_quantiles():
    rng = np.random.Generator(np.random.Philox(1))
    sigma = rng.uniform(0.5, 2.0, 1000)
    sites = constraint_sites(sigma)
    assert sites.size == 128
    assert np.all(np.diff(sites) > 0)
    assert sites.min() >= sigma.min() and sites.max() <= sigma.max()
    # small samples: one site per observation at most
    assert constraint_sites(sigma[:7]).size <= 7


# ---------------------------------------------------------------------------
# fit_prior
# ---------------------------------------------------------------------------


def test_single_grid_point_pins_solution():
    x, sigma = _sample(40, seed=11)
    pilot = fit_pilot((x, sigma))
    y = pilot_density_batch(pilot, (x, sigma))
    grid = GridSupport(np.array([0.0]))
    model, report = fit_prior((x, sigma), pilot, grid, pilot_values=y)
    # the only feasible prior puts mass 1 on the single support point, at
    # every data sigma, and the objective is pinned by the constraints
    g_at_data = model.basis.matrix(sigma) @ model.weights.T
    assert np.max(np.abs(g_at_data - 1.0)) <= 1e-6
    pinned = float(((y - gauss_pdf(x, 0.0, sigma)) ** 2).sum())
    assert report.objective == pytest.approx(pinned, rel=1e-9)
    assert prior_mass(model, 1.234) == pytest.approx([1.0])


def test_two_point_grid_matches_brute_force():
    x = np.array([-1.2, -0.8, 0.3, 0.9, 1.1])
    sigma = np.array([0.6, 0.8, 1.0, 1.2, 0.7])
    pilot = fit_pilot((x, sigma))
    y = pilot_density_batch(pilot, (x, sigma))
    grid = GridSupport(np.array([-1.0, 1.0]))
    model, report = fit_prior((x, sigma), pilot, grid, basis=BasisConfig(K=1), pilot_values=y)

    a = gauss_pdf(x, -1.0, sigma)
    b = gauss_pdf(x, 1.0, sigma)
    theta = np.linspace(0.0, 1.0, 100001)
    pred = theta[:, None] * a[None, :] + (1.0 - theta[:, None]) * b[None, :]
    obj = ((y[None, :] - pred) ** 2).sum(axis=1)
    k = int(np.argmin(obj))
    assert report.objective <= obj[k] + 1e-9
    assert abs(float(model.weights[0, 0]) - theta[k]) <= 2e-5


def test_fit_reports_feasible_optimum(medium_fit):
    _, _, _, _, model, report = medium_fit
    assert report.status == "optimal"
    assert report.primal_infeasibility <= FEAS_EQ
    site_masses = model.basis.matrix(model.sigma_ref) @ model.weights.T
    assert np.max(np.abs(site_masses.sum(axis=1) - 1.0)) <= FEAS_EQ
    assert site_masses.min() >= FEAS_NEG
    assert report.objective >= 0.0


def test_nestedness(medium_fit):
    data, pilot, y, grid, model, report = medium_fit
    _, report1 = fit_prior_sigma_independent(data, pilot, grid, pilot_values=y)
    assert report.objective <= report1.objective + 1e-8


def test_perturbation_certificate(medium_fit):
    data, pilot, y, grid, model, report = medium_fit
    x, sigma = data
    S, K = grid.size, model.basis.K
    conv = gauss_pdf(x[:, None], np.asarray(grid.points)[None, :], sigma[:, None])
    qb = model.basis.matrix(sigma)
    A = (conv[:, :, None] * qb[:, None, :]).reshape(x.size, S * K)

    def objective(W):
        r = A @ W.reshape(-1) - y
        return float(r @ r)

    f0 = objective(model.weights)
    assert f0 == pytest.approx(report.objective, rel=1e-9)
    rng = np.random.Generator(np.random.Philox(17))
    for _ in range(100):
        # direction toward a random feasible vertex keeps every constraint
        vertex = np.zeros_like(model.weights)
        vertex[:, 0] = rng.dirichlet(np.ones(S))
        d = vertex - model.weights
        step = 1e-3 / np.linalg.norm(d)
        assert objective(model.weights + step * d) >= f0 - 1e-9


def test_determinism(medium_fit):
    data, pilot, y, grid, model, _ = medium_fit
    model2, _ = fit_prior(data, pilot, grid, pilot_values=y)
    assert np.array_equal(model.weights, model2.weights)


def test_sigma_independent_is_constant_in_sigma(medium_fit):
    data, pilot, y, grid, _, _ = medium_fit
    model1, report1 = fit_prior_sigma_independent(data, pilot, grid, pilot_values=y)
    assert model1.basis.K == 1
    assert report1.status == "optimal"
    g_a = prior_mass(model1, 0.6)
    g_b = prior_mass(model1, 1.9)
    assert np.allclose(g_a, g_b)
    assert g_a.min() >= 0.0
    assert g_a.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.slow
def test_dependence_design_marginal_accuracy():
    # mu = 3 sigma, sigma ~ U(0.5, 2): the sigma-aware fit tracks the true
    # N(3s, s^2) marginal at least twice as closely as the K=1 fit does
    rng = np.random.Generator(np.random.Philox(33))
    m = 10000
    sigma = rng.uniform(0.5, 2.0, m)
    x = 3.0 * sigma + sigma * rng.standard_normal(m)
    pilot = fit_pilot((x, sigma))
    y = pilot_density_batch(pilot, (x, sigma))
    grid = default_grid((x, sigma))
    gp = np.asarray(grid.points)
    full, _ = fit_prior((x, sigma), pilot, grid, pilot_values=y)
    flat, _ = fit_prior_sigma_independent((x, sigma), pilot, grid, pilot_values=y)
    xg = np.linspace(x.min(), x.max(), 1500)
    for s in (1.0, 1.5, 2.0):
        truth = gauss_pdf(xg, 3.0 * s, s)
        phi = gauss_pdf(xg[:, None], gp[None, :], s)
        err_full = np.sqrt(np.trapezoid((phi @ prior_mass(full, s) - truth) ** 2, xg))
        err_flat = np.sqrt(np.trapezoid((phi @ prior_mass(flat, s) - truth) ** 2, xg))
        assert err_full <= 0.5 * err_flat


# ---------------------------------------------------------------------------
# prior_mass
# ---------------------------------------------------------------------------


def test_prior_mass_exact_simplex(medium_fit):
    _, _, _, _, model, _ = medium_fit
    rng = np.random.Generator(np.random.Philox(3))
    for s in rng.uniform(0.5, 2.0, 20):
        g = prior_mass(model, float(s))
        assert g.shape == (model.grid.size,)
        assert g.min() >= 0.0
        assert g.sum() == pytest.approx(1.0, abs=1e-12)


def test_prior_mass_noop_at_enforced_sites(medium_fit):
    _, _, _, _, model, _ = medium_fit
    raw = model.basis.matrix(model.sigma_ref) @ model.weights.T
    clipped = prior_mass(model, model.sigma_ref)
    assert np.max(np.abs(clipped - raw)) <= 1e-6


def test_prior_mass_vector_input(medium_fit):
    _, _, _, _, model, _ = medium_fit
    s = np.array([0.7, 1.1, 1.8])
    g = prior_mass(model, s)
    assert g.shape == (3, model.grid.size)
    assert np.allclose(g.sum(axis=1), 1.0)


def test_prior_mass_uniform_fallback():
    # a handcrafted model whose masses are negative at some sigma
    grid = GridSupport(np.array([0.0, 1.0]))
    basis = BasisConfig(K=2)
    from hamt.deconv import PriorModel

    w = np.array([[0.5, 1.0], [0.5, 1.0]])  # g_j(pi) = 0.5 - 1 < 0 for both j
    model = PriorModel(grid, basis, w, np.array([0.0]))
    with pytest.warns(UserWarning):
        g = prior_mass(model, float(np.pi))
    assert np.allclose(g, [0.5, 0.5])


# ---------------------------------------------------------------------------
# NPMLE grid EM
# ---------------------------------------------------------------------------


def test_npmle_single_point():
    x = np.array([0.3, -0.2, 0.1])
    pi = fit_npmle((x, np.ones(3)), GridSupport(np.array([0.0])))
    assert pi == pytest.approx([1.0])


def test_npmle_dominant_point():
    rng = np.random.Generator(np.random.Philox(9))
    x = 10.0 + rng.standard_normal(80)
    pi = fit_npmle((x, np.ones(80)), GridSupport(np.array([-10.0, 10.0])))
    assert pi[1] == pytest.approx(1.0, abs=1e-6)


def _loglik(pi, F):
    return float(np.log(np.maximum(F @ pi, 1e-300)).sum())


def _projected_gradient_mle(F, iters=20000, lr=0.05):
    """Independent maximizer: projected gradient ascent on the simplex."""
    S = F.shape[1]
    pi = np.full(S, 1.0 / S)
    for _ in range(iters):
        grad = (F / np.maximum(F @ pi, 1e-300)[:, None]).sum(axis=0)
        v = pi + lr * grad / F.shape[0]
        # Euclidean projection onto the simplex
        u = np.sort(v)[::-1]
        css = np.cumsum(u) - 1.0
        rho = np.nonzero(u - css / np.arange(1, S + 1) > 0)[0][-1]
        pi = np.maximum(v - css[rho] / (rho + 1.0), 0.0)
    return pi


def test_npmle_matches_projected_gradient():
    x, sigma = _sample(50, seed=21)
    grid = GridSupport(np.linspace(x.min(), x.max(), 12))
    F = gauss_pdf(x[:, None], np.asarray(grid.points)[None, :], sigma[:, None])
    pi_em = fit_npmle((x, sigma), grid, max_iter=20000, tol=1e-13)
    pi_pg = _projected_gradient_mle(F)
    assert _loglik(pi_em, F) >= _loglik(pi_pg, F) - 1e-4


def test_npmle_monotone_loglik():
    x, sigma = _sample(120, seed=23)
    grid = GridSupport(np.linspace(x.min(), x.max(), 15))
    F = gauss_pdf(x[:, None], np.asarray(grid.points)[None, :], sigma[:, None])
    S = grid.size
    pi = np.full(S, 1.0 / S)
    lls = [_loglik(pi, F)]
    for _ in range(60):
        mix = np.maximum(F @ pi, 1e-300)
        pi = ((F * pi[None, :]) / mix[:, None]).mean(axis=0)
        pi /= pi.sum()
        lls.append(_loglik(pi, F))
    assert np.all(np.diff(lls) >= -1e-12)
    pi_lib = fit_npmle((x, sigma), grid, max_iter=60, tol=0.0)
    assert _loglik(pi_lib, F) >= lls[-1] - 1e-9


def test_npmle_simplex_output():
    x, sigma = _sample(200, seed=29)
    pi = fit_npmle((x, sigma), default_grid((x, sigma)))
    assert pi.min() >= 0.0
    assert pi.sum() == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_model_round_trip(tmp_path, medium_fit):
    _, _, _, _, model, report = medium_fit
    path = tmp_path / "model.json"
    save_model(path, model, report)
    loaded, rep2 = load_model(path)
    assert np.array_equal(loaded.weights, model.weights)
    assert np.array_equal(np.asarray(loaded.grid.points), np.asarray(model.grid.points))
    assert np.array_equal(loaded.sigma_ref, model.sigma_ref)
    assert loaded.basis == model.basis
    assert rep2 == report


def test_model_dict_schema(medium_fit):
    _, _, _, _, model, report = medium_fit
    d = model_to_dict(model, report)
    assert set(d) == {"grid", "basis", "weights", "sigma_ref", "report"}
    assert d["basis"] == {"kind": "cosine", "K": 10}
    assert len(d["weights"]) == model.grid.size
    blob = json.dumps(d)
    loaded, _ = model_from_dict(json.loads(blob))
    assert np.array_equal(loaded.weights, model.weights)


def test_model_dict_without_report(medium_fit):
    _, _, _, _, model, _ = medium_fit
    d = model_to_dict(model)
    assert "report" not in d
    loaded, rep = model_from_dict(d)
    assert rep is None
    assert np.array_equal(loaded.weights, model.weights)
