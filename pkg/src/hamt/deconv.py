"""Prior deconvolution by simplex-constrained least squares.

The latent-mean prior g_mu(. | sigma) is modeled on a fixed grid u_1 < ... < u_S
with sigma-dependent masses

    g_j(sigma) = w_j' q(sigma),    q(sigma) = (1, cos(sigma), ..., cos((K-1) sigma)),

and the weight matrix W (S x K) is chosen to make the implied marginal density
sum_j phi_sigma_i(x_i - u_j) g_j(sigma_i) track the pilot estimate in least
squares, subject to g(sigma) lying on the probability simplex at a set of
enforced sigma sites. Two baselines share the machinery: the sigma-independent
fit (K = 1) and a grid EM for the nonparametric MLE mixture.
"""

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from cvxopt import matrix, solvers, spmatrix
from scipy.linalg import qr

from .core import SQRT_2PI, as_arrays
from .pilot_kde import PilotEstimate, pilot_density_batch

DEFAULT_GRID_SIZE = 50
DEFAULT_NUM_BASIS = 10
MAX_CONSTRAINT_SITES = 128
FEASIBILITY_TOL = 1e-6


@dataclass(frozen=True)
class GridSupport:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size < 1 or np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")

    @property
    def size(self) -> int:
        return int(np.asarray(self.points).size)


@dataclass(frozen=True)
class BasisConfig:
    """Cosine basis with a constant first element.

    q_1(sigma) = 1 and q_k(sigma) = cos((k - 1) sigma) for k = 2..K. The
    constant element makes the sum-to-one constraint representable for
    sigma-independent priors and nests the K = 1 baseline.
    """

    K: int = DEFAULT_NUM_BASIS
    kind: str = "cosine"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.kind != "cosine":
            raise ValueError(f"unknown basis kind: {self.kind}")

    def matrix(self, sigma) -> np.ndarray:
        """Evaluate q(sigma) for each sigma; returns shape (n, K)."""
        s = np.atleast_1d(np.asarray(sigma, dtype=float))
        cols = [np.ones_like(s)]
        for k in range(1, self.K):
            cols.append(np.cos(k * s))
        return np.stack(cols, axis=1)


@dataclass(frozen=True)
class QpReport:
    objective: float
    iterations: int
    primal_infeasibility: float
    status: str  # "optimal" | "max_iter" | "degenerate"


@dataclass(frozen=True)
class PriorModel:
    grid: GridSupport
    basis: BasisConfig
    weights: np.ndarray  # S x K, row j = w_j
    sigma_ref: np.ndarray  # sigma sites where the simplex constraints were enforced


def default_grid(data, S: int = DEFAULT_GRID_SIZE) -> GridSupport:
    """S equally spaced support points spanning [min x, max x]."""
    x, _ = as_arrays(data)
    if x.size < 2 or S < 2:
        raise ValueError("default_grid needs m >= 2 and S >= 2")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        raise ValueError("degenerate grid: all x equal")
    return GridSupport(np.linspace(lo, hi, S))


def constraint_sites(sigma: np.ndarray, max_sites: int = MAX_CONSTRAINT_SITES) -> np.ndarray:
    """Mid-quantile sigma sites at which the simplex constraints are enforced."""
    L = min(sigma.size, max_sites)
    probs = (np.arange(L) + 0.5) / L
    return np.unique(np.quantile(sigma, probs))


def _convolution_matrix(x, sigma, grid: GridSupport) -> np.ndarray:
    """Entries phi_sigma_i(x_i - u_j), shape (m, S)."""
    u = np.asarray(grid.points)
    z = (x[:, None] - u[None, :]) / sigma[:, None]
    return np.exp(-0.5 * z * z) / (SQRT_2PI * sigma[:, None])


def _independent_equality_rows(site_basis: np.ndarray) -> np.ndarray:
    """Indices of a maximal linearly independent subset of the site basis rows.

    The sum-to-one rows at the L sites all share the pattern 1_S (x) q(sigma_l),
    whose rank is that of the q rows. Because q_1 = 1, any dependent row's
    right-hand side (= 1) is automatically consistent, so dropping dependent
    rows changes nothing about the feasible set.
    """
    _, R, piv = qr(site_basis.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > diag[0] * 1e-12)) if diag.size else 0
    return np.sort(piv[: max(rank, 1)])


def _solve_qp(P, q, G_rows, G_cols, G_vals, h, A_dense, b, n, max_iter):
    """Interior-point solve; returns (x, converged, iterations).

    The tolerances are set tighter than double precision can always certify,
    so the solver may stop early with status "unknown" while holding an
    iterate that is optimal for all practical purposes. An iterate counts as
    converged when the solver says "optimal", or when it stalled below the
    iteration cap with a tiny relative duality gap and feasible residuals.
    """
    G = spmatrix(
        matrix(np.asarray(G_vals, dtype=float)),
        np.asarray(G_rows).tolist(),
        np.asarray(G_cols).tolist(),
        (len(h), n),
    )
    opts = {
        "show_progress": False,
        "maxiters": int(max_iter),
        "abstol": 1e-9,
        "reltol": 1e-9,
        "feastol": 1e-8,
    }
    sol = solvers.qp(
        matrix(P), matrix(q), G, matrix(h), matrix(A_dense), matrix(b), options=opts
    )
    iters = int(sol["iterations"])
    converged = sol["status"] == "optimal"
    if not converged and iters < int(max_iter):
        rel_gap = sol.get("relative gap")
        pres = sol.get("primal infeasibility")
        dres = sol.get("dual infeasibility")
        converged = (
            rel_gap is not None
            and rel_gap <= 1e-6
            and pres is not None
            and pres <= FEASIBILITY_TOL
            and dres is not None
            and dres <= 1e-6
        )
    return np.asarray(sol["x"]).ravel(), converged, iters


def fit_prior(
    data,
    pilot: PilotEstimate,
    grid: Optional[GridSupport] = None,
    basis: Optional[BasisConfig] = None,
    max_iter: int = 200,
    pilot_values: Optional[np.ndarray] = None,
    max_sites: int = MAX_CONSTRAINT_SITES,
):
    """Fit the sigma-dependent prior by constrained least squares.

    Parameters
    ----------
    data : (x, sigma) arrays or equivalent
        The units the objective sums over.
    pilot : PilotEstimate
        Pilot density estimate built on the same data.
    grid, basis : optional
        Support grid (default: 50 equispaced points over the x range) and
        basis (default: K = 10 cosine-with-constant).
    max_iter : int
        Interior-point iteration cap.
    pilot_values : ndarray, optional
        Precomputed pilot values at the data points; purely a cache, the fit
        is identical either way.
    max_sites : int
        Cap on the number of sigma sites where the simplex constraints are
        enforced (min(m, max_sites) mid-quantiles of the sigma sample).

    Returns
    -------
    (PriorModel, QpReport)
    """
    x, sigma = as_arrays(data)
    if x.size == 0:
        raise ValueError("fit_prior needs data")
    if grid is None:
        grid = default_grid((x, sigma))
    if basis is None:
        basis = BasisConfig()
    S, K = grid.size, basis.K
    n = S * K

    y = pilot_values if pilot_values is not None else pilot_density_batch(pilot, (x, sigma))
    y = np.asarray(y, dtype=float)
    if y.shape != x.shape:
        raise ValueError("pilot_values must have one value per unit")

    # design matrix: column (j, k) holds phi_sigma_i(x_i - u_j) * q_k(sigma_i)
    conv = _convolution_matrix(x, sigma, grid)
    qb = basis.matrix(sigma)
    A = (conv[:, :, None] * qb[:, None, :]).reshape(x.size, n)

    col_scale = np.sqrt((A * A).sum(axis=0))
    col_scale[col_scale == 0] = 1.0
    As = A / col_scale

    P = 2.0 * (As.T @ As)
    qvec = -2.0 * (As.T @ y)

    sites = constraint_sites(sigma, max_sites)
    site_basis = basis.matrix(sites)  # L x K

    # nonnegativity: -g_j(sigma_l) <= 0, one sparse row per (site, grid point)
    L = sites.size
    rows = np.repeat(np.arange(L * S), K)
    cols = np.tile(np.arange(n), L)
    vals = -(
        np.broadcast_to(site_basis[:, None, :], (L, S, K)) / col_scale.reshape(1, S, K)
    ).reshape(-1)
    h = np.zeros(L * S)

    # sum-to-one at an independent subset of sites
    keep = _independent_equality_rows(site_basis)
    A_eq = np.repeat(site_basis[keep], S, axis=0).reshape(keep.size, S * K) / col_scale
    b_eq = np.ones(keep.size)

    try:
        v, converged, iters = _solve_qp(P, qvec, rows, cols, vals, h, A_eq, b_eq, n, max_iter)
        status = "optimal" if converged else "max_iter"
    except (ValueError, ArithmeticError):
        # singular KKT system; retry with a small ridge on the quadratic term
        ridge = 1e-10 * float(np.trace(P)) / n
        P_r = P + ridge * np.eye(n)
        v, converged, iters = _solve_qp(P_r, qvec, rows, cols, vals, h, A_eq, b_eq, n, max_iter)
        status = "degenerate"

    w = (v / col_scale).reshape(S, K)

    model = PriorModel(grid, basis, w, sites)
    site_masses = site_basis @ w.T  # L x S
    eq_gap = np.abs(site_masses.sum(axis=1) - 1.0).max()
    neg_gap = max(0.0, -site_masses.min())
    infeas = max(eq_gap, neg_gap)
    if status == "optimal" and infeas > FEASIBILITY_TOL:
        status = "max_iter"
    resid = A @ w.reshape(-1) - y
    report = QpReport(float(resid @ resid), iters, float(infeas), status)
    return model, report


def fit_prior_sigma_independent(
    data,
    pilot: PilotEstimate,
    grid: Optional[GridSupport] = None,
    max_iter: int = 200,
    pilot_values: Optional[np.ndarray] = None,
):
    """The sigma-independent special case: K = 1, a single weight column.

    All sigma sites induce the same constraint row when q(sigma) = (1), so a
    single site is enforced.
    """
    return fit_prior(
        data,
        pilot,
        grid=grid,
        basis=BasisConfig(K=1),
        max_iter=max_iter,
        pilot_values=pilot_values,
        max_sites=1,
    )


def prior_mass(model: PriorModel, sigma):
    """Grid masses g(sigma) as an exact simplex vector.

    Evaluates w_j' q(sigma), clips negatives, renormalizes. Scalar sigma gives
    shape (S,), an array of n sigmas gives (n, S). If everything clips to
    zero the mass falls back to uniform with a warning.
    """
    qb = model.basis.matrix(sigma)  # (n, K)
    g = qb @ model.weights.T  # (n, S)
    np.clip(g, 0.0, None, out=g)
    totals = g.sum(axis=1, keepdims=True)
    dead = totals[:, 0] <= 0.0
    if np.any(dead):
        warnings.warn("prior mass clipped to zero everywhere; using uniform fallback")
        g[dead] = 1.0
        totals = g.sum(axis=1, keepdims=True)
    g /= totals
    return g[0] if np.isscalar(sigma) or np.ndim(sigma) == 0 else g


def fit_npmle(data, grid: GridSupport, max_iter: int = 1000, tol: float = 1e-8):
    """Nonparametric MLE mixture weights on the grid, by EM.

    Maximizes sum_i log sum_j pi_j phi_sigma_i(x_i - u_j) over the simplex.
    The log-likelihood is nondecreasing across iterations; stops when the
    increase drops below tol or after max_iter iterations.
    """
    x, sigma = as_arrays(data)
    if x.size == 0:
        raise ValueError("fit_npmle needs data")
    F = _convolution_matrix(x, sigma, grid)
    S = grid.size
    pi = np.full(S, 1.0 / S)
    last = -np.inf
    for _ in range(max_iter):
        mix = F @ pi
        np.maximum(mix, 1e-300, out=mix)
        ll = float(np.log(mix).sum())
        resp = (F * pi[None, :]) / mix[:, None]
        pi = resp.mean(axis=0)
        pi /= pi.sum()
        if ll - last < tol:
            break
        last = ll
    return pi


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def model_to_dict(model: PriorModel, report: Optional[QpReport] = None) -> dict:
    d = {
        "grid": [float(u) for u in model.grid.points],
        "basis": {"kind": model.basis.kind, "K": model.basis.K},
        "weights": [[float(v) for v in row] for row in model.weights],
        "sigma_ref": [float(s) for s in model.sigma_ref],
    }
    if report is not None:
        d["report"] = {
            "objective": report.objective,
            "iterations": report.iterations,
            "primal_infeasibility": report.primal_infeasibility,
            "status": report.status,
        }
    return d


def model_from_dict(d: dict):
    model = PriorModel(
        GridSupport(np.asarray(d["grid"], dtype=float)),
        BasisConfig(K=int(d["basis"]["K"]), kind=d["basis"]["kind"]),
        np.asarray(d["weights"], dtype=float),
        np.asarray(d.get("sigma_ref", []), dtype=float),
    )
    rep = d.get("report")
    report = (
        QpReport(
            rep["objective"], rep["iterations"], rep["primal_infeasibility"], rep["status"]
        )
        if rep
        else None
    )
    return model, report


def save_model(path, model: PriorModel, report: Optional[QpReport] = None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, report), fh, indent=1)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
