"""Conditional local false discovery rate (Clfdr) statistics.

Three flavors of the posterior null probability P(mu in A | data) live here:

* data-driven statistics computed from a fitted ``PriorModel``,
* oracle statistics computed from a ``KnownPrior`` (a finite mixture of
  point masses and Gaussians whose parameters may vary with sigma),
* z-value oracle statistics that condition on z = x / sigma only and
  marginalize sigma out against its known distribution.

All statistics land in [0, 1] by construction. Marginal densities are
floored at 1e-300 before any division; a unit whose full marginal underflows
even then is assigned the maximal null probability 1.0, so unsupported
observations are never rejected.
"""

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Union

import numpy as np

from .core import IndifferenceRegion, gauss_cdf, gauss_pdf
from .deconv import PriorModel, prior_mass

DENSITY_FLOOR = 1e-300


class MarginalDensities(NamedTuple):
    f0: float  # null-restricted component of the marginal density
    f: float  # full marginal density


# ---------------------------------------------------------------------------
# known priors for oracle statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PointMass:
    """A point mass at ``loc``, a constant or a vectorized function of sigma.

    ``knots`` lists sigma values where the location law has jumps or kinks;
    quadrature over sigma splits its panels there.
    """

    loc: Union[float, Callable]
    knots: tuple = ()


@dataclass(frozen=True)
class GaussianComponent:
    """A Gaussian prior component; mean and sd may be functions of sigma."""

    mean: Union[float, Callable]
    sd: Union[float, Callable]
    knots: tuple = ()


@dataclass(frozen=True)
class KnownPrior:
    """Mixture prior g_mu(. | sigma) = sum_c w_c * component_c(. | sigma)."""

    components: tuple  # ((weight, PointMass | GaussianComponent), ...)

    def __post_init__(self):
        if len(self.components) == 0:
            raise ValueError("KnownPrior needs at least one component")
        w = np.array([float(wc) for wc, _ in self.components])
        if np.any(w < 0):
            raise ValueError("component weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("component weights must sum to 1 within 1e-12")

    @property
    def knots(self):
        out = set()
        for _, comp in self.components:
            out.update(float(k) for k in comp.knots)
        return tuple(sorted(out))


def _param(value, sigma):
    """Evaluate a constant-or-callable component parameter at sigma."""
    if callable(value):
        return np.asarray(value(sigma), dtype=float)
    return np.broadcast_to(np.asarray(value, dtype=float), np.shape(sigma))


def _region_prob_gaussian(region: IndifferenceRegion, mean, sd):
    """P(N(mean, sd^2) in region), vectorized over mean/sd arrays."""
    hi = gauss_cdf((region.hi - mean) / sd) if np.isfinite(region.hi) else 1.0
    lo = gauss_cdf((region.lo - mean) / sd) if np.isfinite(region.lo) else 0.0
    return hi - lo


def _oracle_parts(prior: KnownPrior, x, sigma, region: IndifferenceRegion):
    """Null-restricted and full marginal densities f0(x|sigma), f(x|sigma).

    Point masses contribute w * phi_sigma(x - loc), counted in f0 when
    loc lies in the region. A Gaussian component N(a, tau^2) has marginal
    N(a, sigma^2 + tau^2) and posterior

        mu | x, sigma ~ N((tau^2 x + sigma^2 a) / (sigma^2 + tau^2),
                          sigma^2 tau^2 / (sigma^2 + tau^2)),

    so its null share is a Phi difference. Inputs broadcast elementwise.
    """
    x = np.asarray(x, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    f0 = np.zeros(np.broadcast(x, sigma).shape)
    f = np.zeros_like(f0)
    for weight, comp in prior.components:
        if isinstance(comp, PointMass):
            loc = _param(comp.loc, sigma)
            dens = weight * gauss_pdf(x, loc, sigma)
            f = f + dens
            f0 = f0 + dens * region.contains(loc)
        elif isinstance(comp, GaussianComponent):
            a = _param(comp.mean, sigma)
            tau = _param(comp.sd, sigma)
            var = sigma * sigma + tau * tau
            dens = weight * gauss_pdf(x, a, np.sqrt(var))
            post_mean = (tau * tau * x + sigma * sigma * a) / var
            post_sd = sigma * tau / np.sqrt(var)
            f = f + dens
            f0 = f0 + dens * _region_prob_gaussian(region, post_mean, post_sd)
        else:
            raise TypeError(f"unknown prior component: {type(comp).__name__}")
    return f0, f


def _ratio(f0, f):
    """f0/f with the underflow guard; scalar or array in [0, 1]."""
    f0 = np.asarray(f0, dtype=float)
    f = np.asarray(f, dtype=float)
    bad = f <= DENSITY_FLOOR
    t = f0 / np.maximum(f, DENSITY_FLOOR)
    if np.any(bad):
        warnings.warn("marginal density underflow; assigning null probability 1")
        t = np.where(bad, 1.0, t)
    return np.clip(t, 0.0, 1.0)


def _as_unit(obs):
    x, sigma = obs
    return float(x), float(sigma)


# ---------------------------------------------------------------------------
# oracle statistics
# ---------------------------------------------------------------------------


def clfdr_oracle(prior: KnownPrior, obs, region: IndifferenceRegion) -> float:
    """Oracle Clfdr T(x, sigma) = P(mu in region | x, sigma)."""
    x, sigma = _as_unit(obs)
    f0, f = _oracle_parts(prior, x, sigma, region)
    return float(_ratio(f0, f))


def clfdr_oracle_batch(prior: KnownPrior, x, sigma, region: IndifferenceRegion):
    """Vectorized oracle Clfdr over arrays of units."""
    f0, f = _oracle_parts(prior, x, sigma, region)
    return _ratio(f0, f)


# ---------------------------------------------------------------------------
# data-driven statistics
# ---------------------------------------------------------------------------


def marginal_hat(model: PriorModel, x, sigma, region: IndifferenceRegion) -> MarginalDensities:
    """Fitted marginal densities (f0_hat, f_hat) at one point.

    f_hat(x|sigma) = sum_j phi_sigma(x - u_j) g_j(sigma) with g from
    prior_mass (exact simplex), and f0_hat restricts the sum to grid points
    inside the region.
    """
    u = np.asarray(model.grid.points)
    g = prior_mass(model, float(sigma))
    phi = gauss_pdf(float(x), u, float(sigma))
    f = float((phi * g).sum())
    f0 = float((phi * g * region.contains(u)).sum())
    return MarginalDensities(f0, f)


def clfdr_hat(model: PriorModel, obs, region: IndifferenceRegion) -> float:
    """Data-driven Clfdr statistic f0_hat / f_hat, clamped to [0, 1]."""
    x, sigma = _as_unit(obs)
    f0, f = marginal_hat(model, x, sigma, region)
    return float(_ratio(f0, f))


def clfdr_hat_batch(model: PriorModel, x, sigma, region: IndifferenceRegion):
    """Vectorized data-driven Clfdr over arrays of units."""
    x = np.asarray(x, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    u = np.asarray(model.grid.points)
    g = prior_mass(model, sigma)  # (m, S)
    phi = gauss_pdf(x[:, None], u[None, :], sigma[:, None])
    weighted = phi * g
    f = weighted.sum(axis=1)
    f0 = (weighted * region.contains(u)[None, :]).sum(axis=1)
    return _ratio(f0, f)


# ---------------------------------------------------------------------------
# z-value oracle statistics
# ---------------------------------------------------------------------------


def _z_integrand(prior, sigma_law, z, s, region):
    """Integrand pair over sigma nodes s for each z: density of (z, s) split
    into its null-restricted and full parts.

    The conditional density of Z = X/sigma given sigma = s is
    s * f_X(z s | s), hence the Jacobian factor.
    """
    x = z[:, None] * s[None, :]
    sig = np.broadcast_to(s[None, :], x.shape)
    f0, f = _oracle_parts(prior, x, sig, region)
    scale = (s * sigma_law.density(s))[None, :]
    return f0 * scale, f * scale


def _simpson(values, h):
    """Composite Simpson rule over the last axis (odd node count)."""
    return (
        h
        / 3.0
        * (
            values[..., 0]
            + values[..., -1]
            + 4.0 * values[..., 1:-1:2].sum(axis=-1)
            + 2.0 * values[..., 2:-2:2].sum(axis=-1)
        )
    )


def _refine_panel(prior, sigma_law, z, region, lo, hi, rel_tol, max_doublings):
    """Adaptive composite Simpson on [lo, hi], doubling nodes until both the
    null and full integrals stabilize to rel_tol; reuses previous nodes.

    Panels are split at declared discontinuities, so the endpoints are
    evaluated a hair inside the panel: the integrand there must be the
    one-sided limit, not whichever branch the piecewise law assigns to the
    boundary point itself.
    """
    n = 8
    s = np.linspace(lo, hi, n + 1)
    eps = (hi - lo) * 1e-12
    s_eval = s.copy()
    s_eval[0] += eps
    s_eval[-1] -= eps
    v0, v1 = _z_integrand(prior, sigma_law, z, s_eval, region)
    h = (hi - lo) / n
    i0, i1 = _simpson(v0, h), _simpson(v1, h)
    for _ in range(max_doublings):
        mids = 0.5 * (s[:-1] + s[1:])
        m0, m1 = _z_integrand(prior, sigma_law, z, mids, region)
        n *= 2
        s_new = np.empty(n + 1)
        s_new[0::2] = s
        s_new[1::2] = mids
        w0 = np.empty(v0.shape[:-1] + (n + 1,))
        w1 = np.empty_like(w0)
        w0[..., 0::2], w0[..., 1::2] = v0, m0
        w1[..., 0::2], w1[..., 1::2] = v1, m1
        s, v0, v1 = s_new, w0, w1
        h = (hi - lo) / n
        j0, j1 = _simpson(v0, h), _simpson(v1, h)
        gap0 = np.max(np.abs(j0 - i0) / np.maximum(np.abs(j0), DENSITY_FLOOR))
        gap1 = np.max(np.abs(j1 - i1) / np.maximum(np.abs(j1), DENSITY_FLOOR))
        i0, i1 = j0, j1
        if max(gap0, gap1) < rel_tol:
            return i0, i1
    raise RuntimeError(
        f"sigma quadrature on [{lo}, {hi}] did not stabilize to {rel_tol} "
        f"after {max_doublings} refinements ({n} panels); last changes "
        f"({gap0:.3e}, {gap1:.3e})"
    )


def z_oracle_stat_batch(
    prior: KnownPrior,
    sigma_law,
    z,
    region: IndifferenceRegion,
    rel_tol: float = 1e-8,
    max_doublings: int = 16,
):
    """Z-value oracle statistic P(mu in region | z) for an array of z.

    Marginalizes sigma out of the joint law of (Z, sigma): discrete atoms
    are summed exactly; continuous panels are integrated by adaptive
    Simpson, with panel splits at every declared knot of the prior's
    component laws.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    num = np.zeros_like(z)
    den = np.zeros_like(z)
    for s_val, p in sigma_law.atoms():
        f0, f = _oracle_parts(prior, z * s_val, np.full_like(z, s_val), region)
        num = num + p * f0 * s_val
        den = den + p * f * s_val
    knots = prior.knots
    for a, b in sigma_law.panels():
        cuts = [a] + [k for k in knots if a < k < b] + [b]
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            i0, i1 = _refine_panel(
                prior, sigma_law, z, region, lo, hi, rel_tol, max_doublings
            )
            num = num + i0
            den = den + i1
    return _ratio(num, den)


def z_oracle_stat(
    prior: KnownPrior,
    sigma_law,
    z: float,
    region: IndifferenceRegion,
    rel_tol: float = 1e-8,
    max_doublings: int = 16,
) -> float:
    """Scalar z-value oracle statistic; see z_oracle_stat_batch."""
    out = z_oracle_stat_batch(
        prior, sigma_law, np.array([float(z)]), region, rel_tol, max_doublings
    )
    return float(out[0])
