"""Thresholding procedures and error metrics.

Three families of decision rules live here:

* the data-driven step-up rule: sort the Clfdr statistics, reject the
  longest prefix whose running mean stays at or below alpha,
* oracle threshold rules 1{T(x, sigma) < t*}, with t* calibrated so the
  marginal FDR of the rule equals the target level, computed by numerical
  integration over the known data-generating law,
* the p-value step-up baseline (plain and two-stage adaptive) together
  with the least-favorable composite p-value it consumes.

compute_metrics turns realized decisions plus ground truth into the false
discovery proportion and the proportion of true positives.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import brentq
from scipy.stats import multivariate_normal

from .clfdr import (
    GaussianComponent,
    KnownPrior,
    PointMass,
    clfdr_oracle,
    clfdr_oracle_batch,
)
from .core import DecisionSet, IndifferenceRegion, TruthRecord, gauss_cdf, gauss_sf


@dataclass(frozen=True)
class StepUpResult:
    """Outcome of the step-up rule: decisions plus the sorted-prefix audit trail."""

    decisions: DecisionSet
    r: int
    realized_threshold: float
    running_means: np.ndarray  # (1/j) sum of the j smallest statistics, j = 1..m


class MetricsRecord(NamedTuple):
    fdp: float
    ptp: float
    rejections: int


class OracleThreshold(NamedTuple):
    t_star: float
    q_value: float  # marginal FDR at t_star (nan when nothing is ever rejected)
    regime: str  # "interior" | "reject_all" | "reject_none"


class ZOracleThreshold(NamedTuple):
    t_z: float
    power: float


@dataclass(frozen=True)
class QuadratureOptions:
    """Knobs for the oracle threshold integrations.

    The rejection region in x is located by a sign scan over scan_points
    covering every component center plus scan_pad spreads on both sides;
    beyond that window the statistic is treated as settled. Sigma panels are
    integrated with Gauss-Legendre rules of panel_order nodes after splitting
    at declared knots and at detected null-indicator crossings. The threshold
    search bisects on [t_lo, t_hi] down to t_tol after a coarse_grid scan
    that also checks the curve is nondecreasing up to monotone_slack.
    """

    scan_points: int = 2001
    scan_pad: float = 12.0
    panel_order: int = 24
    t_lo: float = 1e-6
    t_hi: float = 1.0 - 1e-6
    t_tol: float = 1e-6
    max_bisect: int = 200
    coarse_grid: int = 17
    monotone_slack: float = 1e-3


# ---------------------------------------------------------------------------
# step-up rules
# ---------------------------------------------------------------------------


def step_up(clfdr_values, alpha: float) -> StepUpResult:
    """Reject the r units with the smallest statistics, where r is the largest
    j whose running mean (1/j) sum of the j smallest values is <= alpha.

    Ties are broken by original index, ascending, so the decision set is
    deterministic. With no qualifying prefix nothing is rejected and the
    threshold is recorded as 0.
    """
    t = np.asarray(clfdr_values, dtype=float)
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if t.size == 0:
        empty = DecisionSet(np.zeros(0, dtype=bool), 0.0, 0)
        return StepUpResult(empty, 0, 0.0, np.zeros(0))
    if not np.all(np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("statistics must lie in [0, 1]")
    m = t.size
    order = np.lexsort((np.arange(m), t))
    sorted_t = t[order]
    running = np.cumsum(sorted_t) / np.arange(1, m + 1)
    ok = np.nonzero(running <= alpha)[0]
    r = int(ok[-1] + 1) if ok.size else 0
    decisions = np.zeros(m, dtype=bool)
    threshold = 0.0
    if r > 0:
        decisions[order[:r]] = True
        threshold = float(sorted_t[r - 1])
    return StepUpResult(DecisionSet(decisions, threshold, r), r, threshold, running)


def _bh_pass(p: np.ndarray, level: float):
    m = p.size
    order = np.lexsort((np.arange(m), p))
    ps = p[order]
    ok = np.nonzero(ps <= level * np.arange(1, m + 1) / m)[0]
    r = int(ok[-1] + 1) if ok.size else 0
    return order, ps, r


def bh_step_up(pvalues, alpha: float, adaptive: bool = False) -> DecisionSet:
    """P-value step-up at level alpha; the adaptive variant runs a first pass
    at alpha / (1 + alpha), estimates the null count as m minus its
    rejections, and reruns at level alpha * m / max(null count, 1)."""
    p = np.asarray(pvalues, dtype=float)
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if p.size == 0:
        return DecisionSet(np.zeros(0, dtype=bool), 0.0, 0)
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("p-values must lie in [0, 1]")
    level = alpha
    if adaptive:
        _, _, r1 = _bh_pass(p, alpha / (1.0 + alpha))
        m0 = p.size - r1
        level = alpha * p.size / max(m0, 1)
    order, ps, r = _bh_pass(p, level)
    decisions = np.zeros(p.size, dtype=bool)
    threshold = 0.0
    if r > 0:
        decisions[order[:r]] = True
        threshold = float(ps[r - 1])
    return DecisionSet(decisions, threshold, r)


def composite_pvalue(obs, region: IndifferenceRegion) -> float:
    """Least-favorable one-sided p-value sup_{mu <= mu0} P(X > x), which the
    Gaussian location family attains at the boundary: 1 - Phi((x - mu0) / sigma).

    Only left-ray regions are supported; interval nulls have no one-sided
    least-favorable p-value of this form.
    """
    if region.kind != "left_ray":
        raise NotImplementedError("composite p-values are only defined for left-ray regions")
    x, sigma = float(obs[0]), float(obs[1])
    return float(gauss_sf((x - region.mu0) / sigma))


def composite_pvalue_batch(x, sigma, region: IndifferenceRegion):
    """Vectorized composite_pvalue."""
    if region.kind != "left_ray":
        raise NotImplementedError("composite p-values are only defined for left-ray regions")
    x = np.asarray(x, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return gauss_sf((x - region.mu0) / sigma)


def _nonnull_flags(truth) -> np.ndarray:
    if isinstance(truth, np.ndarray) and truth.dtype != object:
        return truth.astype(bool)
    return np.array(
        [bool(t.is_nonnull) if isinstance(t, TruthRecord) else bool(t) for t in truth]
    )


def compute_metrics(decisions: DecisionSet, truth) -> MetricsRecord:
    """False discovery proportion and true positive proportion of a decision
    set, with max(., 1) guards on both denominators."""
    flags = _nonnull_flags(truth)
    d = np.asarray(decisions.decisions, dtype=bool)
    if flags.shape != d.shape:
        raise ValueError("decisions and truth have different lengths")
    r = int(d.sum())
    false = int(np.count_nonzero(d & ~flags))
    hits = int(np.count_nonzero(d & flags))
    fdp = false / max(r, 1)
    ptp = hits / max(int(flags.sum()), 1)
    return MetricsRecord(float(fdp), float(ptp), r)


# ---------------------------------------------------------------------------
# oracle threshold machinery
# ---------------------------------------------------------------------------


def _component_param(value, s: float) -> float:
    if callable(value):
        return float(np.asarray(value(np.asarray(s, dtype=float)), dtype=float))
    return float(value)


def _param_vec(value, s: np.ndarray) -> np.ndarray:
    if callable(value):
        return np.asarray(value(s), dtype=float)
    return np.broadcast_to(np.asarray(value, dtype=float), s.shape)


def _gauss_mass(a: float, b: float, mean: float, sd: float) -> float:
    """P(N(mean, sd^2) in [a, b]) with infinite endpoints allowed."""
    hi = gauss_cdf((b - mean) / sd) if math.isfinite(b) else 1.0
    lo = gauss_cdf((a - mean) / sd) if math.isfinite(a) else 0.0
    return hi - lo


def _bvn_rectangle(x_a, x_b, mu_lo, mu_hi, mean, s, tau) -> float:
    """P(X in [x_a, x_b], mu in [mu_lo, mu_hi]) when mu ~ N(mean, tau^2) and
    X = mu + s * noise; (X, mu) are jointly normal with correlation
    tau / sqrt(s^2 + tau^2). Infinite endpoints are allowed."""
    sd_x = math.hypot(s, tau)
    rho = tau / sd_x
    upper = np.array(
        [
            (x_b - mean) / sd_x if math.isfinite(x_b) else np.inf,
            (mu_hi - mean) / tau if math.isfinite(mu_hi) else np.inf,
        ]
    )
    lower = np.array(
        [
            (x_a - mean) / sd_x if math.isfinite(x_a) else -np.inf,
            (mu_lo - mean) / tau if math.isfinite(mu_lo) else -np.inf,
        ]
    )
    dist = multivariate_normal(mean=[0.0, 0.0], cov=[[1.0, rho], [rho, 1.0]])
    val = float(dist.cdf(upper, lower_limit=lower))
    return min(max(val, 0.0), 1.0)


def _rejection_cells(prior: KnownPrior, s: float, t: float, region, opts):
    """Closed x-intervals where the oracle statistic at this sigma is below t.

    A sign scan over a window spanning scan_pad spreads beyond every
    component center brackets the level crossings, each refined by root
    finding; window-edge cells are extended to infinity since the statistic
    is settled out there.
    """
    centers, spreads = [], [s]
    for _, comp in prior.components:
        if isinstance(comp, PointMass):
            centers.append(_component_param(comp.loc, s))
        elif isinstance(comp, GaussianComponent):
            centers.append(_component_param(comp.mean, s))
            spreads.append(math.hypot(s, _component_param(comp.sd, s)))
        else:
            raise TypeError(f"unknown prior component: {type(comp).__name__}")
    lo = min(centers) - opts.scan_pad * max(spreads)
    hi = max(centers) + opts.scan_pad * max(spreads)
    xs = np.linspace(lo, hi, opts.scan_points)
    vals = clfdr_oracle_batch(prior, xs, np.full(xs.shape, s), region) - t

    def level(x):
        return clfdr_oracle(prior, (x, s), region) - t

    crossings = []
    sign = np.sign(vals)
    for i in np.nonzero(sign[:-1] * sign[1:] < 0)[0]:
        crossings.append(brentq(level, xs[i], xs[i + 1], xtol=1e-12))
    crossings.extend(float(v) for v in xs[vals == 0.0])
    bounds = [lo] + sorted(crossings) + [hi]
    cells = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b <= a:
            continue
        if level(0.5 * (a + b)) < 0.0:
            cells.append([a, b])
    if not cells:
        return []
    merged = [cells[0]]
    for a, b in cells[1:]:
        if a <= merged[-1][1] + 1e-12:
            merged[-1][1] = b
        else:
            merged.append([a, b])
    if merged[0][0] == lo:
        merged[0][0] = -math.inf
    if merged[-1][1] == hi:
        merged[-1][1] = math.inf
    return [(a, b) for a, b in merged]


def _cell_masses(prior: KnownPrior, s: float, cells, region):
    """(null mass, total mass) that the rejection cells carry at one sigma:
    total is P(X in cells | sigma), null adds the joint event mu in region."""
    num = 0.0
    den = 0.0
    for w, comp in prior.components:
        if isinstance(comp, PointMass):
            loc = _component_param(comp.loc, s)
            mass = sum(_gauss_mass(a, b, loc, s) for a, b in cells)
            den += w * mass
            if region.contains(loc):
                num += w * mass
        else:
            mean = _component_param(comp.mean, s)
            tau = _component_param(comp.sd, s)
            sd_x = math.hypot(s, tau)
            den += w * sum(_gauss_mass(a, b, mean, sd_x) for a, b in cells)
            num += w * sum(
                _bvn_rectangle(a, b, region.lo, region.hi, mean, s, tau)
                for a, b in cells
            )
    return num, den


def _indicator_cuts(prior: KnownPrior, a: float, b: float, region) -> set:
    """Sigma values in (a, b) where a point-mass location law crosses the
    region boundary, located by scan plus bisection."""
    cuts = set()
    grid = np.linspace(a, b, 257)
    for _, comp in prior.components:
        if not isinstance(comp, PointMass):
            continue
        inside = np.asarray(region.contains(_param_vec(comp.loc, grid)))
        for i in np.nonzero(inside[:-1] != inside[1:])[0]:
            lo, hi = float(grid[i]), float(grid[i + 1])
            ref = bool(inside[i])
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if bool(region.contains(_component_param(comp.loc, mid))) == ref:
                    lo = mid
                else:
                    hi = mid
            cuts.add(0.5 * (lo + hi))
    return cuts


def _sigma_nodes(prior: KnownPrior, sigma_law, region, opts):
    """Quadrature nodes (sigma, weight) for integrating against the sigma law:
    atoms carry their probabilities; each continuous panel is split at the
    prior's declared knots and detected indicator crossings, then covered by
    a Gauss-Legendre rule weighted by the sigma density."""
    nodes = [(float(s), float(p)) for s, p in sigma_law.atoms()]
    gx, gw = leggauss(opts.panel_order)
    knots = set(prior.knots)
    for a, b in sigma_law.panels():
        cuts = {float(a), float(b)}
        cuts.update(k for k in knots if a < k < b)
        cuts.update(c for c in _indicator_cuts(prior, a, b, region) if a < c < b)
        pts = sorted(cuts)
        for lo, hi in zip(pts[:-1], pts[1:]):
            s = 0.5 * (hi + lo) + 0.5 * (hi - lo) * gx
            w = 0.5 * (hi - lo) * gw * sigma_law.density(s)
            nodes.extend(zip(s.tolist(), w.tolist()))
    return nodes


def _mfdr_parts(prior, nodes, region, t, opts):
    num = 0.0
    den = 0.0
    for s, wt in nodes:
        cells = _rejection_cells(prior, s, t, region, opts)
        if not cells:
            continue
        n_c, d_c = _cell_masses(prior, s, cells, region)
        num += wt * n_c
        den += wt * d_c
    return num, den


def oracle_mfdr(
    prior: KnownPrior,
    sigma_law,
    region: IndifferenceRegion,
    t: float,
    opts: Optional[QuadratureOptions] = None,
) -> float:
    """Marginal FDR of the rule 1{T(x, sigma) < t}: expected null rejections
    over expected rejections; nan when the rule never rejects."""
    opts = opts or QuadratureOptions()
    nodes = _sigma_nodes(prior, sigma_law, region, opts)
    num, den = _mfdr_parts(prior, nodes, region, t, opts)
    return num / den if den > 0.0 else math.nan


def oracle_threshold(
    prior: KnownPrior,
    sigma_law,
    region: IndifferenceRegion,
    alpha: float,
    opts: Optional[QuadratureOptions] = None,
) -> OracleThreshold:
    """Largest t with marginal FDR at most alpha for the rule 1{T < t}.

    Returns regime "reject_all" (t at the upper search bound) when even the
    widest threshold stays within level, "reject_none" (t = 0) when no unit
    is ever rejected or no threshold is feasible, and "interior" otherwise
    with the mFDR at the returned threshold inside [alpha - 1e-4, alpha].
    A marginal FDR curve that decreases beyond monotone_slack is an error.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    opts = opts or QuadratureOptions()
    nodes = _sigma_nodes(prior, sigma_law, region, opts)

    def parts(t):
        return _mfdr_parts(prior, nodes, region, t, opts)

    num_hi, den_hi = parts(opts.t_hi)
    if den_hi == 0.0:
        return OracleThreshold(0.0, math.nan, "reject_none")
    ts = np.linspace(opts.t_lo, opts.t_hi, opts.coarse_grid)
    qs = []
    for t in ts[:-1]:
        n, d = parts(float(t))
        qs.append(0.0 if d == 0.0 else n / d)
    qs.append(num_hi / den_hi)
    for i in range(len(qs) - 1):
        if qs[i] > qs[i + 1] + opts.monotone_slack:
            raise RuntimeError(
                f"marginal FDR decreases from {qs[i]:.6f} at t={ts[i]:.4f} to "
                f"{qs[i + 1]:.6f} at t={ts[i + 1]:.4f}; the threshold search "
                "requires a nondecreasing curve"
            )
    if qs[-1] <= alpha:
        return OracleThreshold(float(ts[-1]), float(qs[-1]), "reject_all")
    if qs[0] > alpha:
        return OracleThreshold(0.0, float(qs[0]), "reject_none")
    i = max(j for j in range(len(qs)) if qs[j] <= alpha)
    lo, hi = float(ts[i]), float(ts[i + 1])
    q_lo = float(qs[i])
    for _ in range(opts.max_bisect):
        if hi - lo <= opts.t_tol:
            break
        mid = 0.5 * (lo + hi)
        n, d = parts(mid)
        q_mid = 0.0 if d == 0.0 else n / d
        if q_mid <= alpha:
            lo, q_lo = mid, q_mid
        else:
            hi = mid
    return OracleThreshold(lo, q_lo, "interior")


def oracle_power(
    prior: KnownPrior,
    sigma_law,
    region: IndifferenceRegion,
    t: float,
    opts: Optional[QuadratureOptions] = None,
) -> float:
    """Expected fraction of non-null units rejected by the rule 1{T < t}:
    P(reject and mu outside region) / P(mu outside region), both integrated
    on the same quadrature nodes; 0 when the prior has no alternative mass."""
    opts = opts or QuadratureOptions()
    nodes = _sigma_nodes(prior, sigma_law, region, opts)
    alt_rejected = 0.0
    alt_total = 0.0
    for s, wt in nodes:
        share = 0.0
        for w, comp in prior.components:
            if isinstance(comp, PointMass):
                loc = _component_param(comp.loc, s)
                share += w * (0.0 if region.contains(loc) else 1.0)
            else:
                mean = _component_param(comp.mean, s)
                tau = _component_param(comp.sd, s)
                share += w * (1.0 - _gauss_mass(region.lo, region.hi, mean, tau))
        alt_total += wt * share
        cells = _rejection_cells(prior, s, t, region, opts)
        if cells:
            n_c, d_c = _cell_masses(prior, s, cells, region)
            alt_rejected += wt * (d_c - n_c)
    if alt_total <= 0.0:
        return 0.0
    return alt_rejected / alt_total


# ---------------------------------------------------------------------------
# z-value oracle threshold
# ---------------------------------------------------------------------------


def _z_classify(prior: KnownPrior, region, s: float):
    """(null weight, alternative z-shift or None) at one sigma.

    The z-threshold calibration assumes every null-located component sits at
    0 (so z is standard normal for null units) and at most one component is
    in the alternative at any sigma; anything else is an error.
    """
    null_w = 0.0
    shifts = []
    for w, comp in prior.components:
        if not isinstance(comp, PointMass):
            raise TypeError("z-value calibration handles point-mass priors only")
        loc = _component_param(comp.loc, s)
        if region.contains(loc):
            if abs(loc) > 1e-9:
                raise ValueError("z-value calibration needs null components at 0")
            null_w += w
        else:
            shifts.append(loc / s)
    if len(shifts) > 1:
        raise ValueError("z-value calibration needs a single alternative component")
    return null_w, (shifts[0] if shifts else None)


def z_oracle_threshold(
    prior: KnownPrior,
    sigma_law,
    region: IndifferenceRegion,
    alpha: float,
    opts: Optional[QuadratureOptions] = None,
) -> ZOracleThreshold:
    """Threshold t_z and power of the z-value rule 1{x / sigma > t_z}.

    The calibrated false-discovery ratio is

        p_null Phi(-t) / (p_null Phi(-t) + p_alt J(t)),

    where p_null and p_alt are the marginal null and alternative
    probabilities and J(t) integrates the alternative tail
    Phi(shift(sigma) - t), shift = loc / sigma, against the sigma density
    over the range carrying alternative mass. The reported power is J(t_z).
    """
    if region.kind != "left_ray":
        raise NotImplementedError("z-value calibration is only defined for left-ray regions")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    opts = opts or QuadratureOptions()
    nodes = _sigma_nodes(prior, sigma_law, region, opts)
    classified = [(s, wt, *_z_classify(prior, region, s)) for s, wt in nodes]
    p_null = sum(wt * nw for _, wt, nw, _ in classified)
    p_alt = 1.0 - p_null

    def alt_tail(t):
        return sum(
            wt * gauss_sf(t - shift)
            for _, wt, _, shift in classified
            if shift is not None
        )

    def gap(t):
        return (1.0 - alpha) * p_null * gauss_sf(t) - alpha * p_alt * alt_tail(t)

    lo, hi = -10.0, 8.0
    while gap(hi) > 0.0 and hi < 64.0:
        hi *= 2.0
    if gap(lo) <= 0.0 or gap(hi) > 0.0:
        raise RuntimeError("z-value threshold bracketing failed")
    t_z = float(brentq(gap, lo, hi, xtol=1e-10))
    return ZOracleThreshold(t_z, float(alt_tail(t_z)))
