"""Monte Carlo study harness: scenario definitions, data generation, and
procedure comparisons.

A Scenario bundles everything a study run needs: the law of the noise scale
sigma, the conditional prior of the signal mu given sigma, the indifference
region, the level, and the problem size. `generate` draws one replicate with
a counter-based RNG keyed by scenario name and seed, `run_experiment` runs a
set of procedures over independent replicates, and the CSV writers persist
per-replicate and aggregated results.

RNG streams are reproducible by construction: the Philox key is a stable
64-bit hash of the scenario name XORed with the seed, and each replicate
consumes draws in a fixed order (sigma, mixture component, one standard
normal per unit for mu, then the observation noise).
"""

import csv
import hashlib
import os
from dataclasses import dataclass
from functools import partial
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed, parallel_backend

from .clfdr import (
    GaussianComponent,
    KnownPrior,
    PointMass,
    clfdr_hat_batch,
    clfdr_oracle_batch,
    z_oracle_stat_batch,
)
from .core import (
    DecisionSet,
    DiscreteSigma,
    IndifferenceRegion,
    MixtureUniformSigma,
    Observation,
    TruthRecord,
    UniformSigma,
    interval,
    left_ray,
    region_contains,
)
from .deconv import (
    BasisConfig,
    PriorModel,
    default_grid,
    fit_npmle,
    fit_prior,
    fit_prior_sigma_independent,
)
from .mtp import (
    bh_step_up,
    composite_pvalue_batch,
    compute_metrics,
    oracle_threshold,
    step_up,
)
from .pilot_kde import Bandwidths, fit_pilot, pilot_density_batch, silverman_bandwidths

PROCEDURES = (
    "HAMT",
    "DECONV-baseline",
    "NPMLE-baseline",
    "BH",
    "adaptive-BH",
    "OR",
    "ZOR",
)

_POOLED_H_SIGMA = 1e12  # effectively infinite sigma bandwidth: one pooled pilot


# ---------------------------------------------------------------------------
# Location laws (module-level and partial-friendly so scenarios pickle)
# ---------------------------------------------------------------------------


def _scaled_sigma(s, factor):
    return factor * np.asarray(s, dtype=float)


def _scaled_sigma_sq(s, factor):
    s = np.asarray(s, dtype=float)
    return factor * s * s


def _neg_sigma(s):
    return -np.asarray(s, dtype=float)


def _sqrt_sigma(s):
    return np.sqrt(np.asarray(s, dtype=float))


def _sigma_pow15(s):
    s = np.asarray(s, dtype=float)
    return np.power(s, 1.5)


def _inverse_decay(s):
    """0 below sigma = 1, then 2 / sigma."""
    s = np.asarray(s, dtype=float)
    return np.where(s <= 1.0, 0.0, 2.0 / np.maximum(s, 1e-300))


def _switch_pow15(s, cut):
    """0 up to the cut, then sigma^1.5."""
    s = np.asarray(s, dtype=float)
    return np.where(s <= cut, 0.0, np.power(s, 1.5))


# ---------------------------------------------------------------------------
# Scenario and replicate containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """A fully specified study design.

    `prior` is the conditional law of mu given sigma. `replicate_count` above
    one switches to the within-unit replication design: each unit is observed
    that many times, x is the sample mean, and sigma is the estimated standard
    error (sample sd / sqrt(n)); `sigma_law` then describes the effective
    standard error of the mean. `u` is the sweep parameter the design was
    built with (nan for fixed designs); it is carried through to aggregated
    output.
    """

    name: str
    m: int
    sigma_law: object
    prior: KnownPrior
    region: IndifferenceRegion
    alpha: float = 0.1
    replicate_count: int = 1
    u: float = float("nan")

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("Scenario needs m >= 2")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.replicate_count < 1:
            raise ValueError("replicate_count must be >= 1")
        if self.replicate_count == 2:
            raise ValueError("replicate_count 2 gives a 1-df variance estimate; use >= 3")


@dataclass(frozen=True)
class Replicate:
    """One generated data set, stored as parallel arrays."""

    x: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray
    nonnull: np.ndarray
    seed: int

    @property
    def observations(self):
        return [Observation(float(xi), float(si)) for xi, si in zip(self.x, self.sigma)]

    @property
    def truth(self):
        return [TruthRecord(float(m), bool(f)) for m, f in zip(self.mu, self.nonnull)]


@dataclass(frozen=True)
class ExperimentRow:
    """Outcome of one procedure on one replicate.

    A procedure that raised is recorded with nan metrics and the error text;
    the run itself keeps going.
    """

    procedure: str
    replicate: int
    fdp: float
    ptp: float
    rejections: int
    seed: int
    error: str = ""


@dataclass(frozen=True)
class AggregateRow:
    procedure: str
    u: float
    mean_fdp: float
    se_fdp: float
    mean_ptp: float
    se_ptp: float


# ---------------------------------------------------------------------------
# Builtin scenarios
# ---------------------------------------------------------------------------

# name -> (default u, fixed design). Fixed designs take no sweep parameter.
_DEFAULT_U = {
    "onesided-1": (1.5, False),
    "onesided-2": (2.0, False),
    "onesided-3": (2.0, False),
    "onesided-4": (2.0, False),
    "onesided-5": (1.5, False),
    "twosided-1": (2.0, False),
    "twosided-2": (2.0, False),
    "twosided-3": (2.0, False),
    "dependence-demo": (float("nan"), True),
    "example-1": (float("nan"), True),
    "example-2": (float("nan"), True),
}

BUILTIN_SCENARIOS = tuple(sorted(_DEFAULT_U))


def builtin_scenario(name: str, u: Optional[float] = None, m: int = 10_000, alpha: float = 0.1) -> Scenario:
    """One of the named study designs, at sweep value u.

    Passing u for a fixed design (dependence-demo, example-1, example-2) is
    an error; omitting it elsewhere uses the design's default.
    """
    if name not in _DEFAULT_U:
        known = ", ".join(BUILTIN_SCENARIOS)
        raise ValueError(f"unknown scenario {name!r}; known scenarios: {known}")
    default_u, fixed = _DEFAULT_U[name]
    if fixed:
        if u is not None:
            raise ValueError(f"scenario {name!r} is a fixed design and takes no u")
        u = default_u
    elif u is None:
        u = default_u
    else:
        u = float(u)

    replicate_count = 1
    if name == "onesided-1":
        sigma_law = UniformSigma(0.5, u)
        prior = KnownPrior(
            (
                (0.9, PointMass(0.0)),
                (0.1, GaussianComponent(3.0, 1.0)),
            )
        )
        region = left_ray(2.0)
    elif name == "onesided-2":
        if u <= 0:
            raise ValueError("onesided-2 needs u > 0")
        sigma_law = DiscreteSigma((0.5, 1.0, 2.0))
        prior = KnownPrior(
            (
                (0.9, PointMass(0.0)),
                (0.1, PointMass(partial(_scaled_sigma, factor=u))),
            )
        )
        region = left_ray(2.0)
    elif name == "onesided-3":
        sigma_law = MixtureUniformSigma(0.9, 0.5, 1.0, 1.0, u)
        prior = KnownPrior(((1.0, PointMass(_inverse_decay, knots=(1.0,))),))
        region = left_ray(1.0)
    elif name == "onesided-4":
        sigma_law = UniformSigma(0.5, u)
        prior = KnownPrior(
            (
                (0.9, GaussianComponent(_neg_sigma, np.sqrt(0.5))),
                (0.1, PointMass(partial(_scaled_sigma_sq, factor=2.0))),
            )
        )
        region = left_ray(1.0)
    elif name == "onesided-5":
        sigma_law = UniformSigma(0.25, u)
        prior = KnownPrior(((1.0, PointMass(partial(_scaled_sigma, factor=3.0))),))
        region = left_ray(4.0)
    elif name == "twosided-1":
        if u <= 0:
            raise ValueError("twosided-1 needs u > 0")
        sigma_law = DiscreteSigma((0.5, 1.0, 3.0))
        prior = KnownPrior(
            (
                (0.9, PointMass(0.0)),
                (0.05, PointMass(partial(_scaled_sigma, factor=u))),
                (0.05, PointMass(partial(_scaled_sigma, factor=-u))),
            )
        )
        region = interval(-5.0, 5.0)
    elif name == "twosided-2":
        sigma_law = UniformSigma(0.5, u)
        prior = KnownPrior(
            (
                (0.9, PointMass(0.0)),
                (0.05, GaussianComponent(3.0, _sqrt_sigma)),
                (0.05, GaussianComponent(-3.0, _sqrt_sigma)),
            )
        )
        region = interval(-2.0, 2.0)
    elif name == "twosided-3":
        if u <= 0:
            raise ValueError("twosided-3 needs u > 0")
        # Within-unit replication: raw scales {5, 10, 30} with n = 100
        # observations per unit give standard errors {0.5, 1, 3}.
        sigma_law = DiscreteSigma((0.5, 1.0, 3.0))
        prior = KnownPrior(
            (
                (0.9, PointMass(0.0)),
                (0.05, PointMass(partial(_scaled_sigma, factor=u))),
                (0.05, PointMass(partial(_scaled_sigma, factor=-u))),
            )
        )
        region = interval(-5.0, 5.0)
        replicate_count = 100
    elif name == "dependence-demo":
        sigma_law = UniformSigma(0.5, 2.0)
        prior = KnownPrior(((1.0, PointMass(partial(_scaled_sigma, factor=3.0))),))
        region = left_ray(4.0)
    elif name == "example-1":
        sigma_law = UniformSigma(0.5, 4.0)
        prior = KnownPrior(
            (
                (0.9, PointMass(0.0)),
                (0.1, PointMass(_sigma_pow15)),
            )
        )
        region = left_ray(0.0)
    else:  # example-2
        sigma_law = UniformSigma(0.5, 4.0)
        prior = KnownPrior(((1.0, PointMass(partial(_switch_pow15, cut=3.65), knots=(3.65,))),))
        region = left_ray(0.0)

    return Scenario(
        name=name,
        m=int(m),
        sigma_law=sigma_law,
        prior=prior,
        region=region,
        alpha=float(alpha),
        replicate_count=replicate_count,
        u=float(u),
    )


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


def _stream_key(name: str, seed: int) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") ^ (int(seed) & 0xFFFFFFFFFFFFFFFF)


def _component_values(value, sigma):
    """A (possibly callable) component parameter evaluated at each sigma."""
    if callable(value):
        return np.broadcast_to(np.asarray(value(sigma), dtype=float), sigma.shape).copy()
    return np.full(sigma.shape, float(value))


def generate(scenario: Scenario, seed: int) -> Replicate:
    """Draw one replicate of the scenario.

    Draw order is fixed: sigma, one uniform per unit for the mixture
    component, one standard normal per unit for mu, then the noise (a matrix
    of n draws per unit under within-unit replication). Point-mass components
    consume their normal draw with a zero scale so the stream layout does not
    depend on which components were selected.
    """
    rng = np.random.Generator(np.random.Philox(_stream_key(scenario.name, seed)))
    m = scenario.m
    sigma = np.asarray(scenario.sigma_law.sample(rng, m), dtype=float)

    components = scenario.prior.components
    cum = np.cumsum([w for w, _ in components])
    idx = np.searchsorted(cum, rng.random(m), side="right")
    idx = np.minimum(idx, len(components) - 1)
    z_mu = rng.standard_normal(m)

    means = np.zeros(m)
    sds = np.zeros(m)
    for c, (_, comp) in enumerate(components):
        mask = idx == c
        if not np.any(mask):
            continue
        if isinstance(comp, PointMass):
            means[mask] = _component_values(comp.loc, sigma[mask])
        else:
            means[mask] = _component_values(comp.mean, sigma[mask])
            sds[mask] = _component_values(comp.sd, sigma[mask])
    mu = means + sds * z_mu

    n = scenario.replicate_count
    if n > 1:
        raw_sd = sigma * np.sqrt(n)
        noise = rng.standard_normal((m, n))
        samples = mu[:, None] + raw_sd[:, None] * noise
        x = samples.mean(axis=1)
        sigma_out = samples.std(axis=1, ddof=1) / np.sqrt(n)
    else:
        x = mu + sigma * rng.standard_normal(m)
        sigma_out = sigma

    nonnull = ~region_contains(scenario.region, mu)
    return Replicate(x=x, sigma=sigma_out, mu=mu, nonnull=nonnull, seed=int(seed))


# ---------------------------------------------------------------------------
# Procedures
# ---------------------------------------------------------------------------


def _decide_hamt(scenario: Scenario, rep: Replicate) -> DecisionSet:
    data = (rep.x, rep.sigma)
    pilot = fit_pilot(data)
    values = pilot_density_batch(pilot, data)
    model, _ = fit_prior(data, pilot, pilot_values=values)
    t = clfdr_hat_batch(model, rep.x, rep.sigma, scenario.region)
    return step_up(t, scenario.alpha).decisions


def _decide_deconv(scenario: Scenario, rep: Replicate) -> DecisionSet:
    data = (rep.x, rep.sigma)
    bw = silverman_bandwidths(data)
    pilot = fit_pilot(data, bw=Bandwidths(bw.h_x, _POOLED_H_SIGMA))
    values = pilot_density_batch(pilot, data)
    model, _ = fit_prior_sigma_independent(data, pilot, pilot_values=values)
    t = clfdr_hat_batch(model, rep.x, rep.sigma, scenario.region)
    return step_up(t, scenario.alpha).decisions


def _decide_npmle(scenario: Scenario, rep: Replicate) -> DecisionSet:
    data = (rep.x, rep.sigma)
    grid = default_grid(data)
    pi = fit_npmle(data, grid)
    model = PriorModel(
        grid=grid,
        basis=BasisConfig(K=1),
        weights=pi[:, None],
        sigma_ref=np.array([float(np.median(rep.sigma))]),
    )
    t = clfdr_hat_batch(model, rep.x, rep.sigma, scenario.region)
    return step_up(t, scenario.alpha).decisions


def _decide_bh(scenario: Scenario, rep: Replicate, adaptive: bool) -> DecisionSet:
    p = composite_pvalue_batch(rep.x, rep.sigma, scenario.region)
    return bh_step_up(p, scenario.alpha, adaptive=adaptive)


def _decide_or(scenario: Scenario, rep: Replicate, t_star: float) -> DecisionSet:
    t = clfdr_oracle_batch(scenario.prior, rep.x, rep.sigma, scenario.region)
    rej = t < t_star
    return DecisionSet(rej, float(t_star), int(rej.sum()))


def _decide_zor(scenario: Scenario, rep: Replicate) -> DecisionSet:
    z = rep.x / rep.sigma
    t = z_oracle_stat_batch(scenario.prior, scenario.sigma_law, z, scenario.region)
    return step_up(t, scenario.alpha).decisions


def _replicate_rows(scenario, procedures, index, seed, t_star, or_error):
    """All requested procedures on one generated replicate."""
    rep = generate(scenario, seed)
    rows = []
    for proc in procedures:
        if proc == "OR" and or_error:
            rows.append(
                ExperimentRow(proc, index, float("nan"), float("nan"), 0, seed, error=or_error)
            )
            continue
        try:
            if proc == "HAMT":
                dec = _decide_hamt(scenario, rep)
            elif proc == "DECONV-baseline":
                dec = _decide_deconv(scenario, rep)
            elif proc == "NPMLE-baseline":
                dec = _decide_npmle(scenario, rep)
            elif proc == "BH":
                dec = _decide_bh(scenario, rep, adaptive=False)
            elif proc == "adaptive-BH":
                dec = _decide_bh(scenario, rep, adaptive=True)
            elif proc == "OR":
                dec = _decide_or(scenario, rep, t_star)
            else:  # ZOR
                dec = _decide_zor(scenario, rep)
            met = compute_metrics(dec, rep.nonnull)
            rows.append(ExperimentRow(proc, index, met.fdp, met.ptp, met.rejections, seed))
        except Exception as exc:  # record the failure, keep the run alive
            rows.append(
                ExperimentRow(
                    proc,
                    index,
                    float("nan"),
                    float("nan"),
                    0,
                    seed,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    return rows


def _default_jobs() -> int:
    raw = os.environ.get("HAMT_THREADS", "")
    try:
        jobs = int(raw)
    except ValueError:
        return 1
    return max(jobs, 1)


def run_experiment(
    scenario: Scenario,
    procedures: Sequence[str] = PROCEDURES,
    reps: int = 50,
    base_seed: int = 0,
    n_jobs: Optional[int] = None,
):
    """Run each procedure on `reps` independent replicates.

    Replicate i uses seed base_seed + i. A procedure failure is recorded in
    its row (nan metrics plus the error text) without stopping the run.
    Returns the rows ordered by replicate, then by the requested procedure
    order. n_jobs defaults to the HAMT_THREADS environment variable (1 if
    unset); parallel workers are single-threaded BLAS/OpenMP.
    """
    procedures = tuple(procedures)
    unknown = [p for p in procedures if p not in PROCEDURES]
    if unknown:
        raise ValueError(f"unknown procedures {unknown}; known: {', '.join(PROCEDURES)}")
    if not procedures:
        raise ValueError("no procedures requested")
    if reps < 1:
        raise ValueError("reps must be >= 1")

    t_star = 0.0
    or_error = ""
    if "OR" in procedures:
        try:
            t_star = oracle_threshold(
                scenario.prior, scenario.sigma_law, scenario.region, scenario.alpha
            ).t_star
        except Exception as exc:
            or_error = f"{type(exc).__name__}: {exc}"

    seeds = [int(base_seed) + i for i in range(reps)]
    if n_jobs is None:
        n_jobs = _default_jobs()
    if n_jobs == 1:
        chunks = [
            _replicate_rows(scenario, procedures, i, s, t_star, or_error)
            for i, s in enumerate(seeds)
        ]
    else:
        with parallel_backend("loky", inner_max_num_threads=1):
            chunks = Parallel(n_jobs=n_jobs)(
                delayed(_replicate_rows)(scenario, procedures, i, s, t_star, or_error)
                for i, s in enumerate(seeds)
            )
    return [row for chunk in chunks for row in chunk]


# ---------------------------------------------------------------------------
# Aggregation and CSV output
# ---------------------------------------------------------------------------


def aggregate(rows: Sequence[ExperimentRow], u: float = float("nan")):
    """Mean and standard error of FDP and PTP per procedure.

    Failed rows are excluded; a procedure with no successful replicate gets
    nan means. Standard errors use the sample sd over replicates (0 when only
    one replicate succeeded).
    """
    order = []
    groups = {}
    for row in rows:
        if row.procedure not in groups:
            groups[row.procedure] = []
            order.append(row.procedure)
        if not row.error:
            groups[row.procedure].append(row)
    out = []
    for proc in order:
        good = groups[proc]
        if not good:
            out.append(AggregateRow(proc, u, float("nan"), float("nan"), float("nan"), float("nan")))
            continue
        fdp = np.array([r.fdp for r in good])
        ptp = np.array([r.ptp for r in good])
        n = len(good)
        se_fdp = float(fdp.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        se_ptp = float(ptp.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        out.append(AggregateRow(proc, u, float(fdp.mean()), se_fdp, float(ptp.mean()), se_ptp))
    return out


def _fmt(value) -> str:
    return "%.12g" % float(value)


def write_replicates_csv(path, rows: Sequence[ExperimentRow]) -> None:
    """Schema: procedure,replicate,fdp,ptp,rejections,seed."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["procedure", "replicate", "fdp", "ptp", "rejections", "seed"])
        for r in rows:
            writer.writerow([r.procedure, r.replicate, _fmt(r.fdp), _fmt(r.ptp), r.rejections, r.seed])


def write_aggregate_csv(path, rows: Sequence[AggregateRow]) -> None:
    """Schema: procedure,u,mean_fdp,se_fdp,mean_ptp,se_ptp."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["procedure", "u", "mean_fdp", "se_fdp", "mean_ptp", "se_ptp"])
        for r in rows:
            writer.writerow(
                [r.procedure, _fmt(r.u), _fmt(r.mean_fdp), _fmt(r.se_fdp), _fmt(r.mean_ptp), _fmt(r.se_ptp)]
            )
