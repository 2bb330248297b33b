"""Shared domain types and scalar Gaussian utilities.

Everything here is an immutable value type. Batches of testing units are
represented throughout the library as parallel numpy arrays (x, sigma);
the Observation record is for single-unit queries.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy.special import ndtr

SQRT_2PI = math.sqrt(2.0 * math.pi)


class Observation(NamedTuple):
    """One testing unit: summary statistic x with known standard deviation sigma."""

    x: float
    sigma: float


class TruthRecord(NamedTuple):
    """Latent mean and its non-null indicator for a generated unit."""

    mu: float
    is_nonnull: bool


def gauss_pdf(z, mean=0.0, sd=1.0):
    """Gaussian density phi_sd(z - mean). Vectorized in every argument.

    Raises ValueError on sd <= 0 or non-finite scalar inputs.
    """
    z = np.asarray(z, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise ValueError("gauss_pdf requires sd > 0")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(mean)) and np.all(np.isfinite(sd))):
        raise ValueError("gauss_pdf requires finite inputs")
    u = (z - mean) / sd
    out = np.exp(-0.5 * u * u) / (SQRT_2PI * sd)
    return float(out) if out.ndim == 0 else out


def gauss_cdf(z):
    """Standard normal distribution function Phi(z), via the erfc-based ndtr.

    Absolute error is at the 1e-16 level, well inside the 1e-15 budget the
    threshold calculations rely on.
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("gauss_cdf requires finite input")
    out = ndtr(z)
    return float(out) if out.ndim == 0 else out


def gauss_sf(z):
    """Upper tail 1 - Phi(z), computed as Phi(-z) so it never underflows to 0
    before |z| ~ 37 (1 - ndtr(z) loses everything past z ~ 8)."""
    z = np.asarray(z, dtype=float)
    out = ndtr(-z)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class IndifferenceRegion:
    """The null set A: either a left ray (-inf, mu0] or a closed interval [lo, hi].

    Boundary points belong to A. Construct via left_ray() or interval().
    """

    kind: str  # "left_ray" | "interval"
    lo: float
    hi: float

    def contains(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "left_ray":
            out = mu <= self.hi
        else:
            out = (self.lo <= mu) & (mu <= self.hi)
        return bool(out) if out.ndim == 0 else out

    @property
    def mu0(self) -> float:
        if self.kind != "left_ray":
            raise ValueError("mu0 is only defined for left-ray regions")
        return self.hi


def left_ray(mu0: float) -> IndifferenceRegion:
    """A = (-inf, mu0]. mu0 = +inf is allowed as the 'everything is null' case."""
    if math.isnan(mu0) or mu0 == -math.inf:
        raise ValueError("left_ray needs mu0 > -inf")
    return IndifferenceRegion("left_ray", -math.inf, float(mu0))


def interval(lo: float, hi: float) -> IndifferenceRegion:
    """A = [lo, hi] with finite lo < hi."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("interval bounds must be finite")
    if not lo < hi:
        raise ValueError("interval requires lo < hi")
    return IndifferenceRegion("interval", float(lo), float(hi))


def region_contains(region: IndifferenceRegion, mu) -> Union[bool, np.ndarray]:
    return region.contains(mu)


@dataclass(frozen=True)
class DecisionSet:
    """Realized decisions delta_i with the cutoff that produced them."""

    decisions: np.ndarray  # bool, length m
    threshold: float
    rejected_count: int

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.rejected_count != int(np.count_nonzero(self.decisions)):
            raise ValueError("rejected_count does not match decisions")


# ---------------------------------------------------------------------------
# Sigma distributions. These are scenario-level laws, but the oracle threshold
# and z-value statistics integrate against them, so they live here where both
# sides can import them.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UniformSigma:
    """sigma ~ U(a, b), 0 < a < b."""

    a: float
    b: float

    def __post_init__(self):
        if not 0 < self.a < self.b:
            raise ValueError("UniformSigma needs 0 < a < b")

    def density(self, s):
        s = np.asarray(s, dtype=float)
        return np.where((s >= self.a) & (s <= self.b), 1.0 / (self.b - self.a), 0.0)

    def panels(self):
        return [(self.a, self.b)]

    def atoms(self):
        return []

    def sample(self, rng, n):
        return rng.uniform(self.a, self.b, size=n)


@dataclass(frozen=True)
class DiscreteSigma:
    """sigma takes finitely many positive values with equal probabilities."""

    values: tuple

    def __post_init__(self):
        if len(self.values) == 0 or any(v <= 0 for v in self.values):
            raise ValueError("DiscreteSigma needs positive support points")

    def density(self, s):
        raise ValueError("DiscreteSigma has no density; use atoms()")

    def panels(self):
        return []

    def atoms(self):
        p = 1.0 / len(self.values)
        return [(float(v), p) for v in self.values]

    def sample(self, rng, n):
        idx = rng.integers(0, len(self.values), size=n)
        return np.asarray(self.values, dtype=float)[idx]


@dataclass(frozen=True)
class MixtureUniformSigma:
    """sigma ~ w * U(a1, b1) + (1 - w) * U(a2, b2)."""

    w: float
    a1: float
    b1: float
    a2: float
    b2: float

    def __post_init__(self):
        if not 0 < self.w < 1:
            raise ValueError("mixture weight must be in (0, 1)")
        if not (0 < self.a1 < self.b1 and 0 < self.a2 < self.b2):
            raise ValueError("MixtureUniformSigma needs valid positive ranges")

    def density(self, s):
        s = np.asarray(s, dtype=float)
        d1 = np.where((s >= self.a1) & (s <= self.b1), self.w / (self.b1 - self.a1), 0.0)
        d2 = np.where((s >= self.a2) & (s <= self.b2), (1.0 - self.w) / (self.b2 - self.a2), 0.0)
        return d1 + d2

    def panels(self):
        # split at every range endpoint so each panel has a smooth density
        pts = sorted({self.a1, self.b1, self.a2, self.b2})
        return [(lo, hi) for lo, hi in zip(pts[:-1], pts[1:])]

    def atoms(self):
        return []

    def sample(self, rng, n):
        pick = rng.uniform(size=n) < self.w
        lo = np.where(pick, self.a1, self.a2)
        hi = np.where(pick, self.b1, self.b2)
        return rng.uniform(size=n) * (hi - lo) + lo


SigmaLaw = Union[UniformSigma, DiscreteSigma, MixtureUniformSigma]


def as_arrays(data) -> tuple:
    """Normalize unit data to a pair of float arrays (x, sigma).

    Accepts a sequence of Observation, a pair of array-likes, or an (m, 2)
    array. Validates finiteness and sigma > 0.
    """
    if isinstance(data, tuple) and len(data) == 2:
        x = np.asarray(data[0], dtype=float)
        sigma = np.asarray(data[1], dtype=float)
    else:
        arr = np.asarray(data, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError("expected (x, sigma) arrays, an (m, 2) array, or Observations")
        x, sigma = arr[:, 0], arr[:, 1]
    if x.shape != sigma.shape:
        raise ValueError("x and sigma must have equal length")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(sigma))):
        raise ValueError("non-finite values in data")
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    return x, sigma
