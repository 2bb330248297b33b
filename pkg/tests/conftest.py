"""Shared fixtures for the test suite.

The expensive piece is a sweep of deconvolution fits on the three-point
sigma design (sigma in {0.5, 1, 2}, mu = 0 with probability 0.9 and
2 * sigma otherwise) across sample sizes and seeds. Building it takes a
couple of minutes, so it is session scoped and shared by the density
accuracy trend checks, the statistic accuracy trend check, and the bulk
feasibility scans.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from hamt.deconv import default_grid, fit_prior
from hamt.pilot_kde import fit_pilot, pilot_density_batch

SETTING2_SIZES = (1000, 5000, 20000)
SETTING2_SEEDS = tuple(range(10))
SETTING2_U = 2.0


def draw_three_point(m, seed, u=SETTING2_U):
    """Draw one sample of the three-point sigma design."""
    rng = np.random.Generator(np.random.Philox(seed))
    sigma = np.array([0.5, 1.0, 2.0])[rng.integers(0, 3, m)]
    nonnull = rng.random(m) < 0.1
    mu = np.where(nonnull, u * sigma, 0.0)
    x = mu + sigma * rng.standard_normal(m)
    return x, sigma, mu


@pytest.fixture(scope="session")
def setting2_fits():
    """Dict (m, seed) -> fitted prior plus the data it was fitted on."""
    fits = {}
    for m in SETTING2_SIZES:
        for seed in SETTING2_SEEDS:
            x, sigma, mu = draw_three_point(m, seed)
            pilot = fit_pilot((x, sigma))
            values = pilot_density_batch(pilot, (x, sigma))
            model, report = fit_prior(
                (x, sigma), pilot, default_grid((x, sigma)), pilot_values=values
            )
            fits[m, seed] = SimpleNamespace(
                m=m, seed=seed, x=x, sigma=sigma, mu=mu, model=model, report=report
            )
    return fits
