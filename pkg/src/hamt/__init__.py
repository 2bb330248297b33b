"""Multiple testing of composite null hypotheses under heteroskedasticity.

The package fits a covariate-dependent empirical-Bayes deconvolution model
g_mu(. | sigma) from (x_i, sigma_i) pairs, turns it into conditional local
FDR statistics, and thresholds those with an FDR-controlling step-up rule.
Oracle procedures, simpler baselines, and a simulation harness are included.
"""

from .core import (
    DecisionSet,
    DiscreteSigma,
    IndifferenceRegion,
    MixtureUniformSigma,
    Observation,
    TruthRecord,
    UniformSigma,
    gauss_cdf,
    gauss_pdf,
    gauss_sf,
    interval,
    left_ray,
    region_contains,
)

__version__ = "0.1.0"
