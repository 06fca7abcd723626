"""Merton default model with temporally correlated macro factors.

Subpackages by concern:

- ``latent``: correlation kernels and Gaussian latent paths
- ``merton``: conditional PD, the Poisson/log-normal limit, mixture pmf, simulators
- ``diffusion``: variance scaling, the super-normal transition, impact analysis
- ``inference``: independence MLE, ACF fits, priors, MAP estimation
- ``selection``: posterior sampling, WAIC/WBIC/LFO, sc selection, model comparison
- ``kesten``: the mixed-group intensity and its Kesten-process tail
- ``io`` / ``cli``: datasets, run configuration, artifacts, command line
"""

from .diffusion import (Divergence, ImpactResult, PhaseLabel, ScalingCurve, aggregate_variance,
                        classify_phase, impact_ratio, scaling_curve, scaling_exponent)
from .errors import *  # noqa: F401,F403
from .inference import (FitResult, PortfolioSeries, PriorSpec, build_priors, fit_acf,
                        infer_latents, map_estimate, mle_independent, normalize_counts,
                        preliminary_estimates, sample_acf)
from .io import RunConfig, load_dataset
from .kesten import (MixedParams, hill_tail_exponent, kesten_theoretical_exponent, mixed_intensity,
                     simulate_kesten)
from .latent import CorrelationKernel, build_correlation_matrix, cholesky_factor, conditional_forecast, sample_path
from .merton import (IntensityParams, MertonParams, conditional_pd, intensity, intensity_moments, limit_map,
                     merton_pmf, mixture_pmf, simulate_merton, simulate_poisson_lognormal)
from .selection import (ComparisonReport, PosteriorDraws, compare_models, lfo, posterior_sample, rhat,
                        select_sc, waic, wbic)

__version__ = "0.1.0"
