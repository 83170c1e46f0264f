"""Inference for semi-linear SDEs with splitting schemes and controlled SMC."""

__version__ = "0.1.0"

from . import errors
from ._accel import BACKEND
from .errors import (BranchSingularityError, DomainError, EstimatorAbort, InvalidInputError,
                     NumericalDegeneracyError, ParticleCollapseError, PolicyDegeneracyError, SplitSMCError,
                     UnsupportedSchemeError)
from .estimators import (CsmcLikelihood, PmmhResult, PmmhState, SpsaConfig, SpsaResult, bridging_overhead,
                         gaussian_log_prior, pmmh, spsa_gradient, spsa_initialize_bridged, spsa_maximize)
from .feynman_kac import (FeynmanKacModel, LatentPrior, PolicySet, TwistedModel, bridged_full,
                          build_formulation, check_dimensions, full_unbridged, latent_coordinate_map,
                          partial_bridged, partial_unbridged, quadrature_log_normalizer, twist)
from .gaussian import (GaussianDensity, GaussianKernel, QuadraticLogPolicy, integrated_covariance,
                       matrix_exponential, twist_kernel)
from .kalman import kalman_log_likelihood, optimal_log_policy
from .models import (ModelFamily, ObservationScheme, SemiLinearModel, cubic_model, fhn_covariance_closed_form,
                     fhn_expm_closed_form, fhn_model, make_family, ou_model)
from .schemes import (Scheme, bridge_explosion_fraction, make_kernel, simulate_path, weak_order_probe)
from .smc import (CsmcReport, FilterResult, ParticleEnsemble, bpf, coarse_policies, csmc, fit_policies,
                  particle_filter)
