"""Semi-linear SDE specifications ``dX = (A X + gamma(X)) dt + Sigma dW``.

Every model shipped here has a coordinate-wise nonlinearity of the form

    gamma_i(x) = r_i (x_i - x_i**3) + s_i,      with r_i = 0 or s_i = 0,

which covers the cubic SDE, the FitzHugh-Nagumo model and the OU process.
The ODE ``dX = gamma(X) dt`` then has a closed-form, coordinate-wise flow,
so the splitting schemes never need a numerical ODE solver and the flow is
component-wise invertible (no coordinate enters another's flow).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import BranchSingularityError, DomainError, InvalidInputError
from .gaussian import integrated_covariance, matrix_exponential

# flow kinds understood by the accelerated kernels
SHIFT, CUBIC, DRIFT = 0, 1, 2


@dataclass(frozen=True)
class SemiLinearModel:
    name: str
    A: np.ndarray
    Sigma: np.ndarray
    rate: np.ndarray
    offset: np.ndarray
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        d = A.shape[0]
        rate = np.broadcast_to(np.asarray(self.rate, dtype=float), (d,)).copy()
        offset = np.broadcast_to(np.asarray(self.offset, dtype=float), (d,)).copy()
        if A.shape != (d, d) or Sigma.shape[0] != d:
            raise InvalidInputError("A must be square and Sigma must have d rows")
        for name, arr in (("A", A), ("Sigma", Sigma), ("rate", rate), ("offset", offset)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} has non-finite entries")
        if np.any((rate != 0) & (offset != 0)):
            raise InvalidInputError("each coordinate carries either a cubic rate or a constant offset")
        for arr in (A, Sigma, rate, offset):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "rate", rate)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "params", dict(self.params))

    @property
    def dim(self):
        return self.A.shape[0]

    @property
    def is_linear(self):
        return not self.rate.any() and not self.offset.any()

    def nonlinear_drift(self, x):
        x = np.asarray(x, dtype=float)
        return self.rate * (x - x ** 3) + self.offset

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.A.T + self.nonlinear_drift(x)

    def flow_arrays(self, delta):
        """``(kind, par, shift)`` describing ``Gamma_delta`` for the kernels."""
        kind = np.where(self.rate != 0, CUBIC, SHIFT).astype(np.int64)
        par = np.where(kind == CUBIC, np.exp(-2.0 * self.rate * delta), 1.0)
        shift = np.where(kind == CUBIC, 0.0, self.offset * delta)
        return kind, par, shift

    def drift_arrays(self):
        """``(kind, par, shift)`` evaluating ``gamma`` itself (used by EuM)."""
        kind = np.full(self.dim, DRIFT, dtype=np.int64)
        return kind, self.rate.copy(), self.offset.copy()

    def ode_flow(self, delta, x):
        """``Gamma_delta(x)``, the exact solution of ``dX = gamma(X) dt``."""
        x = np.asarray(x, dtype=float)
        kind, par, shift = self.flow_arrays(delta)
        cub = kind == CUBIC
        with np.errstate(invalid="ignore"):
            curved = x / np.sqrt(par + x * x * (1.0 - par))
        return np.where(cub, curved, x + shift)

    def ode_flow_inverse(self, delta, x):
        """``Gamma_delta^{-1}(x)``; raises :class:`DomainError` off the image."""
        x = np.asarray(x, dtype=float)
        kind, par, shift = self.flow_arrays(delta)
        cub = kind == CUBIC
        denom = 1.0 - (1.0 - par) * x * x
        if np.any(cub & ~(denom > 0)):
            raise DomainError(f"flow inverse over {delta} undefined: |x| must stay below "
                              f"{np.min(1.0 / np.sqrt(1.0 - par[cub])):.6g}")
        with np.errstate(invalid="ignore", divide="ignore"):
            curved = np.sign(x) * np.sqrt(par * x * x / np.where(cub, denom, 1.0))
        return np.where(cub, curved, x - shift)

    def ode_flow_jacobian_logdet(self, delta, x):
        """``log |det D Gamma_delta(x)|`` (the Jacobian is diagonal)."""
        x = np.asarray(x, dtype=float)
        kind, par, _ = self.flow_arrays(delta)
        diag = np.where(kind == CUBIC,
                        np.log(par) - 1.5 * np.log(par + x * x * (1.0 - par)), 0.0)
        return np.sum(diag, axis=-1)

    def matrix_exponential(self, delta):
        return matrix_exponential(self.A, delta)

    def integrated_covariance(self, delta):
        return integrated_covariance(self.A, self.Sigma, delta)


def cubic_model(sigma):
    """``dX = -X^3 dt + sigma dW`` split as ``A = -1`` and ``gamma = x - x^3``."""
    if not sigma > 0:
        raise InvalidInputError(f"sigma must be positive, got {sigma}")
    return SemiLinearModel("cubic", [[-1.0]], [[float(sigma)]], [1.0], [0.0], {"sigma": float(sigma)})


def fhn_model(eps, gamma, beta, sigma1, sigma2):
    """Stochastic FitzHugh-Nagumo model in ``(V, U)`` coordinates.

    ``sigma1 = 0`` gives the hypoelliptic version in which only ``U`` is
    driven by noise.
    """
    if not (eps > 0 and gamma > 0 and sigma2 > 0 and sigma1 >= 0):
        raise InvalidInputError("need eps > 0, gamma > 0, sigma2 > 0 and sigma1 >= 0")
    if 4.0 * gamma / eps - 1.0 == 0.0:
        raise BranchSingularityError("kappa = 4 gamma / eps - 1 is exactly zero")
    A = [[0.0, -1.0 / eps], [gamma, -1.0]]
    Sigma = [[float(sigma1), 0.0], [0.0, float(sigma2)]]
    params = {"eps": eps, "gamma": gamma, "beta": beta, "sigma1": sigma1, "sigma2": sigma2}
    return SemiLinearModel("fhn", A, Sigma, [1.0 / eps, 0.0], [0.0, float(beta)], params)


def ou_model(A, Sigma):
    """Linear SDE ``dX = A X dt + Sigma dW``; every splitting scheme is exact."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    return SemiLinearModel("ou", A, Sigma, np.zeros(d), np.zeros(d))


def _fhn_trig(eps, gamma, t):
    # returns (cos(sqrt(kappa) t), sin(sqrt(kappa) t)/sqrt(kappa)) on either branch
    kappa = 4.0 * gamma / eps - 1.0
    if kappa == 0.0:
        raise BranchSingularityError("kappa = 4 gamma / eps - 1 is exactly zero")
    if kappa > 0:
        s = np.sqrt(kappa)
        return kappa, np.cos(s * t), np.sin(s * t) / s
    s = np.sqrt(-kappa)
    return kappa, np.cosh(s * t), np.sinh(s * t) / s


def fhn_expm_closed_form(eps, gamma, delta):
    """Closed-form ``exp(A delta)`` for the FHN linear part."""
    _, co, si = _fhn_trig(eps, gamma, delta / 2.0)
    return np.exp(-delta / 2.0) * np.array([[co + si, -2.0 / eps * si],
                                            [2.0 * gamma * si, co - si]])


def fhn_covariance_closed_form(eps, gamma, sigma2, delta):
    """Closed-form ``C(delta)`` for ``Sigma = diag(0, sigma2)``."""
    kappa, co, si = _fhn_trig(eps, gamma, delta)
    ksin = kappa * si
    scale = sigma2 ** 2 * np.exp(-delta)
    c11 = scale / (2.0 * eps * gamma * kappa) * (-4.0 * gamma / eps + kappa * np.exp(delta) + co - ksin)
    c12 = scale / (kappa * eps) * (co - 1.0)
    c22 = scale / (2.0 * kappa) * (co + ksin - 4.0 * gamma / eps + kappa * np.exp(delta))
    return np.array([[c11, c12], [c12, c22]])


@dataclass(frozen=True)
class ModelFamily:
    """Maps a log-scale parameter vector to a :class:`SemiLinearModel`.

    Parameters listed in ``names`` are estimated and strictly positive;
    ``fixed`` holds the remaining natural-scale arguments of ``builder``.
    """

    names: tuple
    builder: Callable[..., SemiLinearModel]
    fixed: Mapping[str, float] = field(default_factory=dict)

    @property
    def size(self):
        return len(self.names)

    def natural(self, log_theta):
        log_theta = np.asarray(log_theta, dtype=float)
        if log_theta.shape != (self.size,):
            raise InvalidInputError(f"expected {self.size} log-parameters, got shape {log_theta.shape}")
        return dict(zip(self.names, np.exp(log_theta).tolist()))

    def to_log(self, natural):
        if isinstance(natural, Mapping):
            natural = [natural[n] for n in self.names]
        natural = np.asarray(natural, dtype=float)
        if np.any(natural <= 0):
            raise InvalidInputError("estimated parameters must be strictly positive")
        return np.log(natural)

    def __call__(self, log_theta):
        return self.builder(**self.natural(log_theta), **self.fixed)


def cubic_family():
    return ModelFamily(("sigma",), cubic_model)


def fhn_family(sigma1=0.0):
    return ModelFamily(("eps", "gamma", "beta", "sigma2"), fhn_model, {"sigma1": sigma1})


def _ou_diag(a, sigma, coupling=0.5):
    return ou_model([[-a, coupling], [-coupling, -a]], [[sigma, 0.0], [0.0, sigma]])


def ou2_family(coupling=0.5):
    """Two-dimensional rotating OU with decay ``a`` and noise level ``sigma``."""
    return ModelFamily(("a", "sigma"), _ou_diag, {"coupling": coupling})


FAMILIES = {"cubic": cubic_family, "fhn": fhn_family, "ou2": ou2_family}


def make_family(name, **fixed):
    try:
        factory = FAMILIES[name]
    except KeyError:
        raise InvalidInputError(f"unknown model {name!r}; choose from {sorted(FAMILIES)}") from None
    return factory(**fixed)


@dataclass(frozen=True)
class ObservationScheme:
    """How the path is observed: regime, observed coordinates, step and bridges."""

    regime: str
    observed: tuple
    delta_obs: float
    K: int = 1

    def __post_init__(self):
        if self.regime not in ("full", "partial"):
            raise InvalidInputError(f"regime must be 'full' or 'partial', got {self.regime!r}")
        object.__setattr__(self, "observed", tuple(int(i) for i in self.observed))
        if not (self.delta_obs > 0 and np.isfinite(self.delta_obs)):
            raise InvalidInputError("delta_obs must be positive")
        if int(self.K) != self.K or self.K < 1:
            raise InvalidInputError(f"bridge count K must be a positive integer, got {self.K}")
        object.__setattr__(self, "K", int(self.K))

    @property
    def delta(self):
        return self.delta_obs / self.K

    def validate(self, dim):
        obs = self.observed
        if len(set(obs)) != len(obs) or any(i < 0 or i >= dim for i in obs):
            raise InvalidInputError(f"observed indices {obs} invalid for dimension {dim}")
        if self.regime == "partial" and not 0 < len(obs) < dim:
            raise InvalidInputError("partial regime needs a strict, nonempty subset of coordinates")
        if self.regime == "full" and len(obs) != dim:
            raise InvalidInputError("full regime observes every coordinate")
        return self

    def latent(self, dim):
        return tuple(i for i in range(dim) if i not in self.observed)
