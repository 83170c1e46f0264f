"""Gaussian densities and kernels, quadratic log-policies and matrix functions.

All densities are evaluated in the log domain.  Covariances are factored
with a plain Cholesky decomposition; there is no jitter, so a covariance
that is not strictly positive definite raises
:class:`~splitsmc.errors.NumericalDegeneracyError`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, NumericalDegeneracyError, PolicyDegeneracyError

LOG2PI = float(np.log(2.0 * np.pi))


def _finite_matrix(A, name):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not np.all(np.isfinite(A)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return A


def matrix_exponential(A, delta):
    """Return ``exp(A * delta)`` (scaling and squaring with Pade approximants)."""
    A = _finite_matrix(A, "A")
    if not np.isfinite(delta) or delta < 0:
        raise InvalidInputError(f"delta must be finite and >= 0, got {delta}")
    if delta == 0:
        return np.eye(A.shape[0])
    return scipy.linalg.expm(A * delta)


def integrated_covariance(A, Sigma, delta):
    r"""Covariance of the Ornstein-Uhlenbeck increment over ``delta``.

    Computes :math:`\int_0^\delta e^{A(\delta-s)}\Sigma\Sigma^T e^{A^T(\delta-s)}ds`
    with Van Loan's block exponential

    .. math:: \exp\left(\begin{bmatrix}-A & \Sigma\Sigma^T\\ 0 & A^T\end{bmatrix}\delta\right)
              = \begin{bmatrix}\cdot & F_{12}\\ 0 & F_{22}\end{bmatrix},
              \qquad C = F_{22}^T F_{12}.
    """
    A = _finite_matrix(A, "A")
    Sigma = _finite_matrix(Sigma, "Sigma")
    d = A.shape[0]
    if Sigma.shape[0] != d:
        raise InvalidInputError("Sigma must have as many rows as A")
    if not np.isfinite(delta) or delta < 0:
        raise InvalidInputError(f"delta must be finite and >= 0, got {delta}")
    if delta == 0:
        return np.zeros((d, d))
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = -A
    block[:d, d:] = Sigma @ Sigma.T
    block[d:, d:] = A.T
    F = scipy.linalg.expm(block * delta)
    C = F[d:, d:].T @ F[:d, d:]
    return 0.5 * (C + C.T)


def cholesky_factor(cov, what="covariance"):
    """Lower Cholesky factor, raising a degeneracy error instead of jittering."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericalDegeneracyError(f"{what} is not strictly positive definite", block=what) from None


@dataclass(frozen=True)
class GaussianDensity:
    mean: np.ndarray
    covariance: np.ndarray
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise InvalidInputError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
            raise InvalidInputError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self):
        return self.mean.size

    @property
    def chol(self):
        if self._chol is None:
            object.__setattr__(self, "_chol", cholesky_factor(self.covariance))
        return self._chol

    def log_density(self, x):
        """Log-density at ``x`` of shape ``(d,)`` or ``(n, d)``."""
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1
        x = np.atleast_2d(x.reshape(-1, self.dim) if single else x)
        L = self.chol
        z = scipy.linalg.solve_triangular(L, (x - self.mean).T, lower=True)
        out = (-0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L)))
               - 0.5 * self.dim * LOG2PI)
        return float(out[0]) if single else out

    def sample(self, rng, size=None):
        n = 1 if size is None else size
        draws = self.mean + rng.standard_normal((n, self.dim)) @ self.chol.T
        return draws[0] if size is None else draws


@dataclass(frozen=True)
class GaussianKernel:
    """Conditional Gaussian ``x' | x ~ N(mean_map(x), covariance)``."""

    mean_map: Callable[[np.ndarray], np.ndarray]
    covariance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "covariance", np.atleast_2d(np.asarray(self.covariance, dtype=float)))

    def at(self, x):
        return GaussianDensity(self.mean_map(np.asarray(x, dtype=float)), self.covariance)

    def log_density(self, x_prev, x):
        return self.at(x_prev).log_density(x)

    def sample(self, x_prev, rng):
        return self.at(x_prev).sample(rng)


def eval_log_density(kernel, x_prev, x):
    return kernel.log_density(x_prev, x)


def sample(kernel, x_prev, rng):
    return kernel.sample(x_prev, rng)


@dataclass(frozen=True)
class QuadraticLogPolicy:
    """``phi(x) = x' P x + b' x + c``; the policy itself is ``exp(phi)``."""

    P: np.ndarray
    b: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if P.shape != (b.size, b.size):
            raise InvalidInputError("policy P and b have inconsistent shapes")
        object.__setattr__(self, "P", 0.5 * (P + P.T))
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))

    @classmethod
    def unit(cls, d):
        return cls(np.zeros((d, d)), np.zeros(d), 0.0)

    @property
    def is_unit(self):
        return self.c == 0.0 and not self.P.any() and not self.b.any()

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P, x) + x @ self.b + self.c

    def twisted_precision(self, covariance):
        return np.linalg.inv(np.atleast_2d(covariance)) - 2.0 * self.P

    def is_admissible_for(self, covariance):
        return bool(np.all(np.linalg.eigvalsh(self.twisted_precision(covariance)) > 0))


def twist_kernel(kernel, policy):
    """Conjugate twist of a Gaussian kernel by ``exp(phi)``.

    Returns the normalized twisted kernel ``exp(phi(y)) N(y; m(x), C) / Z(x)``
    and ``x -> log Z(x)`` where ``Z(x) = int exp(phi(y)) N(y; m(x), C) dy``.
    With ``Lam = C^{-1} - 2P`` and ``eta = C^{-1} m + b``::

        log Z = c - m'C^{-1}m/2 + eta' Lam^{-1} eta/2 - log|C|/2 - log|Lam|/2
    """
    C = kernel.covariance
    if policy.is_unit:
        return kernel, lambda x: 0.0
    Ci = np.linalg.inv(C)
    lam = Ci - 2.0 * policy.P
    try:
        L = np.linalg.cholesky(lam)
    except np.linalg.LinAlgError:
        raise PolicyDegeneracyError("twisted precision C^-1 - 2P is not positive definite") from None
    S = np.linalg.inv(lam)
    S = 0.5 * (S + S.T)
    _, logdet_C = np.linalg.slogdet(C)
    logdet_lam = 2.0 * np.sum(np.log(np.diag(L)))
    b, c = policy.b, policy.c

    def twisted_mean(x):
        return S @ (Ci @ kernel.mean_map(x) + b)

    def log_normalizer(x):
        m = kernel.mean_map(np.asarray(x, dtype=float))
        eta = Ci @ m + b
        return float(c - 0.5 * m @ Ci @ m + 0.5 * eta @ S @ eta - 0.5 * logdet_C - 0.5 * logdet_lam)

    return GaussianKernel(twisted_mean, S), log_normalizer


@dataclass(frozen=True)
class ConditionalSplit:
    marginal: GaussianDensity
    conditional_map: Callable[[np.ndarray], GaussianDensity]
    gain: np.ndarray
    conditional_covariance: np.ndarray


def block_conditional(cov, first, second):
    """Gain ``B`` and Schur complement for ``x[second] | x[first]``.

    ``E[x2 | x1] = m2 + B (x1 - m1)`` with ``B = C21 C11^{-1}`` and
    ``Cov = C22 - C21 C11^{-1} C12``.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    first = np.asarray(first, dtype=int)
    second = np.asarray(second, dtype=int)
    C11 = cov[np.ix_(first, first)]
    C21 = cov[np.ix_(second, first)]
    C22 = cov[np.ix_(second, second)]
    L11 = cholesky_factor(C11, what=f"block {tuple(first.tolist())}")
    B = scipy.linalg.cho_solve((L11, True), C21.T).T
    schur = C22 - B @ C21.T
    schur = 0.5 * (schur + schur.T)
    cholesky_factor(schur, what=f"conditional block {tuple(second.tolist())}")
    return B, schur


def condition_gaussian(joint, split_index):
    """Split a joint Gaussian into ``x[:s]`` and ``x[s:] | x[:s]``."""
    d = joint.dim
    if not 1 <= split_index < d:
        raise InvalidInputError(f"split_index must lie in [1, {d - 1}]")
    first = np.arange(split_index)
    second = np.arange(split_index, d)
    B, schur = block_conditional(joint.covariance, first, second)
    m1, m2 = joint.mean[:split_index], joint.mean[split_index:]
    marginal = GaussianDensity(m1, joint.covariance[:split_index, :split_index])

    def conditional_map(v):
        return GaussianDensity(m2 + B @ (np.atleast_1d(v) - m1), schur)

    return ConditionalSplit(marginal, conditional_map, B, schur)
