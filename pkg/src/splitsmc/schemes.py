"""One-step transition kernels and path samplers for EuM, Lie-Trotter and Strang.

For Strang the Gaussian kernel lives in ``z = Gamma_{delta/2}^{-1}(x)``
coordinates, where the scheme is exactly a Lie-Trotter step::

    z_k = e^{A delta} Gamma_delta(z_{k-1}) + xi,   xi ~ N(0, C(delta)).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import InvalidInputError, UnsupportedSchemeError
from .gaussian import GaussianDensity, GaussianKernel, cholesky_factor

EXPLOSION_THRESHOLD = 1e5


class Scheme(str, enum.Enum):
    EUM = "eum"
    LIE_TROTTER = "lt"
    STRANG = "strang"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"eum": cls.EUM, "euler": cls.EUM, "euler-maruyama": cls.EUM,
                   "lt": cls.LIE_TROTTER, "lie-trotter": cls.LIE_TROTTER,
                   "strang": cls.STRANG, "s": cls.STRANG}
        try:
            return aliases[key]
        except KeyError:
            raise InvalidInputError(f"unknown scheme {value!r}") from None


def _identity_flow(d):
    return (np.eye(d), np.zeros((d, d)), np.zeros(d, dtype=np.int64), np.ones(d), np.zeros(d))


def mean_flow(model, scheme, delta):
    """Mean-map description ``(lin, nl, kind, par, shift)`` of one step.

    For Strang this is the map in ``z`` coordinates.
    """
    scheme = Scheme.parse(scheme)
    d = model.dim
    if scheme is Scheme.EUM:
        kind, par, shift = model.drift_arrays()
        return (np.eye(d) + delta * model.A, delta * np.eye(d), kind, par, shift)
    kind, par, shift = model.flow_arrays(delta)
    return (np.zeros((d, d)), model.matrix_exponential(delta), kind, par, shift)


def step_covariance(model, scheme, delta):
    if Scheme.parse(scheme) is Scheme.EUM:
        return delta * model.Sigma @ model.Sigma.T
    return model.integrated_covariance(delta)


@dataclass(frozen=True)
class SchemeKernel:
    scheme: Scheme
    delta: float
    model: object
    kernel: GaussianKernel
    flow: tuple

    @property
    def is_strang(self):
        return self.scheme is Scheme.STRANG

    def to_latent(self, x):
        """Map states to the coordinates in which the kernel is Gaussian."""
        if self.is_strang:
            return self.model.ode_flow_inverse(self.delta / 2.0, x)
        return np.asarray(x, dtype=float)

    def from_latent(self, z):
        if self.is_strang:
            return self.model.ode_flow(self.delta / 2.0, z)
        return np.asarray(z, dtype=float)

    def log_jacobian(self, z):
        """``log |det D Gamma_{delta/2}(z)|``; zero for the other schemes."""
        if self.is_strang:
            return self.model.ode_flow_jacobian_logdet(self.delta / 2.0, z)
        return 0.0

    def mean(self, x_prev):
        """Mean of the Gaussian part given the previous state in x coordinates."""
        x_prev = np.asarray(x_prev, dtype=float)
        return self.kernel.mean_map(self.to_latent(x_prev))

    def log_density(self, x_prev, x):
        z = self.to_latent(x)
        dens = GaussianDensity(self.mean(x_prev), self.kernel.covariance)
        return dens.log_density(z) - self.log_jacobian(z)

    def sample(self, x_prev, rng):
        dens = GaussianDensity(self.mean(x_prev), self.kernel.covariance)
        return self.from_latent(dens.sample(rng))


def make_kernel(model, scheme, delta):
    """One-step kernel of ``scheme`` with step ``delta`` for ``model``."""
    scheme = Scheme.parse(scheme)
    if not (delta > 0 and np.isfinite(delta)):
        raise InvalidInputError(f"delta must be positive, got {delta}")
    if scheme is Scheme.STRANG and not hasattr(model, "ode_flow_inverse"):
        raise UnsupportedSchemeError("Strang needs an invertible ODE flow")
    flow = mean_flow(model, scheme, delta)
    cov = step_covariance(model, scheme, delta)
    cholesky_factor(cov, what=f"{scheme.value} step covariance")

    def mean_map(z, flow=flow):
        z = np.asarray(z, dtype=float)
        return _accel.numpy_backend.eval_mean_map(np.atleast_2d(z), *flow).reshape(z.shape)

    return SchemeKernel(scheme, float(delta), model, GaussianKernel(mean_map, cov), flow)


@dataclass(frozen=True)
class SimulatedPath:
    times: np.ndarray
    states: np.ndarray
    explosion_step: int | None = None

    @property
    def exploded(self):
        return self.explosion_step is not None


def _sim_maps(model, scheme, delta):
    d = model.dim
    ident = _identity_flow(d)
    if scheme is Scheme.STRANG:
        kind, par, shift = model.flow_arrays(delta / 2.0)
        pre = (np.zeros((d, d)), model.matrix_exponential(delta), kind, par, shift)
        post = (np.zeros((d, d)), np.eye(d), kind, par, shift)
        return pre, post
    return mean_flow(model, scheme, delta), ident


def _psd_cholesky(cov, tol=1e-14):
    # lower factor that tolerates zero pivots (EuM with a degenerate diffusion)
    d = cov.shape[0]
    L = np.zeros((d, d))
    scale = max(float(np.max(np.abs(np.diag(cov)))), 1e-300)
    for j in range(d):
        s = cov[j, j] - L[j, :j] @ L[j, :j]
        if s <= tol * scale:
            continue
        L[j, j] = np.sqrt(s)
        L[j + 1:, j] = (cov[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def simulate_path(model, scheme, x0, delta_sim, n_steps, stride, rng, chunk=1 << 16):
    """Simulate ``n_steps`` steps of ``scheme`` keeping every ``stride``-th state.

    A state with any coordinate above the explosion threshold (or non-finite)
    ends the path; the remaining rows are NaN and ``explosion_step`` records
    the 1-based step at which it happened.
    """
    scheme = Scheme.parse(scheme)
    n_steps, stride = int(n_steps), int(stride)
    if n_steps < 0 or stride < 1:
        raise InvalidInputError("n_steps must be >= 0 and stride >= 1")
    x = np.array(x0, dtype=float).reshape(model.dim)
    pre, post = _sim_maps(model, scheme, delta_sim)
    cov = step_covariance(model, scheme, delta_sim)
    chol = _psd_cholesky(cov)
    rows = n_steps // stride + 1
    out = np.full((rows, model.dim), np.nan)
    out[0] = x
    done, exploded = 0, None
    while done < n_steps:
        n = min(chunk, n_steps - done)
        noise = rng.standard_normal((n, model.dim))
        hit = _accel.simulate_steps(x, pre, post, chol, noise, stride, out, done, EXPLOSION_THRESHOLD)
        if hit >= 0:
            exploded = done + hit + 1
            break
        done += n
    times = np.arange(rows) * stride * delta_sim
    return SimulatedPath(times, out, exploded)


@dataclass(frozen=True)
class WeakOrderResult:
    deltas: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float
    residual: float
    exact: bool


def _one_step(model, scheme, delta, x, xi):
    pre, post = _sim_maps(model, scheme, delta)
    y = _accel.numpy_backend.eval_mean_map(x, *pre) + xi
    return _accel.numpy_backend.eval_mean_map(y, *post)


def weak_order_probe(model, scheme, x0, deltas, rng, n_reps=100_000, refine=128, tol=1e-13,
                     antithetic=True):
    """Log-log slope of the one-step mean error against the step size.

    The reference is a Strang path with step ``delta / refine`` driven by
    increments ``xi_j`` of the linear part.  The coarse step uses the exact
    aggregate ``sum_j e^{A(delta - t_j)} xi_j``, so both steps share the same
    Brownian path.  Replicates come in antithetic pairs by default.
    """
    scheme = Scheme.parse(scheme)
    deltas = np.asarray(deltas, dtype=float)
    if deltas.ndim != 1 or deltas.size < 4 or np.any(deltas <= 0):
        raise InvalidInputError("need at least 4 positive step sizes")
    if deltas.max() / deltas.min() < 10.0 * (1 - 1e-12):
        raise InvalidInputError("step sizes must span at least one decade")
    d = model.dim
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(d), (n_reps, d))
    errors = np.empty(deltas.size)
    for i, delta in enumerate(deltas):
        h = delta / refine
        Lf = cholesky_factor(model.integrated_covariance(h), what="fine-step covariance")
        Eh = model.matrix_exponential(h)
        agg = np.zeros((n_reps, d))
        xf = x0.copy()
        for _ in range(refine):
            if antithetic:
                half = rng.standard_normal(((n_reps + 1) // 2, d))
                xi = np.concatenate([half, -half])[:n_reps] @ Lf.T
            else:
                xi = rng.standard_normal((n_reps, d)) @ Lf.T
            agg = agg @ Eh.T + xi
            xf = _one_step(model, Scheme.STRANG, h, xf, xi)
        xc = _one_step(model, scheme, delta, x0, agg)
        errors[i] = np.linalg.norm(np.mean(xc - xf, axis=0))
    scale = max(1.0, float(np.max(np.abs(x0))))
    exact = bool(np.all(errors <= tol * scale * np.sqrt(refine)))
    if exact:
        return WeakOrderResult(deltas, errors, float("nan"), float("nan"), 0.0, True)
    X = np.column_stack([np.ones(deltas.size), np.log(deltas)])
    coef, *_ = np.linalg.lstsq(X, np.log(errors), rcond=None)
    resid = float(np.sqrt(np.mean((np.log(errors) - X @ coef) ** 2)))
    return WeakOrderResult(deltas, errors, float(coef[1]), float(coef[0]), resid, False)


def bridge_explosion_fraction(model, scheme, path, delta_obs, K, N, rng):
    """Fraction of observation intervals in which a forward-simulated bridge explodes.

    From every observed state ``x_{k-1}``, ``N`` particles are propagated
    through the ``K - 1`` intermediate steps of ``scheme`` with step
    ``delta_obs / K``, as the first (bootstrap) iteration of a bridged
    filter does.  An interval counts when some particle leaves
    ``[-EXPLOSION_THRESHOLD, EXPLOSION_THRESHOLD]`` or becomes non-finite.
    """
    scheme = Scheme.parse(scheme)
    if int(K) != K or K < 1 or int(N) != N or N < 1:
        raise InvalidInputError("K and N must be positive integers")
    path = np.asarray(path, dtype=float).reshape(-1, model.dim)
    M = path.shape[0] - 1
    if M < 1:
        raise InvalidInputError("need at least one observation interval")
    delta = delta_obs / int(K)
    pre, post = _sim_maps(model, scheme, delta)
    chol = _psd_cholesky(step_covariance(model, scheme, delta))
    x = np.repeat(path[:-1], int(N), axis=0)
    bad = np.zeros(x.shape[0], dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(int(K) - 1):
            z = _accel.numpy_backend.eval_mean_map(x, *pre) + rng.standard_normal(x.shape) @ chol.T
            x = _accel.numpy_backend.eval_mean_map(z, *post)
            bad |= ~np.all(np.abs(x) <= EXPLOSION_THRESHOLD, axis=1)
            x[bad] = 0.0
    return float(np.mean(bad.reshape(M, int(N)).any(axis=1)))
