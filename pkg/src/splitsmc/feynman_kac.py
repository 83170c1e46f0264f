"""Feynman-Kac formulations whose normalizing constants are pseudolikelihoods.

A formulation is stored as padded arrays so that the particle filter can run
inside a compiled kernel.  Step ``k`` has state dimension ``dims[k] <= d``;
the kernel mean given the previous state ``x`` is

    kR[k] @ phi(kQ[k] @ x + ko[k]) + kr[k]      (or kr[k] if const_mean[k])

with covariance ``kC[k]``, where ``phi`` is the scheme's one-step mean map.
The log-potential is either the constant ``gc[k]`` or

    gc[k] + log N(gy[k]; gH[k] @ phi(gQ[k] @ x + go[k]), gC[k]).

For Strang everything is expressed in ``z = Gamma_{delta/2}^{-1}(x)``
coordinates; the Jacobian terms of the observed states are collected in
``log_offset`` and added to every log-normalizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.special

from . import _accel
from .errors import InvalidInputError, NumericalDegeneracyError, PolicyDegeneracyError
from .gaussian import GaussianDensity, QuadraticLogPolicy, block_conditional, cholesky_factor
from .schemes import Scheme, make_kernel, mean_flow, step_covariance

_np = _accel.numpy_backend


def _logdet_chol(L):
    return 2.0 * float(np.sum(np.log(np.diag(L))))


@dataclass(frozen=True, eq=False)
class FeynmanKacModel:
    dims: np.ndarray
    flow: tuple
    const_mean: np.ndarray
    kQ: np.ndarray
    ko: np.ndarray
    kR: np.ndarray
    kr: np.ndarray
    kC: np.ndarray
    gk: np.ndarray
    gq: np.ndarray
    gQ: np.ndarray
    go: np.ndarray
    gH: np.ndarray
    gy: np.ndarray
    gC: np.ndarray
    gc: np.ndarray
    log_offset: float = 0.0
    description: str = ""
    # observation index of steps that carry only the latent block u_j, else -1
    anchors: np.ndarray | None = None
    kCi: np.ndarray = field(init=False, repr=False)
    kld: np.ndarray = field(init=False, repr=False)
    kL: np.ndarray = field(init=False, repr=False)
    gCi: np.ndarray = field(init=False, repr=False)
    gld: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        T, d = self.T, self.d
        kCi = np.zeros((T, d, d))
        kL = np.zeros((T, d, d))
        kld = np.zeros(T)
        gCi = np.zeros((T, d, d))
        gld = np.zeros(T)
        for k in range(T):
            p = int(self.dims[k])
            L = cholesky_factor(self.kC[k, :p, :p], what=f"kernel covariance at step {k}")
            kL[k, :p, :p] = L
            Li = np.linalg.inv(L)
            kCi[k, :p, :p] = Li.T @ Li
            kld[k] = _logdet_chol(L)
            if self.gk[k]:
                q = int(self.gq[k])
                Lg = cholesky_factor(self.gC[k, :q, :q], what=f"potential covariance at step {k}")
                Lgi = np.linalg.inv(Lg)
                gCi[k, :q, :q] = Lgi.T @ Lgi
                gld[k] = _logdet_chol(Lg)
        for name, arr in (("kCi", kCi), ("kld", kld), ("kL", kL), ("gCi", gCi), ("gld", gld)):
            object.__setattr__(self, name, arr)

    @property
    def T(self):
        return int(self.dims.shape[0])

    @property
    def d(self):
        return int(self.kC.shape[1]) if self.kC.ndim == 3 and self.kC.shape[0] else int(self.flow[0].shape[0])

    @property
    def kern(self):
        return (self.dims, self.const_mean, self.kQ, self.ko, self.kR, self.kr)

    @property
    def pot(self):
        return (self.gk, self.gq, self.gQ, self.go, self.gH, self.gy, self.gCi, self.gld, self.gc)

    def kernel_mean(self, k, x_prev):
        """Kernel means of step ``k`` for previous states ``x_prev`` of shape ``(n, dims[k-1])``."""
        p = int(self.dims[k])
        pprev = int(self.dims[k - 1]) if k > 0 else 0
        x_prev = np.atleast_2d(np.asarray(x_prev, dtype=float))
        return _np._kernel_mean(k, _pad(x_prev, self.d), pprev, p, self.flow, self.kern)

    def kernel_covariance(self, k):
        p = int(self.dims[k])
        return self.kC[k, :p, :p]

    def log_potential(self, k, x):
        p = int(self.dims[k])
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return _np._log_potential(k, _pad(x, self.d), p, self.flow, self.pot)

    def kernel_log_density(self, k, x_prev, x):
        m = self.kernel_mean(k, x_prev)
        return _gauss_logpdf(np.atleast_2d(x), m, self.kCi[k], self.kld[k], int(self.dims[k]))


def _pad(x, d):
    if x.shape[1] == d:
        return x
    out = np.zeros((x.shape[0], d))
    out[:, :x.shape[1]] = x
    return out


def _gauss_logpdf(x, m, Ci, ld, p):
    r = x[:, :p] - m[:, :p]
    return -0.5 * np.einsum("ni,ij,nj->n", r, Ci[:p, :p], r) - 0.5 * ld - 0.5 * p * np.log(2 * np.pi)


class _Builder:
    """Accumulates steps of a formulation with padded width ``d``."""

    def __init__(self, d, flow, T):
        self.d, self.flow, self.T = d, flow, T
        z3 = lambda: np.zeros((T, d, d))
        z2 = lambda: np.zeros((T, d))
        self.dims = np.zeros(T, dtype=np.int64)
        self.const_mean = np.zeros(T, dtype=np.bool_)
        self.kQ, self.ko, self.kR, self.kr, self.kC = z3(), z2(), z3(), z2(), z3()
        self.gk = np.zeros(T, dtype=np.int64)
        self.gq = np.zeros(T, dtype=np.int64)
        self.gQ, self.go, self.gH, self.gy, self.gC = z3(), z2(), z3(), z2(), z3()
        self.gc = np.zeros(T)
        self.k = 0

    def step(self, p, cov, *, mean=None, Q=None, o=None, R=None, r=None):
        k = self.k
        d = self.d
        self.dims[k] = p
        self.kC[k, :p, :p] = cov
        if mean is not None:
            self.const_mean[k] = True
            self.kr[k, :p] = mean
        else:
            self.kQ[k] = np.eye(d) if Q is None else _fit(Q, (d, d))
            if o is not None:
                self.ko[k] = o
            self.kR[k, :p] = np.eye(d)[:p] if R is None else R
            if r is not None:
                self.kr[k, :p] = r
        self.k += 1
        return k

    def potential(self, k, y, H, cov, Q=None, o=None):
        q = len(y)
        self.gk[k] = 1
        self.gq[k] = q
        self.gQ[k] = np.eye(self.d) if Q is None else _fit(Q, (self.d, self.d))
        if o is not None:
            self.go[k] = o
        self.gH[k, :q] = H
        self.gy[k, :q] = y
        self.gC[k, :q, :q] = cov

    def build(self, log_offset, description, anchors=None):
        assert self.k == self.T
        return FeynmanKacModel(self.dims, self.flow, self.const_mean, self.kQ, self.ko, self.kR,
                               self.kr, self.kC, self.gk, self.gq, self.gQ, self.go, self.gH,
                               self.gy, self.gC, self.gc, float(log_offset), description, anchors)


def _fit(M, shape):
    out = np.zeros(shape)
    out[:M.shape[0], :M.shape[1]] = M
    return out


def _as_path(path, width):
    path = np.asarray(path, dtype=float)
    if path.ndim == 1:
        path = path[:, None]
    if path.ndim != 2 or path.shape[1] != width:
        raise InvalidInputError(f"data must have shape (M + 1, {width}), got {path.shape}")
    if not np.all(np.isfinite(path)):
        raise InvalidInputError("data contain non-finite values")
    return path


def _log_jacobian(model, h, z, index):
    kind, par, _ = model.flow_arrays(h)
    kind, par = kind[list(index)], par[list(index)]
    terms = np.where(kind == 1, np.log(par) - 1.5 * np.log(par + z * z * (1.0 - par)), 0.0)
    return terms.sum(axis=-1)


def _to_z(model, scheme, delta, x, index):
    """Observed coordinates ``x[:, i]`` (``i`` in ``index``) to z coordinates.

    Returns the transformed values and the per-row log-Jacobian
    ``log |det D Gamma_{delta/2}|`` restricted to ``index``; the flow is
    coordinate-wise so the unobserved coordinates are not needed.
    """
    if scheme is not Scheme.STRANG:
        return x, np.zeros(x.shape[0])
    full = np.zeros((x.shape[0], model.dim))
    full[:, list(index)] = x
    z = model.ode_flow_inverse(delta / 2.0, full)[:, list(index)]
    return z, _log_jacobian(model, delta / 2.0, z, index)


def _phi(flow, z):
    return _np.eval_mean_map(np.atleast_2d(z), *flow)


def full_transition_log_densities(model, scheme, path, delta):
    """``log f(x_k | x_{k-1})`` for ``k = 1..M`` on a fully observed path."""
    scheme = Scheme.parse(scheme)
    path = _as_path(path, model.dim)
    make_kernel(model, scheme, delta)
    z, logjac = _to_z(model, scheme, delta, path, tuple(range(model.dim)))
    flow = mean_flow(model, scheme, delta)
    cov = step_covariance(model, scheme, delta)
    L = cholesky_factor(cov)
    Li = np.linalg.inv(L)
    m = _phi(flow, z[:-1])
    return _gauss_logpdf(z[1:], m, Li.T @ Li, _logdet_chol(L), model.dim) - logjac[1:]


def full_unbridged(model, scheme, path, delta, mu0=None):
    """Exact ``log mu0(x_0) + sum_k log f(x_k | x_{k-1})`` for step ``delta``.

    ``mu0 = None`` is a point mass at ``x_0`` whose term is dropped.
    """
    path = _as_path(path, model.dim)
    total = 0.0 if mu0 is None else float(mu0.log_density(path[0]))
    if path.shape[0] == 1:
        return total
    return total + float(np.sum(full_transition_log_densities(model, scheme, path, delta)))


def bridged_full(model, scheme, path, delta_obs, K):
    """Bridged full formulation: ``K - 1`` latent states per observation interval."""
    scheme = Scheme.parse(scheme)
    if int(K) != K or K < 1:
        raise InvalidInputError(f"bridge count K must be a positive integer, got {K}")
    K = int(K)
    path = _as_path(path, model.dim)
    M, d = path.shape[0] - 1, model.dim
    delta = delta_obs / K
    make_kernel(model, scheme, delta)
    flow = mean_flow(model, scheme, delta)
    if K == 1:
        b = _Builder(d, flow, 0)
        return b.build(full_unbridged(model, scheme, path, delta_obs),
                       f"full {scheme.value} unbridged (exact)")
    z, logjac = _to_z(model, scheme, delta, path, tuple(range(d)))
    cov = step_covariance(model, scheme, delta)
    means = _phi(flow, z[:-1])
    b = _Builder(d, flow, M * (K - 1))
    for k in range(1, M + 1):
        last = b.step(d, cov, mean=means[k - 1])
        for _ in range(K - 2):
            last = b.step(d, cov)
        b.potential(last, z[k], np.eye(d), cov)
    return b.build(-float(np.sum(logjac[1:])), f"full {scheme.value} bridged K={K}")


@dataclass(frozen=True)
class LatentPrior:
    """Gaussian ``mu^2(u_0 | v_0)`` over the latent block (z coordinates for Strang)."""

    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def of(cls, prior, p):
        if prior is None:
            return cls(np.zeros(p), np.eye(p))
        if isinstance(prior, cls):
            return prior
        if isinstance(prior, GaussianDensity):
            return cls(prior.mean, prior.covariance)
        mean, cov = prior
        return cls(np.atleast_1d(np.asarray(mean, float)), np.atleast_2d(np.asarray(cov, float)))


def _partial_setup(model, scheme, observed, data, delta_obs, K):
    scheme = Scheme.parse(scheme)
    d = model.dim
    observed = tuple(int(i) for i in observed)
    latent = tuple(i for i in range(d) if i not in observed)
    if not observed or not latent or len(set(observed)) != len(observed) or \
            any(i < 0 or i >= d for i in observed):
        raise InvalidInputError("partial regime needs a strict, nonempty subset of coordinates")
    if int(K) != K or K < 1:
        raise InvalidInputError(f"bridge count K must be a positive integer, got {K}")
    v = _as_path(data, len(observed))
    if v.shape[0] < 2:
        raise InvalidInputError("partial formulations need at least two observations")
    delta = delta_obs / int(K)
    make_kernel(model, scheme, delta)
    vz, logjac = _to_z(model, scheme, delta, v, observed)
    flow = mean_flow(model, scheme, delta)
    C = step_covariance(model, scheme, delta)
    O, L = list(observed), list(latent)
    try:
        B, S = block_conditional(C, O, L)
    except NumericalDegeneracyError as exc:
        raise NumericalDegeneracyError(f"{scheme.value} covariance is degenerate: {exc}", exc.block) from None
    Eo = np.eye(d)[:, O]
    El = np.eye(d)[:, L]
    return dict(scheme=scheme, d=d, q=len(O), p=len(L), v=vz, logjac=logjac, flow=flow, C=C,
                S11=C[np.ix_(O, O)], B=B, S=S, Eo=Eo, El=El, R=El.T - B @ Eo.T, K=int(K))


def partial_unbridged(model, scheme, data, observed, delta_obs, prior=None):
    """Marginal pseudolikelihood of the observed coordinates as an FK model.

    Step ``k`` (``0 <= k < M``) carries the latent block ``u_k``; its
    potential is ``f^1_{k+1}(v_{k+1} | v_k, u_k)``.
    """
    s = _partial_setup(model, scheme, observed, data, delta_obs, 1)
    v, p, d = s["v"], s["p"], s["d"]
    M = v.shape[0] - 1
    prior = LatentPrior.of(prior, p)
    b = _Builder(d, s["flow"], M)
    for k in range(M):
        if k == 0:
            b.step(p, prior.cov, mean=prior.mean)
        else:
            b.step(p, s["S"], Q=s["El"], o=s["Eo"] @ v[k - 1], R=s["R"], r=s["B"] @ v[k])
        b.potential(k, v[k + 1], s["Eo"].T, s["S11"], Q=s["El"], o=s["Eo"] @ v[k])
    return b.build(-float(np.sum(s["logjac"][1:])), f"partial {s['scheme'].value} unbridged",
                   np.arange(M, dtype=np.int64))


def partial_bridged(model, scheme, data, observed, delta_obs, K, prior=None):
    """K-step bridged partial formulation; ``K = 1`` gives :func:`partial_unbridged`."""
    if K == 1:
        return partial_unbridged(model, scheme, data, observed, delta_obs, prior)
    s = _partial_setup(model, scheme, observed, data, delta_obs, K)
    v, p, d = s["v"], s["p"], s["d"]
    M = v.shape[0] - 1
    prior = LatentPrior.of(prior, p)
    C = s["C"]
    b = _Builder(d, s["flow"], M * K)
    anchors = np.full(M * K, -1, dtype=np.int64)
    anchors[0] = 0
    b.step(p, prior.cov, mean=prior.mean)
    for k in range(1, M + 1):
        last = b.step(d, C, Q=s["El"], o=s["Eo"] @ v[k - 1])
        for _ in range(K - 2):
            last = b.step(d, C)
        b.potential(last, v[k], s["Eo"].T, s["S11"])
        if k < M:
            anchors[b.step(p, s["S"], R=s["R"], r=s["B"] @ v[k])] = k
    return b.build(-float(np.sum(s["logjac"][1:])), f"partial {s['scheme'].value} bridged K={K}",
                   anchors)


def latent_coordinate_map(model, scheme, observed, delta_from, delta_to):
    """Map latent blocks between the coordinates of two step sizes.

    Only Strang formulations work in step-dependent ``z`` coordinates; for
    the other schemes the map is the identity.  Relies on the flow acting
    coordinate-wise.
    """
    if Scheme.parse(scheme) is not Scheme.STRANG:
        return lambda u: np.asarray(u, dtype=float)
    L = [i for i in range(model.dim) if i not in set(int(i) for i in observed)]

    def convert(u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        full = np.zeros((u.shape[0], model.dim))
        full[:, L] = u
        x = model.ode_flow(delta_from / 2.0, full)
        return model.ode_flow_inverse(delta_to / 2.0, x)[:, L]

    return convert


def build_formulation(model, scheme, data, observation, prior=None):
    """Dispatch on an :class:`~splitsmc.models.ObservationScheme`."""
    observation.validate(model.dim)
    if observation.regime == "full":
        return bridged_full(model, scheme, data, observation.delta_obs, observation.K)
    return partial_bridged(model, scheme, data, observation.observed, observation.delta_obs,
                           observation.K, prior)


def check_dimensions(fk):
    """Verify that every step reads only the coordinates its predecessor has."""
    d = fk.d
    for k in range(fk.T):
        p = int(fk.dims[k])
        if not 1 <= p <= d:
            raise InvalidInputError(f"step {k} has dimension {p} outside [1, {d}]")
        if k == 0 and not fk.const_mean[0]:
            raise InvalidInputError("the initial kernel must not depend on a previous state")
        if not fk.const_mean[k]:
            pprev = int(fk.dims[k - 1])
            if np.any(fk.kQ[k][:, pprev:]):
                raise InvalidInputError(f"step {k} reads beyond the {pprev} coordinates of step {k - 1}")
            if np.any(fk.kR[k][p:]):
                raise InvalidInputError(f"step {k} writes beyond its {p} coordinates")
        if fk.gk[k] and np.any(fk.gQ[k][:, p:]):
            raise InvalidInputError(f"potential {k} reads beyond the {p} coordinates of its step")
    return True


@dataclass(frozen=True)
class PolicySet:
    """Quadratic log-policies ``x' P x + b' x + c`` for every step, padded."""

    P: np.ndarray
    b: np.ndarray
    c: np.ndarray
    fallback: np.ndarray

    @classmethod
    def unit(cls, T, d):
        return cls(np.zeros((T, d, d)), np.zeros((T, d)), np.zeros(T), np.zeros(T, dtype=np.bool_))

    @classmethod
    def from_policies(cls, policies, fk):
        out = cls.unit(fk.T, fk.d)
        if len(policies) != fk.T:
            raise InvalidInputError(f"need {fk.T} policies, got {len(policies)}")
        for k, pol in enumerate(policies):
            p = int(fk.dims[k])
            if pol.b.size != p:
                raise InvalidInputError(f"policy {k} has dimension {pol.b.size}, step has {p}")
            out.P[k, :p, :p] = pol.P
            out.b[k, :p] = pol.b
            out.c[k] = pol.c
        return out

    @property
    def T(self):
        return int(self.c.shape[0])

    @property
    def n_fallback(self):
        return int(np.count_nonzero(self.fallback))

    def policies(self, dims):
        return [QuadraticLogPolicy(self.P[k, :p, :p], self.b[k, :p], self.c[k]) for k, p in enumerate(dims)]

    def compatible(self, fk):
        return self.P.shape == (fk.T, fk.d, fk.d)


@dataclass(frozen=True, eq=False)
class TwistedModel:
    """A formulation twisted by a :class:`PolicySet`.

    Kernel ``k`` becomes ``N(tA m + tb, tL tL')`` and the twisted
    log-potential is ``log G_k + log M_{k+1}(psi_{k+1}) - phi_k`` with
    ``log M_k(psi_k)(m) = m' nU m + nw' m + nc``; step 0 also carries
    ``log M_0(psi_0)``.
    """

    base: FeynmanKacModel
    policies: PolicySet
    tA: np.ndarray
    tb: np.ndarray
    tL: np.ndarray
    nU: np.ndarray
    nw: np.ndarray
    nc: np.ndarray

    @property
    def tw(self):
        p = self.policies
        return (self.tA, self.tb, self.tL, self.nU, self.nw, self.nc, p.P, p.b, p.c)

    @property
    def T(self):
        return self.base.T

    def kernel_mean(self, k, x_prev):
        p = int(self.base.dims[k])
        m = self.base.kernel_mean(k, x_prev)[:, :p]
        return m @ self.tA[k, :p, :p].T + self.tb[k, :p]

    def kernel_covariance(self, k):
        p = int(self.base.dims[k])
        L = self.tL[k, :p, :p]
        return L @ L.T

    def log_normalizer(self, k, m):
        p = int(self.base.dims[k])
        return _np._quadratic(self.nU[k], self.nw[k], self.nc[k], np.atleast_2d(m), p)

    def log_potential(self, k, x):
        base = self.base
        p = int(base.dims[k])
        x = np.atleast_2d(np.asarray(x, dtype=float))
        pol = self.policies
        out = base.log_potential(k, x) - _np._quadratic(pol.P[k], pol.b[k], pol.c[k], x, p)
        if k == 0:
            out = out + self.log_normalizer(0, base.kr[0:1])[0]
        if k + 1 < base.T:
            out = out + self.log_normalizer(k + 1, base.kernel_mean(k + 1, x))
        return out

    def kernel_log_density(self, k, x_prev, x):
        p = int(self.base.dims[k])
        m = self.kernel_mean(k, x_prev)
        L = self.tL[k, :p, :p]
        Li = np.linalg.inv(L)
        return _gauss_logpdf(np.atleast_2d(x), m, Li.T @ Li, _logdet_chol(L), p)


def _twist_buffers(fk):
    T, d = fk.T, fk.d
    return (np.zeros((T, d, d)), np.zeros((T, d)), np.zeros((T, d, d)), np.zeros((T, d, d)),
            np.zeros((T, d)), np.zeros(T))


def twist(base, policies=None):
    """Twist ``base`` by ``policies`` (a :class:`PolicySet`, a list of
    :class:`QuadraticLogPolicy`, or ``None`` for unit policies)."""
    if policies is None:
        policies = PolicySet.unit(base.T, base.d)
    elif not isinstance(policies, PolicySet):
        policies = PolicySet.from_policies(list(policies), base)
    if not policies.compatible(base):
        raise InvalidInputError("policy set does not match the formulation's shape")
    bufs = _twist_buffers(base)
    bad = _accel.twist_steps(base.dims, base.kCi, base.kld, base.kL,
                             policies.P, policies.b, policies.c, *bufs)
    if bad >= 0:
        raise PolicyDegeneracyError(f"policy at step {bad} makes C^-1 - 2P non positive definite", step=int(bad))
    return TwistedModel(base, policies, *bufs)


def quadrature_log_normalizer(model, lo=-30.0, hi=30.0, n=4001):
    """Log-normalizer of a formulation with one-dimensional states by quadrature.

    Runs the forward recursion ``alpha_k(x') = int alpha_{k-1}(x) M_k(x, x') G_k(x') dx``
    on a uniform grid (trapezoid rule).  Works for base and twisted models.
    """
    base = model.base if isinstance(model, TwistedModel) else model
    if base.T == 0:
        return base.log_offset
    if np.any(base.dims != 1):
        raise InvalidInputError("quadrature oracle needs one-dimensional states")
    x = np.linspace(lo, hi, n)
    logw = np.log(np.full(n, (hi - lo) / (n - 1)))
    logw[[0, -1]] -= np.log(2.0)
    X = x[:, None]
    prior_mean = model.kernel_mean(0, np.zeros((1, 1)))
    var0 = model.kernel_covariance(0)[0, 0]
    la = (-0.5 * (x - prior_mean[0, 0]) ** 2 / var0 - 0.5 * np.log(2 * np.pi * var0)
          + model.log_potential(0, X))
    for k in range(1, base.T):
        m = model.kernel_mean(k, X)[:, 0]
        var = model.kernel_covariance(k)[0, 0]
        lk = -0.5 * (x[None, :] - m[:, None]) ** 2 / var - 0.5 * np.log(2 * np.pi * var)
        la = scipy.special.logsumexp((la + logw)[:, None] + lk, axis=0) + model.log_potential(k, X)
    return float(scipy.special.logsumexp(la + logw)) + base.log_offset
