"""Particle filter for twisted models, policy regression and the cSMC loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import InvalidInputError, ParticleCollapseError
from .feynman_kac import FeynmanKacModel, PolicySet, TwistedModel, _twist_buffers, twist

RIDGE = 1e-8


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Particles of every step with their incremental log-weights.

    ``log_weights[k]`` are the unnormalized incremental weights of step ``k``
    and ``ancestors[k]`` the indices of the step ``k - 1`` particles each
    step ``k`` particle was propagated from.
    """

    particles: np.ndarray
    dims: np.ndarray
    log_weights: np.ndarray
    ancestors: np.ndarray
    log_increments: np.ndarray
    resampled: np.ndarray

    @property
    def N(self):
        return int(self.particles.shape[1])

    @property
    def log_Z(self):
        return float(np.sum(self.log_increments))

    def normalized_log_weights(self, k):
        """Log of the normalized weights ``W_k^n`` after step ``k``."""
        logN = np.log(self.N)
        prior = np.full(self.N, -logN)
        for j in range(k + 1):
            if j > 0 and not self.resampled[j]:
                prior = cur
            elif j > 0:
                prior = np.full(self.N, -logN)
            cur = prior + self.log_weights[j] - self.log_increments[j]
        return cur

    def weights(self, k):
        return np.exp(self.normalized_log_weights(k))

    def ess(self, k):
        w = self.weights(k)
        return float(1.0 / np.sum(w * w))

    def states(self, k):
        return self.particles[k, :, :int(self.dims[k])]


@dataclass(frozen=True, eq=False)
class FilterResult:
    log_Z: float
    ensemble: ParticleEnsemble


def _as_twisted(model):
    if isinstance(model, TwistedModel):
        return model
    if isinstance(model, FeynmanKacModel):
        return twist(model)
    raise InvalidInputError(f"expected a Feynman-Kac model, got {type(model).__name__}")


def particle_filter(model, N, rng):
    """Run the particle filter (adaptive multinomial resampling at ESS <= N/2).

    ``model`` is a :class:`FeynmanKacModel` (bootstrap filter) or a
    :class:`TwistedModel`.  Returns the log-normalizer estimate including the
    formulation's ``log_offset``.
    """
    if int(N) != N or N < 2:
        raise InvalidInputError(f"need at least 2 particles, got {N}")
    N = int(N)
    tm = _as_twisted(model)
    base = tm.base
    T, d = base.T, base.d
    eps = rng.standard_normal((T, N, d))
    unif = rng.random((T, N))
    X = np.zeros((T, N, d))
    anc = np.zeros((T, N), dtype=np.int64)
    logw = np.zeros((T, N))
    loginc = np.zeros(T)
    resampled = np.zeros(T, dtype=np.bool_)
    if T:
        bad = _accel.pf_run(base.flow, base.kern, base.pot, tm.tw, eps, unif, X, anc, logw, loginc, resampled)
        if bad >= 0:
            raise ParticleCollapseError(f"all particle weights vanished at step {bad}", step=int(bad))
    ens = ParticleEnsemble(X, base.dims, logw, anc, loginc, resampled)
    return FilterResult(ens.log_Z + base.log_offset, ens)


def fit_policies(ensemble, base, ridge=RIDGE):
    """Backward least-squares fit of quadratic log-policies on stored particles.

    Steps whose design is rank deficient, or whose fitted policy is not
    admissible, fall back to the unit policy and are flagged.
    Returns the fitted :class:`TwistedModel`.
    """
    T, d = base.T, base.d
    pol = PolicySet.unit(T, d)
    bufs = _twist_buffers(base)
    if T:
        _accel.fit_backward(base.flow, base.kern, base.pot, base.kCi, base.kld, base.kL,
                            ensemble.particles, float(ridge), pol.P, pol.b, pol.c, pol.fallback, *bufs)
    return TwistedModel(base, pol, *bufs)


@dataclass(frozen=True, eq=False)
class CsmcReport:
    log_Z: float
    iteration_log_Z: list
    policies: list
    fallback_counts: list
    n_iterations: int
    converged: bool
    final: TwistedModel = field(repr=False)

    @property
    def final_policies(self):
        return self.final.policies


def csmc(base, N, rng, max_iters=10, tol=1e-2, initial=None, ridge=RIDGE):
    """Controlled SMC.

    Iterates filter and policy fit until two successive log-normalizer
    estimates differ by less than ``tol`` or ``max_iters`` filters have run.
    The reported estimate comes from one further filter run with the
    policies used by the last iteration, drawn with fresh randomness.
    ``initial`` optionally warm-starts the first iteration with a policy set.
    """
    if int(max_iters) != max_iters or max_iters < 1:
        raise InvalidInputError("max_iters must be a positive integer")
    if initial is not None and isinstance(initial, PolicySet) and initial.compatible(base):
        try:
            current = twist(base, initial)
        except Exception:
            current = twist(base)
    else:
        current = twist(base)
    estimates, policies, fallbacks = [], [], []
    converged = False
    for it in range(int(max_iters)):
        try:
            res = particle_filter(current, N, rng)
        except ParticleCollapseError as exc:
            if it == 0:
                raise ParticleCollapseError(f"{exc}; increase the number of particles", step=exc.step) from None
            raise
        estimates.append(res.log_Z)
        policies.append(current.policies)
        fallbacks.append(current.policies.n_fallback)
        if it > 0 and abs(estimates[-1] - estimates[-2]) < tol:
            converged = True
            break
        if it + 1 == max_iters:
            break
        current = fit_policies(res.ensemble, base, ridge)
    final = particle_filter(current, N, rng)
    return CsmcReport(final.log_Z, estimates, policies, fallbacks, len(estimates), converged, current)


def bpf(base, N, rng):
    """Bootstrap particle filter estimate of the log-normalizer."""
    return particle_filter(base, N, rng).log_Z


def _anchor_moments(ensemble, anchors):
    J = int(anchors.max()) + 1
    p = int(ensemble.dims[np.flatnonzero(anchors >= 0)[0]])
    mu, sd = np.zeros((J, p)), np.zeros((J, p))
    for k in np.flatnonzero(anchors >= 0):
        w = ensemble.weights(k)[:, None]
        x = ensemble.states(k)
        j = anchors[k]
        mu[j] = np.sum(w * x, axis=0)
        sd[j] = np.sqrt(np.sum(w * (x - mu[j]) ** 2, axis=0))
    return mu, sd


def coarse_policies(fine, coarse, rng, N_coarse=20, N_design=200, spread=0.5, retries=2,
                    to_fine=None, ridge=RIDGE, **csmc_kwargs):
    """Initial policies for a bridged partial formulation from its unbridged counterpart.

    ``coarse`` is solved by cSMC first.  Its twisted particles give, for every
    observation time, a Gaussian summary of the latent block.  The design
    cloud for ``fine`` draws anchor steps from these summaries (standard
    deviations scaled by ``spread``) and fills the bridge steps by running
    the fine kernels forward; the backward regression is then run on that
    cloud.  When some steps fall back, the cloud is redrawn with half the
    spread, at most ``retries`` times, keeping the fit with fewest fallbacks.
    ``to_fine`` maps coarse latent coordinates to fine ones (see
    :func:`~splitsmc.feynman_kac.latent_coordinate_map`).
    """
    if fine.anchors is None or coarse.anchors is None:
        raise InvalidInputError("coarse initialisation needs partial formulations")
    if int(coarse.anchors.max()) < int(fine.anchors.max()):
        raise InvalidInputError("coarse formulation covers fewer observation times than the fine one")
    rep = csmc(coarse, N_coarse, rng, ridge=ridge, **csmc_kwargs)
    mu, sd = _anchor_moments(particle_filter(rep.final, N_coarse, rng).ensemble, coarse.anchors)
    if to_fine is not None:
        mu = to_fine(mu)
    sd = np.maximum(sd, 1e-3 * (1.0 + np.abs(mu)))
    T, d = fine.T, fine.d
    best = None
    for _ in range(int(retries) + 1):
        X = np.zeros((T, N_design, d))
        for k in range(T):
            p = int(fine.dims[k])
            j = fine.anchors[k]
            if j >= 0:
                X[k, :, :p] = mu[j] + spread * sd[j] * rng.standard_normal((N_design, p))
            else:
                mean = fine.kernel_mean(k, X[k - 1, :, :int(fine.dims[k - 1])])
                X[k, :, :p] = mean + rng.standard_normal((N_design, p)) @ fine.kL[k, :p, :p].T
        pol = PolicySet.unit(T, d)
        bufs = _twist_buffers(fine)
        _accel.fit_backward(fine.flow, fine.kern, fine.pot, fine.kCi, fine.kld, fine.kL,
                            X, float(ridge), pol.P, pol.b, pol.c, pol.fallback, *bufs)
        if best is None or pol.n_fallback < best.n_fallback:
            best = pol
        if not best.n_fallback:
            break
        spread *= 0.5
    return best
