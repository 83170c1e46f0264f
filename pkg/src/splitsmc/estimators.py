"""Parameter inference on top of cSMC likelihood estimates: SPSA and PMMH.

Objectives and likelihoods are callables ``f(theta, rng) -> float`` taking
log-scale parameters.  SPSA calls every measurement of one iteration with a
generator seeded identically (common random numbers).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import EstimatorAbort, InvalidInputError, SplitSMCError
from .feynman_kac import (build_formulation, latent_coordinate_map, partial_unbridged,
                          twist)
from .smc import RIDGE, bpf, coarse_policies, csmc

log = logging.getLogger(__name__)

__all__ = ["SpsaConfig", "SpsaResult", "spsa_gradient", "spsa_maximize", "spsa_initialize_bridged",
           "bridging_overhead", "PmmhState", "PmmhResult", "pmmh", "gaussian_log_prior",
           "CsmcLikelihood"]


@dataclass(frozen=True)
class SpsaConfig:
    """Gain and perturbation sequences of SPSA.

    ``a_k = a / (k + 1 + A)**alpha`` and ``c_k = c / (k + 1)**gamma``.  With
    ``A = None`` the stability constant is 10% of ``n_iter``.  ``scaling``
    is ``"identity"`` (plain SPSA, 2 measurements) or ``"adaptive"``
    (diagonal second-order scaling plus a blocking check, 5 measurements).
    """

    a: float = 1.0
    c: float = 0.1
    n_iter: int = 200
    A: float | None = None
    alpha: float = 0.602
    gamma: float = 0.101
    scaling: str = "identity"
    hessian_clip: tuple = (1e-4, 1e4)
    block_tol: float = 1.0
    max_step: float | None = None

    def __post_init__(self):
        if not (self.a > 0 and self.c > 0):
            raise InvalidInputError("SPSA needs a > 0 and c > 0")
        if int(self.n_iter) != self.n_iter or self.n_iter < 0:
            raise InvalidInputError("n_iter must be a non-negative integer")
        if self.scaling not in ("identity", "adaptive"):
            raise InvalidInputError(f"scaling must be 'identity' or 'adaptive', got {self.scaling!r}")
        lo, hi = self.hessian_clip
        if not 0 < lo <= hi:
            raise InvalidInputError("hessian_clip must satisfy 0 < lo <= hi")
        if self.A is not None and self.A < 0:
            raise InvalidInputError("stability constant A must be non-negative")

    @property
    def stability(self):
        return 0.1 * self.n_iter if self.A is None else float(self.A)

    def gain(self, k):
        return self.a / (k + 1 + self.stability) ** self.alpha

    def perturbation(self, k):
        return self.c / (k + 1) ** self.gamma


@dataclass(frozen=True)
class SpsaResult:
    theta: np.ndarray
    trace: np.ndarray
    values: np.ndarray
    n_measurements: int
    n_blocked: int = 0
    hessian: np.ndarray | None = None


def _rademacher(rng, p):
    return rng.integers(0, 2, size=p) * 2.0 - 1.0


def _measure(objective, theta, seed):
    return float(objective(theta, np.random.default_rng(seed)))


def spsa_gradient(objective, theta, c, rng):
    """One simultaneous-perturbation gradient estimate ``(y+ - y-) / (2 c Delta)``."""
    theta = np.asarray(theta, dtype=float)
    delta = _rademacher(rng, theta.size)
    seed = int(rng.integers(2**63))
    yp = _measure(objective, theta + c * delta, seed)
    ym = _measure(objective, theta - c * delta, seed)
    return (yp - ym) / (2.0 * c * delta)


def spsa_maximize(objective, theta0, config, rng, callback=None):
    """Maximize a noisy objective by (adaptive) SPSA, ascending.

    A non-finite measurement triggers one retry with fresh perturbations and
    randomness; a second failure raises :class:`EstimatorAbort`.  In
    adaptive mode a candidate whose measured value falls more than
    ``block_tol`` below the mean of ``y+`` and ``y-`` is rejected.
    """
    theta = np.array(theta0, dtype=float).reshape(-1)
    p = theta.size
    adaptive = config.scaling == "adaptive"
    trace = [theta.copy()]
    values = []
    hbar = np.zeros(p)
    n_meas = n_blocked = 0
    lo, hi = config.hessian_clip
    for k in range(int(config.n_iter)):
        ck, ak = config.perturbation(k), config.gain(k)
        for attempt in range(2):
            delta = _rademacher(rng, p)
            tilde = _rademacher(rng, p) if adaptive else None
            seed = int(rng.integers(2**63))
            points = [theta + ck * delta, theta - ck * delta]
            if adaptive:
                points += [points[0] + ck * tilde, points[1] + ck * tilde]
            ys = np.array([_measure(objective, x, seed) for x in points])
            n_meas += len(points)
            if np.all(np.isfinite(ys)):
                break
            if attempt:
                raise EstimatorAbort(f"non-finite SPSA measurement at iteration {k}, theta={theta.tolist()}, "
                                     f"values={ys.tolist()}")
            log.warning("non-finite SPSA measurement at iteration %d; retrying", k)
        g = (ys[0] - ys[1]) / (2.0 * ck * delta)
        if adaptive:
            dG = (ys[2] - ys[0]) / (ck * tilde) - (ys[3] - ys[1]) / (ck * tilde)
            hbar = (k * hbar + dG / (2.0 * ck * delta)) / (k + 1)
            step = ak * g / np.clip(np.abs(hbar), lo, hi)
        else:
            step = ak * g
        if config.max_step is not None:
            step = np.clip(step, -config.max_step, config.max_step)
        candidate = theta + step
        if adaptive:
            y_new = _measure(objective, candidate, seed)
            n_meas += 1
            if not (np.isfinite(y_new) and y_new >= 0.5 * (ys[0] + ys[1]) - config.block_tol):
                candidate = theta
                n_blocked += 1
        theta = candidate
        trace.append(theta.copy())
        values.append(0.5 * (ys[0] + ys[1]))
        if callback is not None:
            callback(k, theta, values[-1])
    return SpsaResult(theta, np.array(trace), np.array(values), n_meas, n_blocked,
                      hbar if adaptive else None)


def bridging_overhead(K):
    """Relative cost of starting a K-bridge SPSA from a half-particle unbridged run."""
    if int(K) != K or K < 1:
        raise InvalidInputError(f"K must be a positive integer, got {K}")
    return 1.0 if K == 1 else 1.0 + 1.0 / (2.0 * K)


def spsa_initialize_bridged(unbridged_objective, theta0, config, rng, K):
    """Starting point for a K-bridge SPSA run.

    ``unbridged_objective`` should use half the particles of the bridged
    run.  For ``K = 1`` nothing is run and ``theta0`` is returned.
    """
    if bridging_overhead(K) == 1.0:
        return np.array(theta0, dtype=float)
    return spsa_maximize(unbridged_objective, theta0, config, rng).theta


def gaussian_log_prior(mean=0.0, sd=1.0):
    """Independent normal prior on the log-scale parameters."""
    mean, sd = np.asarray(mean, dtype=float), np.asarray(sd, dtype=float)
    if np.any(sd <= 0):
        raise InvalidInputError("prior standard deviations must be positive")

    def log_prior(theta):
        z = (np.asarray(theta, dtype=float) - mean) / sd
        return float(np.sum(-0.5 * z * z - np.log(sd) - 0.5 * np.log(2 * np.pi)))

    return log_prior


@dataclass
class PmmhState:
    theta: np.ndarray
    log_Z: float
    log_prior: float

    @property
    def log_target(self):
        return self.log_Z + self.log_prior


@dataclass(frozen=True)
class PmmhResult:
    chain: np.ndarray
    log_Z: np.ndarray
    accepted: np.ndarray
    n_failures: int

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accepted)) if self.accepted.size else float("nan")


def pmmh(log_prior, proposal_sd, theta0, log_likelihood, n_iters, rng):
    """Pseudo-marginal random-walk Metropolis-Hastings on log-scale parameters.

    The likelihood estimate of the current state is stored and reused; only
    proposals are estimated afresh.  A proposal whose estimator fails (raises
    or returns NaN) is rejected and counted.
    """
    theta0 = np.array(theta0, dtype=float).reshape(-1)
    sd = np.broadcast_to(np.asarray(proposal_sd, dtype=float), theta0.shape)
    if np.any(sd <= 0):
        raise InvalidInputError("proposal standard deviations must be positive")
    if int(n_iters) != n_iters or n_iters < 0:
        raise InvalidInputError("n_iters must be a non-negative integer")
    lz0 = float(log_likelihood(theta0, rng))
    lp0 = float(log_prior(theta0))
    if not (np.isfinite(lz0) and np.isfinite(lp0)):
        raise EstimatorAbort(f"initial log-likelihood {lz0} or log-prior {lp0} is not finite")
    state = PmmhState(theta0, lz0, lp0)
    n = int(n_iters)
    chain = np.empty((n, theta0.size))
    lzs = np.empty(n)
    acc = np.zeros(n, dtype=bool)
    failures = 0
    for i in range(n):
        prop = state.theta + sd * rng.standard_normal(theta0.size)
        lp = float(log_prior(prop))
        lz = -np.inf
        if np.isfinite(lp):
            try:
                lz = float(log_likelihood(prop, rng))
            except SplitSMCError as exc:
                log.warning("likelihood estimator failed at %s: %s", prop.tolist(), exc)
                lz = float("nan")
            if np.isnan(lz):
                failures += 1
                lz = -np.inf
        if np.log(rng.random()) < lz + lp - state.log_target:
            state = PmmhState(prop, lz, lp)
            acc[i] = True
        chain[i] = state.theta
        lzs[i] = state.log_Z
    return PmmhResult(chain, lzs, acc, failures)


class CsmcLikelihood:
    """``theta -> log Z-hat`` for a parametric family and an observed path.

    ``method`` is ``"csmc"`` or ``"bpf"``.  Bridged partial formulations are
    started from coarse policies learned on the unbridged formulation; with
    ``warm_start`` the policies of the previous call are tried first.
    Parameters where the model or formulation cannot be built, or the
    filter collapses, give ``-inf``.
    """

    def __init__(self, family, scheme, observation, data, N=20, method="csmc", max_iters=10,
                 tol=1e-2, warm_start=False, coarse=True, N_design=200, prior=None, ridge=RIDGE):
        if method not in ("csmc", "bpf"):
            raise InvalidInputError(f"method must be 'csmc' or 'bpf', got {method!r}")
        self.family, self.scheme, self.observation = family, scheme, observation
        self.data = np.asarray(data, dtype=float)
        self.N, self.method, self.max_iters, self.tol = int(N), method, max_iters, tol
        self.warm_start, self.coarse, self.N_design = warm_start, coarse, N_design
        self.prior, self.ridge = prior, ridge
        self.last_report = None
        self.last_error = None
        self.n_failures = 0
        self._policies = None

    @property
    def needs_coarse(self):
        obs = self.observation
        return self.coarse and obs.regime == "partial" and obs.K > 1

    def _initial(self, model, fk, rng):
        if self.warm_start and self._policies is not None and self._policies.compatible(fk):
            try:
                twist(fk, self._policies)
                return self._policies
            except SplitSMCError:
                pass
        if not self.needs_coarse:
            return None
        obs = self.observation
        ub = partial_unbridged(model, self.scheme, self.data, obs.observed, obs.delta_obs, self.prior)
        to_fine = latent_coordinate_map(model, self.scheme, obs.observed, obs.delta_obs, obs.delta)
        return coarse_policies(fk, ub, rng, N_coarse=self.N, N_design=self.N_design, to_fine=to_fine,
                               ridge=self.ridge, max_iters=self.max_iters, tol=self.tol)

    def __call__(self, theta, rng):
        self.last_error = None
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.family.size,):
            raise InvalidInputError(f"expected {self.family.size} log-parameters, got shape {theta.shape}")
        try:
            model = self.family(theta)
            fk = build_formulation(model, self.scheme, self.data, self.observation, self.prior)
            if self.method == "bpf":
                return float(bpf(fk, self.N, rng))
            rep = csmc(fk, self.N, rng, self.max_iters, self.tol, self._initial(model, fk, rng), self.ridge)
        except SplitSMCError as exc:
            self.last_error = exc
            self.n_failures += 1
            return -np.inf
        self.last_report = rep
        if self.warm_start:
            self._policies = rep.final_policies
        return float(rep.log_Z)

    def reset(self):
        self._policies = None

