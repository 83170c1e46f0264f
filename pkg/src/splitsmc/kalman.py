"""Linear-Gaussian oracles for noise-free partial observations of an OU path.

The state follows ``x_k = F x_{k-1} + w_k``, ``w_k ~ N(0, Q)``, and the
coordinates ``observed`` are recorded exactly at every step.  The initial
state has the observed block fixed at ``v_0`` and the latent block
distributed as ``N(m_u, S_u)``.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError


def _blocks(d, observed):
    O = list(observed)
    L = [i for i in range(d) if i not in O]
    H = np.eye(d)[O]
    return O, L, H


def kalman_log_likelihood(F, Q, v, observed, m_u, S_u):
    """``log p(v_1, ..., v_M | v_0)`` by the prediction-error decomposition."""
    F, Q = np.atleast_2d(F), np.atleast_2d(Q)
    d = F.shape[0]
    O, L, H = _blocks(d, observed)
    v = np.asarray(v, dtype=float).reshape(len(v), len(O))
    m = np.zeros(d)
    P = np.zeros((d, d))
    m[O] = v[0]
    m[L] = m_u
    P[np.ix_(L, L)] = S_u
    total = 0.0
    for k in range(1, v.shape[0]):
        m = F @ m
        P = F @ P @ F.T + Q
        S = H @ P @ H.T
        e = v[k] - H @ m
        Lc = np.linalg.cholesky(S)
        a = np.linalg.solve(Lc, e)
        total += -0.5 * a @ a - np.sum(np.log(np.diag(Lc))) - 0.5 * len(O) * np.log(2 * np.pi)
        G = P @ H.T @ np.linalg.inv(S)
        m = m + G @ e
        P = P - G @ S @ G.T
        P = 0.5 * (P + P.T)
    return float(total)


def _stacked(F, Q, H, k, M):
    # v_{k+1:M} = Lmat x_k + noise, noise ~ N(0, Sig)
    d = F.shape[0]
    n = M - k
    q = H.shape[0]
    Fp = [np.eye(d)]
    for _ in range(n):
        Fp.append(F @ Fp[-1])
    Lmat = np.vstack([H @ Fp[j] for j in range(1, n + 1)])
    Sig = np.zeros((n * q, n * q))
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            acc = np.zeros((d, d))
            for s in range(1, min(i, j) + 1):
                acc += Fp[i - s] @ Q @ Fp[j - s].T
            Sig[(i - 1) * q:i * q, (j - 1) * q:j * q] = H @ acc @ H.T
    return Lmat, Sig


def optimal_log_policy(F, Q, v, observed, k):
    """Coefficients ``(P, b, c)`` of ``log p(v_{k+1:M} | v_k, u_k)`` as a function of ``u_k``.

    Built from the joint Gaussian of the future observations given ``x_k``
    (a batch computation that shares nothing with the backward recursion).
    """
    F, Q = np.atleast_2d(F), np.atleast_2d(Q)
    d = F.shape[0]
    O, L, H = _blocks(d, observed)
    v = np.asarray(v, dtype=float).reshape(len(v), len(O))
    M = v.shape[0] - 1
    if not 0 <= k < M:
        raise InvalidInputError(f"step {k} outside [0, {M - 1}]")
    Lmat, Sig = _stacked(F, Q, H, k, M)
    y = v[k + 1:].reshape(-1)
    Si = np.linalg.inv(Sig)
    Lo, Ll = Lmat[:, O], Lmat[:, L]
    r0 = y - Lo @ v[k]
    P = -0.5 * Ll.T @ Si @ Ll
    b = Ll.T @ Si @ r0
    _, logdet = np.linalg.slogdet(Sig)
    c = -0.5 * r0 @ Si @ r0 - 0.5 * logdet - 0.5 * y.size * np.log(2 * np.pi)
    return 0.5 * (P + P.T), b, float(c)
