"""Pure-numpy kernels mirroring :mod:`splitsmc._accel._jit`.

Loops over time stay in Python; work inside a step is vectorized over
particles.  See the numba module for the array conventions.
"""

import numpy as np

LOG2PI = np.log(2.0 * np.pi)


def eval_coordinate_flow(z, kind, par, shift):
    z = np.asarray(z, dtype=float)
    out = z + shift
    cub = kind == 1
    if cub.any():
        zc = z[..., cub]
        a = par[cub]
        out[..., cub] = zc / np.sqrt(a + zc * zc * (1.0 - a))
    drf = kind == 2
    if drf.any():
        zd = z[..., drf]
        out[..., drf] = par[drf] * (zd - zd ** 3) + shift[drf]
    return out


def eval_mean_map(z, lin, nl, kind, par, shift):
    z = np.asarray(z, dtype=float)
    return z @ lin.T + eval_coordinate_flow(z, kind, par, shift) @ nl.T


def _kernel_mean(k, x, pprev, p, flow, kern):
    dims, const_mean, kQ, ko, kR, kr = kern
    if const_mean[k]:
        return np.broadcast_to(kr[k, :p], (x.shape[0], p)).copy()
    full = x[:, :pprev] @ kQ[k, :, :pprev].T + ko[k]
    h = eval_mean_map(full, *flow)
    return h @ kR[k, :p].T + kr[k, :p]


def _log_potential(k, x, p, flow, pot):
    gk, gq, gQ, go, gH, gy, gCi, gld, gc = pot
    if gk[k] == 0:
        return np.full(x.shape[0], gc[k])
    q = gq[k]
    full = x[:, :p] @ gQ[k, :, :p].T + go[k]
    h = eval_mean_map(full, *flow)
    r = gy[k, :q] - h @ gH[k, :q].T
    quad = np.einsum("ni,ij,nj->n", r, gCi[k, :q, :q], r)
    return gc[k] - 0.5 * quad - 0.5 * gld[k] - 0.5 * q * LOG2PI


def _quadratic(M, v, c, x, p):
    x = x[:, :p]
    return np.einsum("ni,ij,nj->n", x, M[:p, :p], x) + x @ v[:p] + c


def _logsumexp(a):
    m = np.max(a)
    if not np.isfinite(m):
        return m
    return m + np.log(np.sum(np.exp(a - m)))


def pf_run(flow, kern, pot, tw, eps, unif, X, anc, logw, loginc, resampled):
    dims, const_mean, kQ, ko, kR, kr = kern
    tA, tb, tL, nU, nw, nc, pP, pb, pc = tw
    T, N = unif.shape
    logN = np.log(N)
    logW = np.full(N, -logN)
    ident = np.arange(N)
    for k in range(T):
        p = dims[k]
        if k == 0:
            anc[0] = ident
            logWhat = np.full(N, -logN)
            prev = X[0]
            pprev = 0
        else:
            W = np.exp(logW)
            if 1.0 / np.sum(W * W) <= N / 2.0:
                resampled[k] = True
                cum = np.cumsum(W)
                cum /= cum[-1]
                cum[-1] = 1.0
                anc[k] = np.minimum(np.searchsorted(cum, unif[k]), N - 1)
                logWhat = np.full(N, -logN)
            else:
                anc[k] = ident
                logWhat = logW
            prev = X[k - 1][anc[k]]
            pprev = dims[k - 1]
        m = _kernel_mean(k, prev, pprev, p, flow, kern)
        x = m @ tA[k, :p, :p].T + tb[k, :p] + eps[k, :, :p] @ tL[k, :p, :p].T
        X[k, :, :p] = x
        lw = _log_potential(k, X[k], p, flow, pot) - _quadratic(pP[k], pb[k], pc[k], X[k], p)
        if k == 0:
            lw = lw + _quadratic(nU[0], nw[0], nc[0], kr[0:1], p)[0]
        if k + 1 < T:
            p2 = dims[k + 1]
            m2 = _kernel_mean(k + 1, X[k], p, p2, flow, kern)
            lw = lw + _quadratic(nU[k + 1], nw[k + 1], nc[k + 1], m2, p2)
        lw = np.where(np.isfinite(lw), lw, -np.inf)
        logw[k] = lw
        a = logWhat + lw
        inc = _logsumexp(a)
        loginc[k] = inc
        if not np.isfinite(inc):
            return k
        logW = a - inc
    return -1


def _twist_one(k, p, P, b, c, Ci, ld, kL, tA, tb, tL, nU, nw, nc):
    P = P[:p, :p]
    b = b[:p]
    if c == 0.0 and not P.any() and not b.any():
        tA[k, :p, :p] = np.eye(p)
        tb[k, :p] = 0.0
        tL[k, :p, :p] = kL[:p, :p]
        nU[k, :p, :p] = 0.0
        nw[k, :p] = 0.0
        nc[k] = 0.0
        return True
    Ci = Ci[:p, :p]
    lam = Ci - 2.0 * P
    try:
        L = np.linalg.cholesky(lam)
    except np.linalg.LinAlgError:
        return False
    Li = np.linalg.inv(L)
    S = Li.T @ Li
    S = 0.5 * (S + S.T)
    try:
        Lt = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return False
    Sb = S @ b
    CSC = Ci @ S @ Ci
    tA[k, :p, :p] = S @ Ci
    tb[k, :p] = Sb
    tL[k, :p, :p] = Lt
    nU[k, :p, :p] = 0.5 * (0.5 * (CSC + CSC.T) - Ci)
    nw[k, :p] = Ci @ Sb
    nc[k] = c + 0.5 * b @ Sb - 0.5 * ld - np.sum(np.log(np.diag(L)))
    return True


def twist_steps(dims, kCi, kld, kL, pP, pb, pc, tA, tb, tL, nU, nw, nc):
    for k in range(dims.shape[0]):
        if not _twist_one(k, dims[k], pP[k], pb[k], pc[k], kCi[k], kld[k], kL[k],
                          tA, tb, tL, nU, nw, nc):
            return k
    return -1


def _fit_quadratic(Xk, xi, valid, p, ridge):
    nf = 1 + p + p * (p + 1) // 2
    x = Xk[valid, :p]
    y = xi[valid]
    if x.shape[0] < nf:
        return None
    mu = x.mean(axis=0)
    sd = np.sqrt(np.mean((x - mu) ** 2, axis=0))
    if not np.all(sd > 1e-12 * (1.0 + np.abs(mu))):
        return None
    xt = (x - mu) / sd
    iu, ju = np.triu_indices(p)
    F = np.concatenate([np.ones((x.shape[0], 1)), xt, xt[:, iu] * xt[:, ju]], axis=1)
    ybar = y.mean()
    G = F.T @ F / x.shape[0]
    rhs = F.T @ (y - ybar) / x.shape[0]
    G[np.arange(1, nf), np.arange(1, nf)] += ridge
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return None
    if np.any(np.diag(L) ** 2 < 1e-6 * np.diag(G)):
        return None
    beta = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    Pt = np.zeros((p, p))
    coef = beta[1 + p:]
    Pt[iu, ju] = np.where(iu == ju, coef, 0.5 * coef)
    Pt[ju, iu] = Pt[iu, ju]
    P = Pt / np.outer(sd, sd)
    bl = beta[1:1 + p]
    b = bl / sd - 2.0 * P @ mu
    c = beta[0] + ybar - np.sum(bl * mu / sd) + mu @ P @ mu
    return P, b, c


def fit_backward(flow, kern, pot, kCi, kld, kL, X, ridge, pP, pb, pc, fallback,
                 tA, tb, tL, nU, nw, nc):
    dims = kern[0]
    T = X.shape[0]
    for k in range(T - 1, -1, -1):
        p = dims[k]
        xi = _log_potential(k, X[k], p, flow, pot)
        if k + 1 < T:
            p2 = dims[k + 1]
            m2 = _kernel_mean(k + 1, X[k], p, p2, flow, kern)
            xi = xi + _quadratic(nU[k + 1], nw[k + 1], nc[k + 1], m2, p2)
        fit = _fit_quadratic(X[k], xi, np.isfinite(xi), p, ridge)
        ok = fit is not None
        if ok:
            pP[k, :p, :p], pb[k, :p], pc[k] = fit
            ok = _twist_one(k, p, pP[k], pb[k], pc[k], kCi[k], kld[k], kL[k],
                            tA, tb, tL, nU, nw, nc)
        if not ok:
            fallback[k] = True
            pP[k] = 0.0
            pb[k] = 0.0
            pc[k] = 0.0
            _twist_one(k, p, pP[k], pb[k], pc[k], kCi[k], kld[k], kL[k],
                       tA, tb, tL, nU, nw, nc)


def simulate_steps(x, pre, post, chol, noise, stride, out, out_start, threshold):
    for t in range(noise.shape[0]):
        z = eval_mean_map(x[None, :], *pre)[0] + chol @ noise[t]
        x[:] = eval_mean_map(z[None, :], *post)[0]
        if not np.all(np.abs(x) <= threshold):
            return t
        step = out_start + t + 1
        if step % stride == 0:
            out[step // stride] = x
    return -1
