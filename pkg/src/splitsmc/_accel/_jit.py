"""Numba-compiled kernels.

Array conventions shared with :mod:`splitsmc._accel._numpy`:

``flow`` is ``(lin, nl, kind, par, shift)`` describing the mean map
``phi(z) = lin @ z + nl @ g(z)`` with ``g`` acting coordinate-wise:

* kind 0: ``g_i = z_i + shift_i``
* kind 1: ``g_i = z_i / sqrt(par_i + z_i**2 * (1 - par_i))``
* kind 2: ``g_i = par_i * (z_i - z_i**3) + shift_i``

``kern`` is ``(dims, const_mean, kQ, ko, kR, kr)``; the mean of kernel ``k``
applied to the previous state ``x`` is ``kR[k] @ phi(kQ[k] @ x + ko[k]) + kr[k]``
(or ``kr[k]`` when ``const_mean[k]``).

``pot`` is ``(gk, gq, gQ, go, gH, gy, gCi, gld, gc)``; for ``gk[k] == 1`` the
log-potential is ``gc[k] + log N(gy[k]; gH[k] @ phi(gQ[k] @ x + go[k]), gC)``
with ``gC`` given through its inverse ``gCi`` and log-determinant ``gld``.

``tw`` is ``(tA, tb, tL, nU, nw, nc, pP, pb, pc)``: twisted mean
``tA @ m + tb``, twisted covariance factor ``tL``, log-normalizer
``m' nU m + nw' m + nc`` and the policy ``x' pP x + pb' x + pc``.
"""

import numpy as np
from numba import njit

LOG2PI = np.log(2.0 * np.pi)


@njit(cache=True, inline="always")
def _coord(zi, kind, par, shift):
    if kind == 0:
        return zi + shift
    if kind == 1:
        return zi / np.sqrt(par + zi * zi * (1.0 - par))
    return par * (zi - zi * zi * zi) + shift


@njit(cache=True, inline="always")
def _phi(z, out, g, lin, nl, kind, par, shift):
    d = z.shape[0]
    for i in range(d):
        g[i] = _coord(z[i], kind[i], par[i], shift[i])
    for i in range(d):
        s = 0.0
        for j in range(d):
            s += lin[i, j] * z[j] + nl[i, j] * g[j]
        out[i] = s


@njit(cache=True)
def _phi_rows(Z, out, n, lin, nl, kind, par, shift, g):
    # out[r] = phi(Z[r]) for r < n; rows are indexed directly so that no
    # per-row array views (and their reference counting) are created
    d = Z.shape[1]
    for r in range(n):
        for i in range(d):
            g[i] = _coord(Z[r, i], kind[i], par[i], shift[i])
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += lin[i, j] * Z[r, j] + nl[i, j] * g[j]
            out[r, i] = s


@njit(cache=True)
def eval_mean_map(z, lin, nl, kind, par, shift):
    """Apply the mean map row-wise to an ``(n, d)`` array."""
    n, d = z.shape
    out = np.empty((n, d))
    _phi_rows(z, out, n, lin, nl, kind, par, shift, np.empty(d))
    return out


@njit(cache=True)
def eval_coordinate_flow(z, kind, par, shift):
    n, d = z.shape
    out = np.empty((n, d))
    for r in range(n):
        for i in range(d):
            out[r, i] = _coord(z[r, i], kind[i], par[i], shift[i])
    return out


@njit(cache=True)
def _kernel_means(k, Xprev, idx, pprev, p, flow, kern, full, h, g, out):
    """Mean of kernel ``k`` from the rows ``Xprev[idx[n]]`` into ``out[n]``."""
    lin, nl, kind, par, shift = flow
    dims, const_mean, kQ, ko, kR, kr = kern
    N = idx.shape[0]
    d = full.shape[1]
    if const_mean[k]:
        for n in range(N):
            for i in range(p):
                out[n, i] = kr[k, i]
        return
    for n in range(N):
        a = idx[n]
        for i in range(d):
            s = ko[k, i]
            for j in range(pprev):
                s += kQ[k, i, j] * Xprev[a, j]
            full[n, i] = s
    _phi_rows(full, h, N, lin, nl, kind, par, shift, g)
    for n in range(N):
        for i in range(p):
            s = kr[k, i]
            for j in range(d):
                s += kR[k, i, j] * h[n, j]
            out[n, i] = s


@njit(cache=True)
def _log_potentials(k, Xk, p, flow, pot, full, h, g, r, out):
    """Log-potential of step ``k`` at every row of ``Xk``, written to ``out``."""
    lin, nl, kind, par, shift = flow
    gk, gq, gQ, go, gH, gy, gCi, gld, gc = pot
    N = out.shape[0]
    if gk[k] == 0:
        for n in range(N):
            out[n] = gc[k]
        return
    d = full.shape[1]
    for n in range(N):
        for i in range(d):
            s = go[k, i]
            for j in range(p):
                s += gQ[k, i, j] * Xk[n, j]
            full[n, i] = s
    _phi_rows(full, h, N, lin, nl, kind, par, shift, g)
    q = gq[k]
    for n in range(N):
        for i in range(q):
            s = gy[k, i]
            for j in range(d):
                s -= gH[k, i, j] * h[n, j]
            r[i] = s
        quad = 0.0
        for i in range(q):
            for j in range(q):
                quad += r[i] * gCi[k, i, j] * r[j]
        out[n] = gc[k] - 0.5 * quad - 0.5 * gld[k] - 0.5 * q * LOG2PI


@njit(cache=True, inline="always")
def _quadratic(M, v, c, x, p):
    s = c
    for i in range(p):
        s += v[i] * x[i]
        for j in range(p):
            s += x[i] * M[i, j] * x[j]
    return s


@njit(cache=True)
def _quadratic_rows(M, v, c, Y, p, out, sign):
    """``out[n] += sign * (Y[n]' M Y[n] + v' Y[n] + c)``."""
    for n in range(out.shape[0]):
        s = c
        for i in range(p):
            s += v[i] * Y[n, i]
            for j in range(p):
                s += Y[n, i] * M[i, j] * Y[n, j]
        out[n] += sign * s


@njit(cache=True)
def _logsumexp(a):
    m = -np.inf
    for v in a:
        if v > m:
            m = v
    if not np.isfinite(m):
        return m
    s = 0.0
    for v in a:
        s += np.exp(v - m)
    return m + np.log(s)


@njit(cache=True)
def pf_run(flow, kern, pot, tw, eps, unif, X, anc, logw, loginc, resampled):
    """Run the twisted particle filter in place; return ``-1`` or the failing step."""
    dims, const_mean, kQ, ko, kR, kr = kern
    tA, tb, tL, nU, nw, nc, pP, pb, pc = tw
    T, N = unif.shape
    d = X.shape[2]
    full = np.empty((N, d))
    h = np.empty((N, d))
    m = np.empty((N, d))
    g = np.empty(d)
    r = np.empty(d)
    mt = np.empty(d)
    logW = np.full(N, -np.log(N))
    logWhat = np.empty(N)
    cum = np.empty(N)
    ident = np.arange(N)
    for k in range(T):
        p = dims[k]
        pprev = dims[k - 1] if k > 0 else 0
        if k == 0:
            for n in range(N):
                anc[k, n] = n
                logWhat[n] = -np.log(N)
        else:
            s2 = 0.0
            for n in range(N):
                s2 += np.exp(2.0 * logW[n])
            if 1.0 / s2 <= N / 2.0:
                resampled[k] = True
                acc = 0.0
                for n in range(N):
                    acc += np.exp(logW[n])
                    cum[n] = acc
                for n in range(N):
                    cum[n] /= acc
                cum[N - 1] = 1.0
                for n in range(N):
                    a = np.searchsorted(cum, unif[k, n])
                    anc[k, n] = min(a, N - 1)
                    logWhat[n] = -np.log(N)
            else:
                for n in range(N):
                    anc[k, n] = n
                    logWhat[n] = logW[n]
        _kernel_means(k, X[k - 1 if k > 0 else 0], anc[k], pprev, p, flow, kern, full, h, g, m)
        Xk = X[k]
        for n in range(N):
            for i in range(p):
                s = tb[k, i]
                for j in range(p):
                    s += tA[k, i, j] * m[n, j]
                mt[i] = s
            for i in range(p):
                s = mt[i]
                for j in range(i + 1):
                    s += tL[k, i, j] * eps[k, n, j]
                Xk[n, i] = s
        lw = logw[k]
        _log_potentials(k, Xk, p, flow, pot, full, h, g, r, lw)
        _quadratic_rows(pP[k], pb[k], pc[k], Xk, p, lw, -1.0)
        if k == 0:
            const_here = _quadratic(nU[0], nw[0], nc[0], kr[0], p)
            for n in range(N):
                lw[n] += const_here
        if k + 1 < T:
            p2 = dims[k + 1]
            if const_mean[k + 1]:
                const_next = _quadratic(nU[k + 1], nw[k + 1], nc[k + 1], kr[k + 1], p2)
                for n in range(N):
                    lw[n] += const_next
            else:
                _kernel_means(k + 1, Xk, ident, p, p2, flow, kern, full, h, g, m)
                _quadratic_rows(nU[k + 1], nw[k + 1], nc[k + 1], m, p2, lw, 1.0)
        for n in range(N):
            if not np.isfinite(lw[n]):
                lw[n] = -np.inf
            cum[n] = logWhat[n] + lw[n]
        inc = _logsumexp(cum)
        loginc[k] = inc
        if not np.isfinite(inc):
            return k
        for n in range(N):
            logW[n] = cum[n] - inc
    return -1


@njit(cache=True)
def _cholesky(A, n, L):
    """Lower Cholesky factor of ``A[:n, :n]`` into ``L``; False if not PD."""
    for i in range(n):
        for j in range(n):
            L[i, j] = 0.0
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not (s > 0.0):
            return False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    return True


@njit(cache=True)
def _chol_inverse(L, n, out):
    """``(L L')^{-1}`` from a lower Cholesky factor."""
    Li = np.zeros((n, n))
    for i in range(n):
        Li[i, i] = 1.0 / L[i, i]
        for j in range(i):
            s = 0.0
            for k in range(j, i):
                s -= L[i, k] * Li[k, j]
            Li[i, j] = s / L[i, i]
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(max(i, j), n):
                s += Li[k, i] * Li[k, j]
            out[i, j] = s


@njit(cache=True)
def _twist_one(k, p, P, b, c, Ci, ld, kL, tA, tb, tL, nU, nw, nc):
    """Fill the twisted quantities of step ``k``; False if inadmissible."""
    unit = c == 0.0
    for i in range(p):
        if b[i] != 0.0:
            unit = False
        for j in range(p):
            if P[i, j] != 0.0:
                unit = False
    if unit:
        for i in range(p):
            tb[k, i] = 0.0
            nw[k, i] = 0.0
            for j in range(p):
                tA[k, i, j] = 1.0 if i == j else 0.0
                tL[k, i, j] = kL[i, j]
                nU[k, i, j] = 0.0
        nc[k] = 0.0
        return True
    Lam = np.empty((p, p))
    for i in range(p):
        for j in range(p):
            Lam[i, j] = Ci[i, j] - 2.0 * P[i, j]
    L = np.empty((p, p))
    if not _cholesky(Lam, p, L):
        return False
    S = np.empty((p, p))
    _chol_inverse(L, p, S)
    for i in range(p):
        for j in range(i):
            v = 0.5 * (S[i, j] + S[j, i])
            S[i, j] = v
            S[j, i] = v
    Lt = np.empty((p, p))
    if not _cholesky(S, p, Lt):
        return False
    logdet_lam = 0.0
    for i in range(p):
        logdet_lam += 2.0 * np.log(L[i, i])
    SCi = np.zeros((p, p))
    CSC = np.zeros((p, p))
    for i in range(p):
        for j in range(p):
            for a in range(p):
                SCi[i, j] += S[i, a] * Ci[a, j]
    for i in range(p):
        for j in range(p):
            for a in range(p):
                CSC[i, j] += Ci[i, a] * SCi[a, j]
    Sb = np.zeros(p)
    for i in range(p):
        for j in range(p):
            Sb[i] += S[i, j] * b[j]
    bSb = 0.0
    for i in range(p):
        bSb += b[i] * Sb[i]
    for i in range(p):
        tb[k, i] = Sb[i]
        s = 0.0
        for j in range(p):
            s += Ci[i, j] * Sb[j]
        nw[k, i] = s
        for j in range(p):
            tA[k, i, j] = SCi[i, j]
            tL[k, i, j] = Lt[i, j]
            nU[k, i, j] = 0.5 * (0.5 * (CSC[i, j] + CSC[j, i]) - Ci[i, j])
    nc[k] = c + 0.5 * bSb - 0.5 * ld - 0.5 * logdet_lam
    return True


@njit(cache=True)
def twist_steps(dims, kCi, kld, kL, pP, pb, pc, tA, tb, tL, nU, nw, nc):
    """Twist every step in place; return ``-1`` or the first inadmissible step."""
    T = dims.shape[0]
    for k in range(T):
        p = dims[k]
        ok = _twist_one(k, p, pP[k], pb[k], pc[k], kCi[k], kld[k], kL[k],
                        tA, tb, tL, nU, nw, nc)
        if not ok:
            return k
    return -1


@njit(cache=True)
def _fit_quadratic(Xk, xi, valid, p, ridge, P, b):
    """Least-squares quadratic fit; returns ``(ok, c)`` and fills ``P``, ``b``."""
    N = Xk.shape[0]
    nf = 1 + p + p * (p + 1) // 2
    nv = 0
    for n in range(N):
        if valid[n]:
            nv += 1
    if nv < nf:
        return False, 0.0
    mu = np.zeros(p)
    sd = np.zeros(p)
    ybar = 0.0
    for n in range(N):
        if valid[n]:
            ybar += xi[n]
            for i in range(p):
                mu[i] += Xk[n, i]
    ybar /= nv
    for i in range(p):
        mu[i] /= nv
    for n in range(N):
        if valid[n]:
            for i in range(p):
                dv = Xk[n, i] - mu[i]
                sd[i] += dv * dv
    for i in range(p):
        sd[i] = np.sqrt(sd[i] / nv)
        if not (sd[i] > 1e-12 * (1.0 + abs(mu[i]))):
            return False, 0.0
    G = np.zeros((nf, nf))
    rhs = np.zeros(nf)
    f = np.empty(nf)
    xt = np.empty(p)
    for n in range(N):
        if not valid[n]:
            continue
        for i in range(p):
            xt[i] = (Xk[n, i] - mu[i]) / sd[i]
        f[0] = 1.0
        for i in range(p):
            f[1 + i] = xt[i]
        idx = 1 + p
        for i in range(p):
            for j in range(i, p):
                f[idx] = xt[i] * xt[j]
                idx += 1
        yc = xi[n] - ybar
        for a in range(nf):
            rhs[a] += f[a] * yc
            for c2 in range(nf):
                G[a, c2] += f[a] * f[c2]
    for a in range(nf):
        rhs[a] /= nv
        for c2 in range(nf):
            G[a, c2] /= nv
    for a in range(1, nf):
        G[a, a] += ridge
    L = np.empty((nf, nf))
    if not _cholesky(G, nf, L):
        return False, 0.0
    for a in range(nf):
        if L[a, a] * L[a, a] < 1e-6 * G[a, a]:
            return False, 0.0
    y = np.empty(nf)
    for a in range(nf):
        s = rhs[a]
        for c2 in range(a):
            s -= L[a, c2] * y[c2]
        y[a] = s / L[a, a]
    beta = np.empty(nf)
    for a in range(nf - 1, -1, -1):
        s = y[a]
        for c2 in range(a + 1, nf):
            s -= L[c2, a] * beta[c2]
        beta[a] = s / L[a, a]
    Pt = np.zeros((p, p))
    idx = 1 + p
    for i in range(p):
        for j in range(i, p):
            if i == j:
                Pt[i, i] = beta[idx]
            else:
                Pt[i, j] = 0.5 * beta[idx]
                Pt[j, i] = 0.5 * beta[idx]
            idx += 1
    ct = beta[0] + ybar
    for i in range(p):
        for j in range(p):
            P[i, j] = Pt[i, j] / (sd[i] * sd[j])
    for i in range(p):
        s = beta[1 + i] / sd[i]
        for j in range(p):
            s -= 2.0 * P[i, j] * mu[j]
        b[i] = s
    c = ct
    for i in range(p):
        c -= beta[1 + i] * mu[i] / sd[i]
        for j in range(p):
            c += mu[i] * P[i, j] * mu[j]
    return True, c


@njit(cache=True)
def fit_backward(flow, kern, pot, kCi, kld, kL, X, ridge, pP, pb, pc, fallback,
                 tA, tb, tL, nU, nw, nc):
    """Backward regression of quadratic log-policies on stored particles."""
    dims, const_mean, kQ, ko, kR, kr = kern
    T, N, d = X.shape
    full = np.empty((N, d))
    h = np.empty((N, d))
    m2 = np.empty((N, d))
    g = np.empty(d)
    r = np.empty(d)
    xi = np.empty(N)
    valid = np.empty(N, dtype=np.bool_)
    ident = np.arange(N)
    for k in range(T - 1, -1, -1):
        p = dims[k]
        Xk = X[k]
        _log_potentials(k, Xk, p, flow, pot, full, h, g, r, xi)
        if k + 1 < T:
            p2 = dims[k + 1]
            if const_mean[k + 1]:
                const_next = _quadratic(nU[k + 1], nw[k + 1], nc[k + 1], kr[k + 1], p2)
                for n in range(N):
                    xi[n] += const_next
            else:
                _kernel_means(k + 1, Xk, ident, p, p2, flow, kern, full, h, g, m2)
                _quadratic_rows(nU[k + 1], nw[k + 1], nc[k + 1], m2, p2, xi, 1.0)
        for n in range(N):
            valid[n] = np.isfinite(xi[n])
        ok, c = _fit_quadratic(Xk, xi, valid, p, ridge, pP[k], pb[k])
        if ok:
            pc[k] = c
            ok = _twist_one(k, p, pP[k], pb[k], pc[k], kCi[k], kld[k], kL[k],
                            tA, tb, tL, nU, nw, nc)
        if not ok:
            fallback[k] = True
            for i in range(p):
                pb[k, i] = 0.0
                for j in range(p):
                    pP[k, i, j] = 0.0
            pc[k] = 0.0
            _twist_one(k, p, pP[k], pb[k], pc[k], kCi[k], kld[k], kL[k],
                       tA, tb, tL, nU, nw, nc)


@njit(cache=True)
def simulate_steps(x, pre, post, chol, noise, stride, out, out_start, threshold):
    """Iterate ``x <- post(pre(x) + chol @ xi)`` over the rows of ``noise``.

    Every ``stride``-th state (counting from the first step of this chunk at
    offset ``out_start``) is written to ``out``.  Returns the index of the
    first exploded step or ``-1``.
    """
    lin, nl, kind, par, shift = pre
    plin, pnl, pkind, ppar, pshift = post
    n, d = noise.shape
    y = np.empty(d)
    g = np.empty(d)
    z = np.empty(d)
    for t in range(n):
        _phi(x, y, g, lin, nl, kind, par, shift)
        for i in range(d):
            s = y[i]
            for j in range(i + 1):
                s += chol[i, j] * noise[t, j]
            z[i] = s
        _phi(z, x, g, plin, pnl, pkind, ppar, pshift)
        for i in range(d):
            if not (abs(x[i]) <= threshold):
                return t
        step = out_start + t + 1
        if step % stride == 0:
            row = step // stride
            for i in range(d):
                out[row, i] = x[i]
    return -1
