"""Compare the numba and pure-numpy kernels on identical inputs.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--json out.json]

Both backends are imported directly, so ``SPLITSMC_DISABLE_JIT`` does not
matter here.  Each kernel is run once to warm up (JIT compilation) and then
timed; outputs of the two backends are checked for agreement.

The filter is timed with policies fitted by cSMC.  The untwisted filter
on a bridged formulation is not used for the agreement check: its latent
bridge steps amplify rounding differences between the backends until a
resampling index flips, after which the two runs are unrelated.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from splitsmc import coarse_policies, csmc, fhn_model, partial_bridged, partial_unbridged, simulate_path
from splitsmc._accel import _jit, _numpy
from splitsmc.feynman_kac import PolicySet, _twist_buffers
from splitsmc.schemes import Scheme, _psd_cholesky, _sim_maps, step_covariance


def _filter_inputs(fk, tm, N, seed):
    rng = np.random.default_rng(seed)
    T, d = fk.T, fk.d
    eps = rng.standard_normal((T, N, d))
    unif = rng.random((T, N))

    def run(mod):
        X = np.zeros((T, N, d))
        anc = np.zeros((T, N), dtype=np.int64)
        logw = np.zeros((T, N))
        loginc = np.zeros(T)
        res = np.zeros(T, dtype=np.bool_)
        mod.pf_run(fk.flow, fk.kern, fk.pot, tm.tw, eps, unif, X, anc, logw, loginc, res)
        return X, loginc

    return run


def _fit_inputs(fk, X):
    def run(mod):
        pol = PolicySet.unit(fk.T, fk.d)
        bufs = _twist_buffers(fk)
        mod.fit_backward(fk.flow, fk.kern, fk.pot, fk.kCi, fk.kld, fk.kL, X, 1e-8,
                         pol.P, pol.b, pol.c, pol.fallback, *bufs)
        return pol.P, pol.b

    return run


def _sim_inputs(model, n, seed):
    pre, post = _sim_maps(model, Scheme.STRANG, 1e-4)
    chol = _psd_cholesky(step_covariance(model, "strang", 1e-4))
    noise = np.random.default_rng(seed).standard_normal((n, model.dim))

    def run(mod):
        x = np.zeros(model.dim)
        out = np.full((n // 100 + 1, model.dim), np.nan)
        out[0] = x
        mod.simulate_steps(x, pre, post, chol, noise, 100, out, 0, 1e5)
        return out

    return run


def _time(fn, mod, repeat):
    fn(mod)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn(mod)
        best = min(best, time.perf_counter() - t0)
    return best, result


def _agree(a, b):
    return all(np.allclose(x, y, rtol=1e-9, atol=1e-9, equal_nan=True) for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--M", type=int, default=50, help="observation intervals of the bridged model")
    ap.add_argument("--json", help="write results to this file")
    args = ap.parse_args(argv)

    model = fhn_model(0.1, 1.5, 0.8, 0.0, 0.3)
    path = simulate_path(model, "strang", [0.0, 0.0], 1e-4, args.M * 500, 500, np.random.default_rng(0))
    v = path.states[:, [0]]
    fk = partial_bridged(model, "strang", v, [0], 0.05, 4)
    coarse = partial_unbridged(model, "strang", v, [0], 0.05)
    rng = np.random.default_rng(4)
    tm = csmc(fk, 20, rng, initial=coarse_policies(fk, coarse, rng)).final
    cases = {}
    for N in (20, 200, 2000):
        cases[f"pf_run T={fk.T} N={N}"] = _filter_inputs(fk, tm, N, 1)
    X, _ = _filter_inputs(fk, tm, 200, 2)(_jit)
    cases[f"fit_backward T={fk.T} N=200"] = _fit_inputs(fk, X)
    cases["simulate_steps 200000 steps"] = _sim_inputs(model, 200_000, 3)

    rows = []
    print(f"{'kernel':<34}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}  agree")
    for name, fn in cases.items():
        tj, rj = _time(fn, _jit, args.repeat)
        tn, rn = _time(fn, _numpy, args.repeat)
        rj = rj if isinstance(rj, tuple) else (rj,)
        rn = rn if isinstance(rn, tuple) else (rn,)
        ok = _agree(rj, rn)
        rows.append({"kernel": name, "numba": tj, "numpy": tn, "speedup": tn / tj, "agree": ok})
        print(f"{name:<34}{tj:>12.4f}{tn:>12.4f}{tn / tj:>10.1f}  {'yes' if ok else 'NO'}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r["agree"] for r in rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())
