"""Experiment commands.

Each command has a per-seed worker returning tables and a summary; the
runner executes seeds (optionally in a process pool), concatenates tables in
seed order and writes CSV files plus a JSON manifest.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__, _accel
from ..errors import InvalidInputError, SplitSMCError
from ..estimators import (CsmcLikelihood, SpsaConfig, gaussian_log_prior, pmmh, spsa_initialize_bridged,
                          spsa_maximize)
from ..models import ObservationScheme, make_family
from ..schemes import bridge_explosion_fraction, simulate_path, weak_order_probe
from .config import (ExplosionSection, PmmhSection, SpsaSection, VarianceSection, WeakOrderSection,
                     config_hash, to_dict)


def rng_for(seed, *tags):
    """Generator for one (seed, purpose, index...) combination."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(t) for t in tags]]))


def fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path, header, rows):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise InvalidInputError(f"cannot write {path}: {exc.strerror}") from None
    return path


def read_csv(path, width=None):
    """Read a ``time, x1, ...`` CSV; returns ``(times, values)``."""
    path = Path(path)
    try:
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read data file {path}: {exc}") from None
    if raw.shape[1] < 2 or (width is not None and raw.shape[1] != width + 1):
        raise InvalidInputError(f"data file {path} has {raw.shape[1]} columns, expected time plus {width}")
    return raw[:, 0], raw[:, 1:]


def _family(cfg):
    return make_family(cfg.model.name, **cfg.model.fixed)


def _truth(cfg, family, override=None):
    params = dict(cfg.model.params)
    params.update(override or {})
    missing = [n for n in family.names if n not in params]
    if missing:
        raise InvalidInputError(f"model.params: missing {', '.join(missing)}")
    extra = sorted(set(params) - set(family.names))
    if extra:
        raise InvalidInputError(f"model.params: unknown {', '.join(extra)}")
    return family.to_log(params)


def _observation(cfg, K=None):
    o = cfg.observation
    return ObservationScheme(o.regime, tuple(o.observed), o.delta_obs, o.K if K is None else K)


def _stride(cfg):
    ratio = cfg.observation.delta_obs / cfg.data.delta_sim
    stride = int(round(ratio))
    if stride < 1 or abs(stride - ratio) > 1e-6 * ratio:
        raise InvalidInputError("observation.delta_obs must be a multiple of data.delta_sim")
    return stride


def simulate_full(cfg, seed, override=None):
    """Full simulated path ``(times, states)`` of the configured model."""
    family = _family(cfg)
    model = family(_truth(cfg, family, override))
    stride = _stride(cfg)
    x0 = np.zeros(model.dim) if cfg.data.x0 is None else np.asarray(cfg.data.x0, dtype=float)
    n_obs = int(cfg.data.n_obs)
    if n_obs < 0:
        raise InvalidInputError("data.n_obs must be non-negative")
    path = simulate_path(model, cfg.data.scheme, x0, cfg.data.delta_sim, n_obs * stride, stride, rng_for(seed, 0))
    if path.exploded:
        raise SplitSMCError(f"simulated path exploded at step {path.explosion_step}")
    return path.times, path.states


def observed_data(cfg, seed, override=None):
    """Observed data for a seed: the data file if configured, else a simulation."""
    obs = _observation(cfg)
    if cfg.data.path is not None:
        width = len(obs.observed) if obs.regime == "partial" else None
        return read_csv(cfg.data.path, width)[1]
    _, states = simulate_full(cfg, seed, override)
    return states[:, list(obs.observed)] if obs.regime == "partial" else states


def _likelihood(cfg, family, data, K=None, N=None, method=None, warm_start=None):
    c = cfg.csmc
    return CsmcLikelihood(family, cfg.scheme, _observation(cfg, K), data, N=N or cfg.particles,
                          method=method or c.method, max_iters=c.max_iters, tol=c.tol,
                          warm_start=c.warm_start if warm_start is None else warm_start)


def _names(family):
    return list(family.names)


# per-seed workers ---------------------------------------------------------------

def run_simulate(cfg, seed):
    times, states = simulate_full(cfg, seed)
    obs = _observation(cfg)
    cols = list(obs.observed) if obs.regime == "partial" else list(range(states.shape[1]))
    header = ["time"] + [f"x{i + 1}" for i in cols]
    rows = [[t, *x] for t, x in zip(times, states[:, cols])]
    return {"tables": {f"seed{seed}": (header, rows)}, "summary": {"rows": len(rows)}}


def run_loglik_scan(cfg, seed):
    sc = cfg.scan
    family = _family(cfg)
    if sc.parameter not in family.names:
        raise InvalidInputError(f"scan.parameter: {sc.parameter!r} not in {family.names}")
    if not sc.step > 0 or sc.stop < sc.start or sc.reps < 1:
        raise InvalidInputError("scan: need step > 0, stop >= start and reps >= 1")
    grid = np.round(np.arange(sc.start, sc.stop + 0.5 * sc.step, sc.step), 12)
    data = observed_data(cfg, seed)
    rows, argmax, fallbacks = [], {}, 0
    for ki, K in enumerate(sc.K):
        lik = _likelihood(cfg, family, data, K=K)
        best = (-np.inf, None)
        for gi, value in enumerate(grid):
            theta = _truth(cfg, family, {sc.parameter: float(value)})
            vals = np.array([lik(theta, rng_for(seed, 1, ki, gi, r)) for r in range(sc.reps)])
            if lik.last_report is not None:
                fallbacks += int(sum(lik.last_report.fallback_counts))
            mean = float(np.mean(vals))
            se = float(np.std(vals, ddof=1) / np.sqrt(sc.reps)) if sc.reps > 1 else float("nan")
            rows.append([seed, K, float(value), mean, se])
            if mean > best[0]:
                best = (mean, float(value))
        argmax[str(K)] = best[1]
    return {"tables": {"scan": (["seed", "K", "value", "log_Z", "stderr"], rows)},
            "summary": {"argmax": argmax, "fallbacks": fallbacks}}


def _spsa_config(sec):
    return SpsaConfig(a=sec.a, c=sec.c, n_iter=sec.n_iter, A=sec.A, alpha=sec.alpha, gamma=sec.gamma,
                      scaling=sec.scaling, block_tol=sec.block_tol, max_step=sec.max_step)


def _start(cfg, family, init):
    return family.to_log(init) if init else _truth(cfg, family)


def run_mle(cfg, seed):
    sec = cfg.section("spsa", SpsaSection)
    family = _family(cfg)
    data = observed_data(cfg, seed)
    scfg = _spsa_config(sec)
    theta0 = _start(cfg, family, sec.init)
    K = cfg.observation.K
    if sec.initialize_bridged and K > 1:
        half = _likelihood(cfg, family, data, K=1, N=max(2, cfg.particles // 2))
        theta0 = spsa_initialize_bridged(half, theta0, scfg, rng_for(seed, 2), K)
    lik = _likelihood(cfg, family, data)
    res = spsa_maximize(lik, theta0, scfg, rng_for(seed, 3))
    nat = np.exp(res.trace)
    rows = [[seed, i, *nat[i], (res.values[i - 1] if i else float("nan"))] for i in range(nat.shape[0])]
    est = family.natural(res.theta)
    return {"tables": {"trace": (["seed", "iteration", *_names(family), "value"], rows),
                       "estimates": (["seed", *_names(family)], [[seed, *[est[n] for n in family.names]]])},
            "summary": {"estimate": est, "start": family.natural(theta0), "measurements": res.n_measurements,
                        "blocked": res.n_blocked, "likelihood_failures": lik.n_failures}}


def run_pmmh(cfg, seed):
    sec = cfg.section("pmmh", PmmhSection)
    family = _family(cfg)
    theta0 = _start(cfg, family, sec.init)
    if sec.n_iters == 0:
        return {"tables": {}, "summary": {"n_iters": 0, "start": family.natural(theta0)}}
    data = observed_data(cfg, seed)
    lik = _likelihood(cfg, family, data)
    prior = gaussian_log_prior(sec.prior_mean, sec.prior_sd)
    res = pmmh(prior, sec.proposal_sd, theta0, lik, sec.n_iters, rng_for(seed, 4))
    nat = np.exp(res.chain)
    rows = [[seed, i + 1, *nat[i], res.log_Z[i], bool(res.accepted[i])] for i in range(nat.shape[0])]
    burn = int(np.floor(sec.burn_in * nat.shape[0]))
    kept = nat[burn:] if burn < nat.shape[0] else nat
    q = np.quantile(kept, [0.05, 0.5, 0.95], axis=0)
    summary = {"acceptance_rate": res.acceptance_rate, "failures": res.n_failures, "burn_in": burn,
               "quantiles": {n: q[:, j].tolist() for j, n in enumerate(family.names)}}
    return {"tables": {"chain": (["seed", "iteration", *_names(family), "log_Z", "accepted"], rows)},
            "summary": summary}


def run_explosion(cfg, seed):
    sec = cfg.section("explosion", ExplosionSection)
    family = _family(cfg)
    if "sigma" not in family.names:
        raise InvalidInputError("explosion study needs a model with a 'sigma' parameter")
    rows, table = [], {}
    for si, sigma in enumerate(sec.sigmas):
        over = {"sigma": float(sigma)}
        data = observed_data(cfg, seed, over)
        model = family(_truth(cfg, family, over))
        for ci, scheme in enumerate(sec.schemes):
            for K in sec.K:
                frac = bridge_explosion_fraction(model, scheme, data, cfg.observation.delta_obs, K, sec.N,
                                                 rng_for(seed, 5, si, ci, K))
                rows.append([seed, float(sigma), scheme, K, frac])
                table[f"{scheme}/sigma={sigma:g}/K={K}"] = frac
    return {"tables": {"explosion": (["seed", "sigma", "scheme", "K", "fraction"], rows)},
            "summary": {"fractions": table}}


def run_weak_order(cfg, seed):
    sec = cfg.section("weak_order", WeakOrderSection)
    family = _family(cfg)
    model = family(_truth(cfg, family))
    rows, slopes = [], {}
    for ci, scheme in enumerate(sec.schemes):
        res = weak_order_probe(model, scheme, sec.x0, sec.deltas, rng_for(seed, 6, ci),
                               n_reps=sec.n_reps, refine=sec.refine)
        rows += [[seed, scheme, d, e] for d, e in zip(res.deltas, res.errors)]
        slopes[scheme] = {"slope": res.slope, "residual": res.residual, "exact": res.exact}
    return {"tables": {"weak_order": (["seed", "scheme", "delta", "error"], rows)}, "summary": {"slopes": slopes}}


def run_csmc_variance(cfg, seed):
    sec = cfg.section("variance", VarianceSection)
    family = _family(cfg)
    data = observed_data(cfg, seed)
    # data come from model.params; the estimators are evaluated at variance.at if given
    theta = _truth(cfg, family, sec.at)
    rows, out = [], {}
    for mi, (method, N) in enumerate((("bpf", sec.N_bpf), ("csmc", sec.N_csmc))):
        lik = _likelihood(cfg, family, data, N=N, method=method, warm_start=False)
        vals = [lik(theta, rng_for(seed, 7, mi, r)) for r in range(sec.n_reps)]
        rows += [[seed, r, method, N, v] for r, v in enumerate(vals)]
        vals = np.asarray(vals)
        finite = vals[np.isfinite(vals)]
        out[method] = {"N": N, "mean": float(np.mean(finite)) if finite.size else None,
                       "std": float(np.std(finite, ddof=1)) if finite.size > 1 else None,
                       "failures": int(vals.size - finite.size)}
    if out["bpf"]["std"] and out["csmc"]["std"] is not None:
        out["std_ratio"] = out["csmc"]["std"] / out["bpf"]["std"]
    return {"tables": {"variance": (["seed", "rep", "method", "N", "log_Z"], rows)}, "summary": out}


WORKERS = {"simulate": run_simulate, "loglik-scan": run_loglik_scan, "mle": run_mle, "pmmh": run_pmmh,
           "explosion": run_explosion, "weak-order": run_weak_order, "csmc-variance": run_csmc_variance}


def _run_one(cfg, seed):
    t0 = time.perf_counter()
    try:
        out = WORKERS[cfg.command](cfg, seed)
        out["time"] = time.perf_counter() - t0
        return seed, out, None
    except (SplitSMCError, ArithmeticError, ValueError) as exc:
        return seed, None, f"{type(exc).__name__}: {exc}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def run_experiment(cfg, out_dir=None, threads=1):
    """Run every seed of ``cfg``; returns the manifest dictionary."""
    out_dir = Path(out_dir if out_dir is not None else cfg.output)
    t0 = time.perf_counter()
    seeds = list(cfg.seeds)
    if threads > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=int(threads)) as pool:
            results = list(pool.map(_run_one, [cfg] * len(seeds), seeds))
    else:
        results = [_run_one(cfg, s) for s in seeds]
    tables, per_seed, failures = {}, {}, {}
    for seed, out, err in results:
        if err is not None:
            failures[str(seed)] = err
            continue
        per_seed[str(seed)] = {"time": out["time"], "summary": out["summary"]}
        for name, (header, rows) in out["tables"].items():
            tables.setdefault(name, (header, []))[1].extend(rows)
    outputs = []
    for name, (header, rows) in tables.items():
        outputs.append(str(write_csv(out_dir / f"{cfg.experiment}_{name}.csv", header, rows)))
    manifest = {"experiment": cfg.experiment, "command": cfg.command, "config": to_dict(cfg),
                "config_hash": config_hash(cfg), "seeds": seeds, "version": __version__,
                "backend": _accel.BACKEND, "wall_time": time.perf_counter() - t0,
                "per_seed": per_seed, "failures": failures, "outputs": outputs}
    path = out_dir / f"{cfg.experiment}_manifest.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise InvalidInputError(f"cannot write {path}: {exc.strerror}") from None
    manifest["manifest"] = str(path)
    return manifest
