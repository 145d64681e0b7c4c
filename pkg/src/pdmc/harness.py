"""Experiment orchestration: build targets, run samplers, summarise and write artifacts."""

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .cis import (BrownianProposal, ConstantRate, ScaleRho, StudentTProposal, quadratic_anchor_rate,
                  rho_estimator_variance, run_cis_scale)
from .config import ExperimentConfig
from .ctmcmc import (BPS, Exact, HybridCV, PureReflection, SubsampleCV, SubsampleNonUniform,
                     SubsampleSimple, ZigZag, estimator_variance, expected_rate, make_bound,
                     run_ctmcmc)
from .diagnostics import ess, sample_every
from .io import atomic_write_text, write_csv
from .rng import RngStream
from .smc import run_smc, tv_to_posterior, variance_study, weighted_histogram
from .targets import (GaussianTarget, MixtureTarget, build_cv_cache, cached_factor_bound_table,
                      factor_bound_table, load_dataset, max_abs_grad_bound, quadrature_posterior,
                      simulate_mixture_data)

SUMMARY_COLUMNS = ["n", "algo", "estimator", "bound", "t_per_ess", "iters_per_unit_time",
                   "iters_per_ess", "factor_evals"]


def code_hash():
    """SHA-256 over the package sources, so manifests pin the code that ran."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# problems

@dataclass
class Problem:
    target: object
    posterior: object = None  # Posterior1D, None for closed-form Gaussian
    table: object = None
    cache: object = None
    max_grad: float = None
    mode: float = 0.0
    sd: float = 1.0
    dataset_hash: str = ""


def mixture_data(cfg):
    if cfg.dataset:
        return load_dataset(cfg.dataset)
    return simulate_mixture_data(cfg.n, x_true=cfg.x_true, p=cfg.p, rng=cfg.data_seed)


def build_problem(cfg, need_bounds=True):
    if cfg.target == "gaussian":
        t = GaussianTarget(np.zeros(cfg.d), 1.0, cfg.d)
        return Problem(t, mode=0.0, sd=1.0, dataset_hash="gaussian")
    t = MixtureTarget(mixture_data(cfg), p=cfg.p)
    post = quadrature_posterior(t)
    prob = Problem(t, post, mode=post.mode, sd=post.sd, dataset_hash=t.dataset_hash())
    prob.cache = build_cv_cache(t, [post.mode])
    if need_bounds:
        if cfg.cache_dir:
            prob.table = cached_factor_bound_table(t, cfg.cache_dir)
        else:
            prob.table = factor_bound_table(t)
        if cfg.bound == "max":
            prob.max_grad = max_abs_grad_bound(t, *prob.table.interval)
    return prob


def make_estimator(cfg, prob):
    n = prob.target.n
    if cfg.estimator == "exact":
        return Exact()
    if cfg.estimator == "simple":
        return SubsampleSimple()
    if cfg.estimator == "nonuniform":
        return SubsampleNonUniform(prob.table.per_factor_max_abs_grad)
    if cfg.estimator == "cv":
        return SubsampleCV(prob.cache)
    return HybridCV(prob.cache, cfg.hybrid_k / math.sqrt(n))


def make_kind(cfg, prob):
    if cfg.algo == "zigzag":
        return ZigZag()
    if cfg.algo == "bps":
        return BPS(cfg.refresh_rate if cfg.refresh_rate is not None else 1.0 / prob.sd)
    return PureReflection(cfg.refresh_rate or 0.0)


# ---------------------------------------------------------------------------
# summaries

@dataclass
class SummaryStats:
    t_per_ess: float
    iters_per_unit_time: float
    iters_per_ess: float
    factor_evals_per_ess: float
    negative_weight_fraction: float = 0.0
    wall_time: float = 0.0

    @classmethod
    def from_counts(cls, duration, ess_value, proposals, factor_evals, horizon, **kw):
        """``duration`` is the post-burn-in length the ESS was measured on."""
        t_per_ess = duration / ess_value if ess_value > 0 else math.inf
        ipt = proposals / horizon
        return cls(t_per_ess, ipt, t_per_ess * ipt, t_per_ess * factor_evals / horizon, **kw)

    def identity_error(self):
        """Relative violation of ``iters_per_ess = t_per_ess * iters_per_unit_time``."""
        prod = self.t_per_ess * self.iters_per_unit_time
        if prod == self.iters_per_ess:
            return 0.0
        return abs(self.iters_per_ess - prod) / max(abs(prod), 1e-300)

    def as_dict(self):
        return asdict(self)


@dataclass
class RunOutput:
    stats: SummaryStats
    paths: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _run_name(cfg, command):
    if cfg.tag:
        return cfg.tag
    if command == "sample":
        return f"sample-{cfg.algo}-{cfg.estimator}-{cfg.bound}-n{cfg.n}-s{cfg.seed}-{cfg.stream}"
    return f"{command}-n{cfg.n}-s{cfg.seed}-{cfg.stream}"


def write_manifest(path, cfg, command, prob, outputs, extra=None):
    manifest = {"command": command, "config": cfg.as_dict(), "seed": cfg.seed, "stream": cfg.stream,
                "code_hash": code_hash(), "version": __version__,
                "dataset_hash": prob.dataset_hash if prob else None,
                "outputs": sorted(outputs)}
    manifest.update(extra or {})
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n")


def ess_time_step(cfg, prob):
    return cfg.ess_dt if cfg.ess_dt is not None else min(1.0, prob.sd / 4.0)


def run_sample(cfg, prob=None):
    """One CT-MCMC run; returns ``(result, stats, samples)``."""
    prob = prob or build_problem(cfg)
    est = make_estimator(cfg, prob)
    bound = make_bound(cfg.bound, prob.target, prob.table, prob.cache, est,
                       hybrid_radius=cfg.hybrid_k / math.sqrt(prob.target.n), max_grad=prob.max_grad)
    kind = make_kind(cfg, prob)
    x0 = np.full(prob.target.d, prob.mode)
    v0 = np.ones(prob.target.d) if cfg.algo == "zigzag" else np.eye(prob.target.d)[0]
    start = time.perf_counter()
    res = run_ctmcmc(kind, est, prob.target, bound, x0, v0, cfg.T, RngStream(cfg.seed, cfg.stream),
                     epsilon=cfg.epsilon, meta={"n": prob.target.n})
    wall = time.perf_counter() - start
    burn = cfg.burn_in_time
    dt = ess_time_step(cfg, prob)
    xs = sample_every(res.skeleton, dt, burn)[:, 0]
    e = ess(xs)
    c = res.counters
    stats = SummaryStats.from_counts(cfg.T - burn, e, c.proposals, c.factor_evals, cfg.T, wall_time=wall)
    return res, stats, xs


def run_experiment(cfg, command="sample", write=True):
    """Run one configured experiment end to end and write its artifacts.

    Artifacts (trajectory JSON-lines, summary CSV, manifest) exclude wall
    time so reruns with the same config and seed are byte-identical.
    """
    cfg.validate()
    runners = {"sample": _exp_sample, "cis": _exp_cis, "smc": _exp_smc,
               "variance-study": _exp_variance}
    if command not in runners:
        raise ValueError(f"unknown command {command!r}")
    out_dir = Path(cfg.output_dir) / _run_name(cfg, command)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    try:
        return runners[command](cfg, out_dir if write else None)
    except Exception as exc:
        raise RuntimeError(f"{command} failed for config {cfg.as_dict()}: {exc}") from exc


def _exp_sample(cfg, out_dir):
    prob = build_problem(cfg)
    res, stats, _ = run_sample(cfg, prob)
    row = {"n": prob.target.n, "algo": cfg.algo, "estimator": cfg.estimator, "bound": cfg.bound,
           "t_per_ess": stats.t_per_ess, "iters_per_unit_time": stats.iters_per_unit_time,
           "iters_per_ess": stats.iters_per_ess, "factor_evals": res.counters.factor_evals}
    paths = {}
    if out_dir is not None:
        paths = {"skeleton": out_dir / "skeleton.jsonl", "summary": out_dir / "summary.csv",
                 "manifest": out_dir / "manifest.json"}
        res.skeleton.to_jsonl(paths["skeleton"], seed=cfg.seed, stream=cfg.stream)
        write_csv(paths["summary"], [row], SUMMARY_COLUMNS)
        write_manifest(paths["manifest"], cfg, "sample", prob, [p.name for p in paths.values()],
                       {"counters": res.counters.as_dict()})
    return RunOutput(stats, paths, {"row": row, "counters": res.counters.as_dict()})


def _proposal(cfg):
    return StudentTProposal(cfg.nu) if cfg.proposal == "student_t" else BrownianProposal()


def _rho_and_rate(cfg, prob, proposal):
    rho = ScaleRho(prob.target, cfg.rho, prob.cache,
                   None if isinstance(proposal, BrownianProposal) else proposal)
    if cfg.rate_policy == "anchor":
        rate = quadratic_anchor_rate(prob.target.n, prob.cache.x_hat)
    else:
        rate = ConstantRate(cfg.rate)
    return rho, rate


def _exp_cis(cfg, out_dir):
    prob = build_problem(cfg, need_bounds=False)
    proposal = _proposal(cfg)
    rho, rate = _rho_and_rate(cfg, prob, proposal)
    traj = run_cis_scale(prob.target, cfg.rho, rate, cfg.T, RngStream(cfg.seed, cfg.stream),
                         y0=[prob.mode], cache=prob.cache, proposal=proposal)
    stats = SummaryStats(math.nan, len(traj.times) / cfg.T, math.nan, math.nan,
                         float(np.mean(traj.weights < 0)))
    paths = {}
    if out_dir is not None:
        paths = {"trajectory": out_dir / "trajectory.jsonl", "manifest": out_dir / "manifest.json"}
        lines = [json.dumps({"t": float(t), "y": y.tolist(), "w": float(w)})
                 for t, y, w in zip(traj.times, traj.positions, traj.weights)]
        lines.append(json.dumps({"t": cfg.T, "x": traj.x_T.tolist(), "w": float(traj.w_T)}))
        atomic_write_text(paths["trajectory"], "\n".join(lines) + "\n")
        write_manifest(paths["manifest"], cfg, "cis", prob, [p.name for p in paths.values()],
                       {"events": len(traj.times) - 1, "data_accesses": traj.data_accesses})
    return RunOutput(stats, paths, {"trajectory": traj})


def smc_initial(cfg, prob, gen):
    if cfg.init == "prior":
        return gen.normal(0.0, math.sqrt(prob.target.prior_var), size=cfg.N)
    if cfg.init == "uniform":
        return gen.uniform(cfg.init_lo, cfg.init_hi, size=cfg.N)
    return prob.posterior.quantile(gen.random(cfg.N))


def run_smc_config(cfg, prob=None):
    prob = prob or build_problem(cfg, need_bounds=False)
    proposal = _proposal(cfg)
    rho, rate = _rho_and_rate(cfg, prob, proposal)
    stream = RngStream(cfg.seed, cfg.stream)
    x0 = smc_initial(cfg, prob, stream.child(10**6))
    return prob, run_smc(x0, np.ones(cfg.N), cfg.h, cfg.K, cfg.ess_threshold, proposal, rho, rate, stream)


def smc_hist_t_min(cfg):
    return cfg.hist_t_min if cfg.hist_t_min is not None else cfg.h * cfg.K / 4.0


def _exp_smc(cfg, out_dir):
    prob, res = run_smc_config(cfg)
    x, w = res.weighted_samples(smc_hist_t_min(cfg))
    tv = tv_to_posterior(x, w, prob.posterior)
    stats = SummaryStats(math.nan, res.events / (cfg.h * cfg.K), math.nan, math.nan,
                         res.negative_weight_fraction)
    summary = {"n": prob.target.n, "N": cfg.N, "T": cfg.h * cfg.K, "rate": cfg.rate, "rho": cfg.rho,
               "tv": tv, "negative_weight_fraction": res.negative_weight_fraction,
               "resamples": int(res.resampled.sum()), "events": res.events,
               "data_accesses": res.data_accesses}
    paths = {}
    if out_dir is not None:
        paths = {"particles": out_dir / "particles.jsonl", "summary": out_dir / "summary.csv",
                 "manifest": out_dir / "manifest.json"}
        atomic_write_text(paths["particles"], res.snapshots_jsonl())
        write_csv(paths["summary"], [summary], list(summary))
        write_manifest(paths["manifest"], cfg, "smc", prob, [p.name for p in paths.values()])
    return RunOutput(stats, paths, {"summary": summary, "result": res, "posterior": prob.posterior})


VARIANCE_COLUMNS = ["n", "policy", "xhat_offset", "var_Wh", "data_accesses", "replicates"]


def _exp_variance(cfg, out_dir, ns=(150, 1500, 15000), offsets=(0.0, 1.0, 3.0)):
    rows = variance_study(ns, offsets, cfg.replicates, seed=cfg.seed, x_true=cfg.x_true, p=cfg.p,
                          data_seed=cfg.data_seed)
    stats = SummaryStats(math.nan, math.nan, math.nan, math.nan)
    paths = {}
    if out_dir is not None:
        paths = {"table": out_dir / "variance_study.csv", "manifest": out_dir / "manifest.json"}
        write_csv(paths["table"], rows, VARIANCE_COLUMNS)
        write_manifest(paths["manifest"], cfg, "variance-study", None, [p.name for p in paths.values()],
                       {"ns": list(ns), "offsets": list(offsets)})
    return RunOutput(stats, paths, {"rows": rows})


def loglog_slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


# ---------------------------------------------------------------------------
# sampler efficiency sweep over n

TABLE1_METHODS = {
    "canonical": dict(estimator="exact", bound="sum"),
    "canonical-max": dict(estimator="exact", bound="max"),
    "subsampling": dict(estimator="nonuniform", bound="sum"),
    "cv": dict(estimator="cv", bound="cv"),
}

# desk-scale horizons: long enough for a few hundred effective samples per cell
TABLE1_T = {
    "canonical": {150: 4000.0, 1500: 600.0, 15000: 120.0},
    "canonical-max": {150: 4000.0, 1500: 600.0, 15000: 120.0},
    "subsampling": {150: 6000.0, 1500: 4000.0, 15000: 3000.0},
    "cv": {150: 6000.0, 1500: 1500.0, 15000: 400.0},
}


def _table1_cell(args):
    base, method, n, T = args
    cfg = replace(base, n=n, T=T, tag="", **TABLE1_METHODS[method])
    try:
        res, stats, xs = run_sample(cfg)
        return {"n": n, "method": method, "algo": cfg.algo, "estimator": cfg.estimator,
                "bound": cfg.bound, "T": T, "t_per_ess": stats.t_per_ess,
                "iters_per_unit_time": stats.iters_per_unit_time, "iters_per_ess": stats.iters_per_ess,
                "factor_evals": res.counters.factor_evals, "error": ""}
    except Exception as exc:  # record and continue the sweep
        return {"n": n, "method": method, "algo": cfg.algo, "estimator": cfg.estimator,
                "bound": cfg.bound, "T": T, "t_per_ess": math.nan, "iters_per_unit_time": math.nan,
                "iters_per_ess": math.nan, "factor_evals": 0, "error": repr(exc)}


def table1_sweep(base=None, ns=(150, 1500, 15000), methods=tuple(TABLE1_METHODS), horizons=None,
                 workers=1, out_path=None, T_scale=1.0):
    """Every ``(method, n)`` cell on its own stream; failures are recorded per cell."""
    base = base or ExperimentConfig()
    horizons = horizons or TABLE1_T
    cells = []
    for mi, method in enumerate(methods):
        for ni, n in enumerate(ns):
            T = horizons[method].get(n, max(horizons[method].values())) * T_scale
            cells.append((replace(base, stream=base.stream + 100 * mi + ni), method, n, T))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_table1_cell, cells))
    else:
        rows = [_table1_cell(c) for c in cells]
    if out_path:
        write_csv(out_path, rows, ["n", "method", "algo", "estimator", "bound", "T", "t_per_ess",
                                   "iters_per_unit_time", "iters_per_ess", "factor_evals", "error"])
    return rows


def table1_trends(rows):
    """Trend checks on an efficiency sweep (each value is ``(passed, detail)``)."""
    def series(method, key):
        cells = sorted((r for r in rows if r["method"] == method), key=lambda r: r["n"])
        return [r["n"] for r in cells], [r[key] for r in cells]

    out = {}
    for method in ("canonical", "cv"):
        ns, t = series(method, "t_per_ess")
        ok = all(b < a for a, b in zip(t, t[1:])) and len(t) > 1
        out[f"t_per_ess_decreasing_{method}"] = (ok, dict(zip(ns, t)))
    ns, it = series("cv", "iters_per_ess")
    out["cv_iters_per_ess_flat"] = (len(it) > 1 and max(it) / min(it) <= 3.0, dict(zip(ns, it)))
    ns, it = series("subsampling", "iters_per_ess")
    d = dict(zip(ns, it))
    ok = 150 in d and 1500 in d and d[1500] / d[150] >= 3.0
    out["subsampling_iters_per_ess_growth"] = (ok, d)
    return out


# ---------------------------------------------------------------------------
# figure data

def export_figure_data(kind, cfg, out_path, n_grid=201):
    """Grid the quantities behind the rate, variance and posterior figures into a CSV."""
    prob = build_problem(cfg, need_bounds=False)
    t = prob.target
    lo, hi = prob.mode - 4 * prob.sd, prob.mode + 4 * prob.sd
    grid = np.linspace(lo, hi, n_grid)
    rows = []
    if kind == "rates_curves":
        simple, cv = SubsampleSimple(), SubsampleCV(prob.cache)
        v = np.array([-1.0])  # switching from negative to positive velocity
        g = t.grad_log_pi(grid[:, None])[:, 0]
        for x, gx in zip(grid, g):
            xx = np.array([x])
            rows.append({"x": x, "grad_log_pi": gx, "canonical": max(0.0, -v[0] * gx),
                         "simple": expected_rate(simple, t, xx, v), "cv": expected_rate(cv, t, xx, v)})
        cols = ["x", "grad_log_pi", "canonical", "simple", "cv"]
    elif kind == "variance_curves":
        simple, cv = SubsampleSimple(), SubsampleCV(prob.cache)
        for x in grid:
            xx = np.array([x])
            rows.append({"x": x, "var_rho_simple": rho_estimator_variance(t, xx),
                         "var_rho_cv": rho_estimator_variance(t, xx, prob.cache),
                         "var_grad_simple": float(estimator_variance(simple, t, xx)[0]),
                         "var_grad_cv": float(estimator_variance(cv, t, xx)[0])})
        cols = ["x", "var_rho_simple", "var_rho_cv", "var_grad_simple", "var_grad_cv"]
    elif kind == "posterior_hist":
        _, res = run_smc_config(cfg, prob)
        x, w = res.weighted_samples(smc_hist_t_min(cfg))
        edges = np.linspace(lo, hi, 41)
        hist = weighted_histogram(x, w, edges) / np.diff(edges)
        centres = 0.5 * (edges[1:] + edges[:-1])
        for c, hval in zip(centres, hist):
            rows.append({"x": c, "smc_density": hval, "posterior_density": float(prob.posterior.density(c))})
        cols = ["x", "smc_density", "posterior_density"]
    else:
        raise ValueError(f"unknown figure kind {kind!r}")
    write_csv(out_path, rows, cols)
    return rows
