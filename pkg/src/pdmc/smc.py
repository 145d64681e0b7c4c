"""Continuous-time SMC: CIS propagation of a particle population with resampling."""

from dataclasses import dataclass, field

import numpy as np

from .cis import BrownianProposal, CisConfigError, ConstantRate, ScaleRho, quadratic_anchor_rate
from .rng import RngStream, as_generator
from .targets import (MixtureTarget, build_cv_cache, quadrature_posterior,
                      simulate_mixture_data)


class DegenerateSystemError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class PropagationStats:
    events: np.ndarray
    data_accesses: np.ndarray
    sign_changes: int = 0
    negative_factors: int = 0


def propagate(x, w, duration, proposal, rho, rate, rng):
    """Run CIS from positions ``x`` (shape ``(N, d)``) with weights ``w`` for ``duration``.

    Each particle starts a fresh CIS path at its current position; the
    returned positions are draws from ``q_s(.|y)`` at the end of the interval.
    """
    gen = as_generator(rng)
    y = np.array(x, dtype=float).reshape(len(w), -1)
    w = np.array(w, dtype=float)
    N = len(w)
    s = np.zeros(N)
    used = np.zeros(N)
    events = np.zeros(N, dtype=np.int64)
    accesses = np.zeros(N, dtype=np.int64)
    x_out = np.empty_like(y)
    active = np.arange(N)
    flips = neg = 0
    while len(active):
        ya, sa = y[active], s[active]
        gap = rate.next_gap(ya, sa, gen)
        done = used[active] + gap > duration
        fin = active[done]
        if len(fin):
            s_end = s[fin] + (duration - used[fin])
            x_out[fin] = y[fin]
            moving = s_end > 0
            if moving.any():
                x_out[fin[moving]] = proposal.sample(y[fin[moving]], s_end[moving], gen)
        ev = active[~done]
        if len(ev):
            g = gap[~done]
            s_new = s[ev] + g
            y_old = y[ev]
            y_new = proposal.sample(y_old, s_new, gen)
            lam = rate.rate(y_old, s_new)
            r, acc = rho(y_new, y_old, s_new, gen)
            factor = 1.0 + r / lam
            neg += int(np.count_nonzero(factor < 0))
            w_new = w[ev] * factor
            flips += int(np.count_nonzero((w_new < 0) != (w[ev] < 0)))
            w[ev] = w_new
            y[ev] = y_new
            s[ev] = 0.0
            used[ev] += g
            events[ev] += 1
            accesses[ev] += acc
        active = ev
    if not np.all(np.isfinite(w)) or not np.all(np.isfinite(x_out)):
        raise FloatingPointError("non-finite particle state after propagation")
    return x_out, w, PropagationStats(events, accesses, flips, neg)


def signed_ess(w):
    """``(sum |w|)^2 / sum w^2``."""
    w = np.asarray(w, dtype=float)
    ss = float(w @ w)
    if ss == 0:
        return 0.0
    return float(np.abs(w).sum() ** 2 / ss)


def resample(x, w, rng):
    """Multinomial resampling proportional to ``|w|`` that keeps weight signs.

    New weights are ``sign(w_k) * mean(|w|)`` for the selected ancestor ``k``.
    Returns ``(x_new, w_new, ancestors)``.
    """
    gen = as_generator(rng)
    w = np.asarray(w, dtype=float)
    a = np.abs(w)
    total = float(a.sum())
    if not total > 0:
        raise DegenerateSystemError("all particle weights are zero")
    N = len(w)
    cdf = np.cumsum(a / total)
    cdf[-1] = 1.0
    k = np.minimum(np.searchsorted(cdf, gen.random(N), side="right"), N - 1)
    return np.asarray(x)[k].copy(), np.sign(w[k]) * (total / N), k


@dataclass
class SmcResult:
    times: np.ndarray
    x: np.ndarray  # (K+1, N, d) positions before resampling at each time
    w: np.ndarray  # (K+1, N) matching weights
    ess: np.ndarray
    resampled: np.ndarray
    events: int
    data_accesses: int
    sign_changes: int
    negative_factors: int
    log_scale: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def negative_weight_fraction(self):
        """Fraction of particle snapshots (after time 0) carrying a negative weight."""
        return float(np.mean(self.w[1:] < 0)) if len(self.w) > 1 else 0.0

    def weighted_samples(self, t_min=0.0):
        """Pooled ``(x, w)`` over snapshot times ``>= t_min``; weights normalised per time."""
        keep = self.times >= t_min
        xs, ws = [], []
        for xk, wk in zip(self.x[keep], self.w[keep]):
            tot = wk.sum()
            if tot == 0:
                continue
            xs.append(xk)
            ws.append(wk / tot / keep.sum())
        return np.concatenate(xs), np.concatenate(ws)

    def snapshots_jsonl(self):
        import json
        lines = []
        for t, xk, wk in zip(self.times, self.x, self.w):
            lines.append(json.dumps({"t": float(t), "x": xk.tolist(), "w": wk.tolist()}))
        return "\n".join(lines) + "\n"


def run_smc(x0, w0, h, K, ess_threshold, proposal, rho, rate, rng):
    """Propagate for ``K`` intervals of length ``h``; resample when ESS < threshold.

    Interval ``k`` draws from child stream ``k`` of ``rng`` so results depend
    only on the seed and stream, not on execution order. Weights are divided
    by their mean magnitude after every interval to avoid overflow; the
    accumulated log of those factors is kept in ``log_scale``.
    """
    x = np.array(x0, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    w = np.array(w0, dtype=float)
    N = len(w)
    if N < 2:
        raise CisConfigError("SMC needs at least two particles")
    base = rng if isinstance(rng, RngStream) else RngStream(int(rng) if isinstance(rng, (int, np.integer)) else 0)
    xs, ws, ess, res = [x.copy()], [w.copy()], [signed_ess(w)], [False]
    tot_events = tot_acc = flips = negs = 0
    log_scale = 0.0
    for k in range(K):
        gen = base.child(k)
        x, w, st = propagate(x, w, h, proposal, rho, rate, gen)
        # rescale by a positive constant; normalised estimates are unchanged
        scale = float(np.abs(w).mean())
        if scale > 0 and np.isfinite(scale):
            w = w / scale
            log_scale += float(np.log(scale))
        tot_events += int(st.events.sum())
        tot_acc += int(st.data_accesses.sum())
        flips += st.sign_changes
        negs += st.negative_factors
        xs.append(x.copy())
        ws.append(w.copy())
        e = signed_ess(w)
        ess.append(e)
        if np.abs(w).sum() == 0:
            raise DegenerateSystemError(f"all weights zero at t={(k + 1) * h}",
                                        {"t": (k + 1) * h, "events": tot_events})
        do = e < ess_threshold
        res.append(do)
        if do:
            x, w, _ = resample(x, w, gen)
    return SmcResult(h * np.arange(K + 1), np.array(xs), np.array(ws), np.array(ess), np.array(res),
                     tot_events, tot_acc, flips, negs, log_scale,
                     {"rho": rho.name, "rate": rate.name, "proposal": proposal.name,
                      "N": N, "h": h, "K": K, "ess_threshold": ess_threshold})


def weighted_histogram(x, w, edges):
    """Signed weighted histogram normalised to a probability vector over ``edges`` bins."""
    x = np.asarray(x, dtype=float).reshape(-1)
    hist, _ = np.histogram(x, bins=edges, weights=w)
    return hist / np.sum(w)


def tv_to_posterior(x, w, posterior, n_bins=30):
    """Total variation between a weighted sample and a quadrature posterior.

    Uses ``n_bins`` equal bins over the posterior's central 99.9% region plus
    one overflow bin on each side.
    """
    lo, hi = posterior.quantile(0.0005), posterior.quantile(0.9995)
    inner = np.linspace(lo, hi, n_bins + 1)
    edges = np.concatenate([[-np.inf], inner, [np.inf]])
    p_hat = weighted_histogram(x, w, edges)
    p = np.diff(np.concatenate([[0.0], posterior.cdf(inner), [1.0]]))
    return 0.5 * float(np.abs(p_hat - p).sum())


# ---------------------------------------------------------------------------
# variance of W_h against n

def variance_study(n_values, offsets=(0.0, 1.0, 3.0), replicates=2000, seed=0, x_true=4.0,
                   p=0.95, include_none=True, data_seed=0):
    """Var(W_h) and data accesses for ``h = 1/n`` with and without control variates.

    Particles start from the quadrature posterior. Without sub-sampling the
    rate is ``n/2``; with control variates ``x_hat = mode + offset * sd`` and
    the rate is ``2n + 4n^2 (y - x_hat)^2``.
    """
    rows = []
    proposal = BrownianProposal()
    for ni, n in enumerate(n_values):
        y = simulate_mixture_data(n, x_true=x_true, p=p, rng=data_seed)
        target = MixtureTarget(y, p=p)
        post = quadrature_posterior(target)
        h = 1.0 / n
        stream = RngStream(seed, 1000 + ni)
        u = stream.child(0).random(replicates)
        x0 = post.quantile(u)[:, None]
        configs = []
        if include_none:
            configs.append(("none", float("nan"), ScaleRho(target, "exact"), ConstantRate(n / 2)))
        for off in offsets:
            x_hat = post.mode + off * post.sd
            cache = build_cv_cache(target, [x_hat])
            configs.append(("cv", off, ScaleRho(target, "cv", cache), quadratic_anchor_rate(n, [x_hat])))
        for ci, (name, off, rho, rate) in enumerate(configs):
            _, w, st = propagate(x0, np.ones(replicates), h, proposal, rho, rate, stream.child(ci + 1))
            rows.append({"n": n, "policy": name, "xhat_offset": off, "var_Wh": float(np.var(w, ddof=1)),
                         "data_accesses": float(st.data_accesses.mean()), "replicates": replicates,
                         "mean_Wh": float(np.mean(w)), "events": float(st.events.mean())})
    return rows
