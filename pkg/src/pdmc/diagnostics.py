"""Expectations along a skeleton and effective sample size."""

import math

import numpy as np

from .pdp import state_at_time

_GL_LOW = np.polynomial.legendre.leggauss(8)
_GL_HIGH = np.polynomial.legendre.leggauss(16)


def _check_burn_in(skeleton, burn_in):
    if burn_in < 0 or burn_in >= skeleton.horizon:
        raise ValueError(f"burn_in={burn_in} must lie in [0, T={skeleton.horizon})")


def _gl(g, x0, v, length, rule):
    nodes, weights = rule
    s = 0.5 * length[:, None] * (nodes[None, :] + 1.0)
    pts = x0[:, None, :] + s[..., None] * v[:, None, :]
    vals = np.asarray(g(pts.reshape(-1, x0.shape[1])), dtype=float).reshape(s.shape)
    return 0.5 * length * (vals @ weights)


def segment_integrals(g, x0, v, length, rtol=1e-10, atol=1e-13, max_depth=30):
    """``int_0^L g(x0 + s v) ds`` per segment by adaptive Gauss-Legendre.

    ``g`` maps an ``(m, d)`` array of positions to ``m`` values. Segments
    where the 8- and 16-point rules disagree are halved recursively.
    """
    x0 = np.asarray(x0, dtype=float)
    v = np.asarray(v, dtype=float)
    length = np.asarray(length, dtype=float)
    out = np.zeros(len(length))
    owner = np.arange(len(length))
    for _ in range(max_depth):
        if len(owner) == 0:
            return out
        lo = _gl(g, x0, v, length, _GL_LOW)
        hi = _gl(g, x0, v, length, _GL_HIGH)
        done = np.abs(hi - lo) <= np.maximum(atol * np.maximum(length, 1.0), rtol * np.abs(hi))
        np.add.at(out, owner[done], hi[done])
        keep = ~done
        half = 0.5 * length[keep]
        x0 = np.concatenate([x0[keep], x0[keep] + half[:, None] * v[keep]])
        v = np.concatenate([v[keep], v[keep]])
        length = np.concatenate([half, half])
        owner = np.concatenate([owner[keep], owner[keep]])
    np.add.at(out, owner, _gl(g, x0, v, length, _GL_HIGH))
    return out


def path_integral_estimate(skeleton, g, burn_in=0.0):
    """Time average of ``g`` along the continuous path over ``[burn_in, T]``."""
    _check_burn_in(skeleton, burn_in)
    t = skeleton.t
    start = np.maximum(t[:-1], burn_in)
    end = t[1:]
    keep = end > start
    x_start = skeleton.x[:-1][keep] + (start - t[:-1])[keep, None] * skeleton.v[:-1][keep]
    vals = segment_integrals(g, x_start, skeleton.v[:-1][keep], (end - start)[keep])
    return float(vals.sum() / (skeleton.horizon - burn_in))


def discretized_times(skeleton, M, burn_in=0.0):
    if M < 1:
        raise ValueError("M must be >= 1")
    _check_burn_in(skeleton, burn_in)
    h = (skeleton.horizon - burn_in) / M
    return burn_in + h * np.arange(1, M + 1)


def discretized_samples(skeleton, M, burn_in=0.0):
    """Positions at ``M`` equally spaced times ``burn_in + j h``, ``j = 1..M``."""
    x, _ = state_at_time(skeleton, discretized_times(skeleton, M, burn_in))
    return x


def sample_every(skeleton, dt, burn_in=0.0):
    """Positions every ``dt`` time units after burn-in."""
    M = int(math.floor((skeleton.horizon - burn_in) / dt + 1e-9))
    times = burn_in + dt * np.arange(1, M + 1)
    x, _ = state_at_time(skeleton, times)
    return x


def discretized_estimate(skeleton, g, M, burn_in=0.0):
    """``(1/M) sum_j g(x_{burn_in + j h})`` with ``h = (T - burn_in)/M``."""
    return float(np.mean(g(discretized_samples(skeleton, M, burn_in))))


def autocovariance(x, max_lag):
    """Biased autocovariances at lags ``0..max_lag`` by direct sums."""
    x = np.asarray(x, dtype=float)
    xc = x - x.mean()
    N = len(x)
    return np.array([xc[:N - k] @ xc[k:] / N for k in range(max_lag + 1)])


def ess(series):
    """Effective sample size with Geyer's initial monotone positive sequence.

    Autocorrelations are computed lag by lag and summation stops at the first
    non-positive sum of an adjacent pair. The autocorrelation time is floored at
    ``1/log10(N)``, so anti-correlated chains report at most ``N log10 N``.
    """
    x = np.asarray(series, dtype=float).reshape(-1)
    N = len(x)
    if N < 10:
        raise ValueError("ess needs at least 10 samples")
    xc = x - x.mean()
    c0 = float(xc @ xc) / N
    if c0 <= 0 or not np.isfinite(c0):
        return float(N)

    def rho(k):
        return float(xc[:N - k] @ xc[k:]) / N / c0

    tau = -1.0
    prev_pair = math.inf
    m = 0
    while 2 * m + 1 < N:
        pair = (1.0 if m == 0 else rho(2 * m)) + rho(2 * m + 1)
        if pair <= 0:
            break
        pair = min(pair, prev_pair)
        tau += 2.0 * pair
        prev_pair = pair
        m += 1
    tau = max(tau, 1.0 / math.log10(N))
    return float(N / tau)
