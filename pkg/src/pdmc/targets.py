"""Factorised target densities, the Gaussian-mixture posterior and its rate bounds."""

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .rng import as_generator

_CHUNK = 2_000_000  # max elements materialised per factor-sum chunk


class NonFiniteFactorError(FloatingPointError):
    def __init__(self, index, x):
        self.index = int(index)
        super().__init__(f"factor {self.index} returned a non-finite value at x={x}")


class FactorizedTarget:
    """Posterior ``pi(x)`` proportional to ``prod_i pi_i(x)``.

    Subclasses implement the vectorised per-factor derivatives
    ``factor_grad(idx, x)`` and ``factor_hess_diag(idx, x)`` where ``idx`` has
    shape ``(...)`` and ``x`` has shape ``(..., d)``.
    """

    n = 1
    d = 1
    has_second_derivatives = True

    def factor_grad(self, idx, x):
        raise NotImplementedError

    def factor_hess_diag(self, idx, x):
        raise NotImplementedError

    def log_pi(self, x):
        raise NotImplementedError

    # single-factor conveniences
    def grad_log_factor(self, i, x):
        return self.factor_grad(np.asarray(i), np.asarray(x, dtype=float))

    def second_deriv_diag_factor(self, i, x):
        return self.factor_hess_diag(np.asarray(i), np.asarray(x, dtype=float))

    def all_factor_grads(self, x):
        """Shape ``(..., n, d)``: every factor gradient at every point."""
        x = np.asarray(x, dtype=float)
        idx = np.arange(self.n)
        return self.factor_grad(idx, x[..., None, :])

    def all_factor_hess_diag(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.arange(self.n)
        return self.factor_hess_diag(idx, x[..., None, :])

    def _factor_sum(self, fn, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.d)
        rows = max(1, _CHUNK // max(1, self.n * self.d))
        out = np.empty_like(flat)
        for start in range(0, len(flat), rows):
            block = fn(flat[start:start + rows])
            total = block.sum(axis=-2)
            if not np.all(np.isfinite(total)):
                bad = ~np.all(np.isfinite(block), axis=-1)
                r, i = np.argwhere(bad)[0]
                raise NonFiniteFactorError(i, flat[start + r])
            out[start:start + rows] = total
        return out.reshape(x.shape)

    def grad_log_pi(self, x):
        return self._factor_sum(self.all_factor_grads, x)

    def hess_diag_log_pi(self, x):
        return self._factor_sum(self.all_factor_hess_diag, x)


def grad_log_pi(target, x):
    """Exact gradient of the log target as the sum over all factors."""
    return target.grad_log_pi(x)


class GaussianTarget(FactorizedTarget):
    """Single-factor multivariate normal ``N(mean, cov)``."""

    def __init__(self, mean=0.0, cov=1.0, d=None):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        if d is not None and mean.size == 1:
            mean = np.full(d, mean[0])
        self.d = mean.size
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(self.d)
        self.mean = mean
        self.cov = cov
        self.prec = np.linalg.inv(cov)
        self.n = 1

    def factor_grad(self, idx, x):
        x = np.asarray(x, dtype=float)
        g = -(x - self.mean) @ self.prec.T
        return np.broadcast_to(g, np.broadcast_shapes(np.shape(idx) + (self.d,), g.shape)).copy()

    def factor_hess_diag(self, idx, x):
        x = np.asarray(x, dtype=float)
        h = np.broadcast_to(-np.diag(self.prec), x.shape)
        return np.broadcast_to(h, np.broadcast_shapes(np.shape(idx) + (self.d,), h.shape)).copy()

    def grad_log_pi(self, x):
        return -(np.asarray(x, dtype=float) - self.mean) @ self.prec.T

    def hess_diag_log_pi(self, x):
        return np.broadcast_to(-np.diag(self.prec), np.shape(x)).copy()

    def log_pi(self, x):
        z = np.asarray(x, dtype=float) - self.mean
        return -0.5 * np.einsum("...i,ij,...j->...", z, self.prec, z)

    def ray_coefficients(self, x, v):
        """``-v . grad log pi(x + s v) = a + b s``; returns ``(a, b)``."""
        qv = self.prec @ v
        return float((x - self.mean) @ qv), float(v @ qv)

    def coordinate_ray_coefficients(self, x, v, i):
        """Same for the Zig-Zag coordinate rate ``-v_i d_i log pi``."""
        q = self.prec[i]
        return float(v[i] * q @ (x - self.mean)), float(v[i] * q @ v)


class GaussianFactorTarget(FactorizedTarget):
    """Isotropic Gaussian likelihood factors with a Gaussian prior split n ways.

    ``log pi_i(x) = -|x - y_i|^2 / (2 noise_var) - |x|^2 / (2 n prior_var)``.
    """

    def __init__(self, data, noise_var=1.0, prior_var=np.inf):
        data = np.asarray(data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        self.y = data
        self.n, self.d = data.shape
        self.noise_var = float(noise_var)
        self.prior_var = float(prior_var)
        self._prior_share = 0.0 if math.isinf(prior_var) else 1.0 / (self.n * prior_var)

    def factor_grad(self, idx, x):
        y = self.y[idx]
        return (y - x) / self.noise_var - self._prior_share * np.asarray(x)

    def factor_hess_diag(self, idx, x):
        shape = np.broadcast_shapes(np.shape(idx) + (self.d,), np.shape(x))
        return np.full(shape, -1.0 / self.noise_var - self._prior_share)

    def log_pi(self, x):
        x = np.asarray(x, dtype=float)
        sq = ((x[..., None, :] - self.y) ** 2).sum(axis=(-1, -2))
        return -sq / (2 * self.noise_var) - 0.5 * self._prior_share * self.n * (x ** 2).sum(-1)

    @property
    def posterior_precision(self):
        return self.n / self.noise_var + self.n * self._prior_share

    @property
    def posterior_mean(self):
        return self.y.sum(0) / self.noise_var / self.posterior_precision

    def search_interval(self):
        m = float(self.posterior_mean[0])
        w = 50.0 / math.sqrt(self.posterior_precision)
        return (m - w, m + w)

    def dataset_hash(self):
        h = hashlib.sha256(np.ascontiguousarray(self.y).tobytes())
        h.update(json.dumps([self.noise_var, self.prior_var]).encode())
        return h.hexdigest()[:16]


class MixtureTarget(FactorizedTarget):
    """Posterior for the location ``x`` of a two-component normal mixture.

    Each observation is ``N(0, noise_sd^2)`` with probability ``p`` and
    ``N(x, signal_sd^2)`` otherwise; the ``N(0, prior_var)`` prior is shared
    as an ``n``-th power across factors.
    """

    def __init__(self, y, p=0.95, prior_var=4.0, noise_sd=10.0, signal_sd=1.0):
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.n = self.y.size
        self.d = 1
        if self.n < 1:
            raise ValueError("need at least one observation")
        self.p = float(p)
        self.prior_var = float(prior_var)
        self.noise_sd = float(noise_sd)
        self.signal_sd = float(signal_sd)
        with np.errstate(divide="ignore"):
            # the 1/sqrt(2 pi) factor common to both components is dropped
            self._log_a = (np.log(self.p / self.noise_sd)
                           - self.y ** 2 / (2 * self.noise_sd ** 2))
            self._log_b = np.log((1 - self.p) / self.signal_sd)
        self._prior_share = 1.0 / (self.n * self.prior_var)

    def _resp(self, idx, x):
        """Signal-component responsibility and scaled residual per factor."""
        x = np.asarray(x, dtype=float)[..., 0]
        y = self.y[idx]
        z = (y - x) / self.signal_sd
        with np.errstate(invalid="ignore"):
            logit = self._log_b - 0.5 * z * z - self._log_a[idx]
        r = expit(logit)
        return r, z, x

    def factor_grad(self, idx, x):
        r, z, x0 = self._resp(idx, x)
        g = r * z / self.signal_sd - self._prior_share * x0
        return g[..., None]

    def factor_hess_diag(self, idx, x):
        r, z, _ = self._resp(idx, x)
        h = (r * (1 - r) * z * z - r) / self.signal_sd ** 2 - self._prior_share
        return h[..., None]

    def log_factor(self, idx, x):
        x0 = np.asarray(x, dtype=float)[..., 0]
        y = self.y[idx]
        z = (y - x0) / self.signal_sd
        return np.logaddexp(self._log_a[idx], self._log_b - 0.5 * z * z) - 0.5 * self._prior_share * x0 ** 2

    def log_pi(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 1)
        rows = max(1, _CHUNK // self.n)
        out = np.empty(len(flat))
        idx = np.arange(self.n)
        for s in range(0, len(flat), rows):
            out[s:s + rows] = self.log_factor(idx, flat[s:s + rows, None, :]).sum(-1)
        return out.reshape(x.shape[:-1])

    def dataset_hash(self):
        h = hashlib.sha256(np.ascontiguousarray(self.y).tobytes())
        h.update(json.dumps([self.p, self.prior_var, self.noise_sd, self.signal_sd]).encode())
        return h.hexdigest()[:16]

    def search_interval(self):
        width = 10 * self.noise_sd
        return (min(self.y.min() - width, -20.0), max(self.y.max() + width, 20.0))


def simulate_mixture_data(n, x_true=4.0, p=0.95, rng=0, noise_sd=10.0, signal_sd=1.0):
    """Draw ``n`` observations from the two-component mixture."""
    if n < 1:
        raise ValueError("n must be at least 1")
    gen = as_generator(rng)
    noise = gen.random(n) < p
    z = gen.standard_normal(n)
    return np.where(noise, noise_sd * z, x_true + signal_sd * z)


def load_dataset(path):
    data = np.loadtxt(path, delimiter=",", ndmin=1)
    return np.asarray(data, dtype=float).reshape(-1)


def save_dataset(path, y):
    from .io import atomic_write_text
    atomic_write_text(path, "".join(f"{float(v)!r}\n" for v in y))


# ---------------------------------------------------------------------------
# one-dimensional optimisation and quadrature helpers

_INVPHI = (math.sqrt(5) - 1) / 2


def golden_section_max(f, lo, hi, tol=1e-8, max_iter=200):
    """Vectorised golden-section search for the maximiser of ``f`` on ``[lo, hi]``."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    c = hi - _INVPHI * (hi - lo)
    d = lo + _INVPHI * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if np.all(hi - lo < tol):
            break
        left = fc > fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        new_c = hi - _INVPHI * (hi - lo)
        new_d = lo + _INVPHI * (hi - lo)
        # reuse the surviving interior point
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        fc_next = np.where(left, np.nan, fd)
        fd_next = np.where(left, fc, np.nan)
        need_c = np.isnan(fc_next)
        need_d = np.isnan(fd_next)
        if need_c.any():
            fc_next = np.where(need_c, f(c_next), fc_next)
        if need_d.any():
            fd_next = np.where(need_d, f(d_next), fd_next)
        c, d, fc, fd = c_next, d_next, fc_next, fd_next
    x = 0.5 * (lo + hi)
    return x, f(x)


@dataclass
class Posterior1D:
    """Normalised 1-D posterior tabulated on a trapezoid grid."""

    grid: np.ndarray
    pdf: np.ndarray
    mode: float
    mean: float
    sd: float
    _cdf: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self._cdf is None:
            seg = 0.5 * (self.pdf[1:] + self.pdf[:-1]) * np.diff(self.grid)
            self._cdf = np.concatenate([[0.0], np.cumsum(seg)])

    def cdf(self, x):
        return np.interp(x, self.grid, self._cdf, left=0.0, right=1.0)

    def density(self, x):
        return np.interp(x, self.grid, self.pdf, left=0.0, right=0.0)

    def expectation(self, fn):
        vals = fn(self.grid) * self.pdf
        return float(np.trapezoid(vals, self.grid))

    def quantile(self, q):
        return np.interp(q, self._cdf, self.grid)


def find_mode(target, lo=None, hi=None, n_grid=4001, tol=1e-8):
    """Posterior mode of a 1-D target: grid scan, then golden-section refinement."""
    if lo is None or hi is None:
        lo, hi = target.search_interval()
    grid = np.linspace(lo, hi, n_grid)
    lp = target.log_pi(grid[:, None])
    k = int(np.argmax(lp))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, n_grid - 1)]
    x, _ = golden_section_max(lambda z: target.log_pi(np.atleast_1d(z)[:, None]), [a], [b], tol=tol)
    return float(x[0])


def quadrature_posterior(target, rel_tol=1e-6, log_window=40.0, max_doublings=18):
    """Tabulate a 1-D posterior on a trapezoid grid refined by doubling.

    The support window is where the log density is within ``log_window`` of
    its maximum; the grid is doubled until the mean and standard deviation
    change by less than ``rel_tol`` (relative to the standard deviation).
    """
    lo, hi = target.search_interval()
    mode = find_mode(target, lo, hi)
    lmax = float(target.log_pi(np.array([[mode]]))[0])

    def edge(direction):
        step = 1e-3
        x = mode
        while True:
            nxt = x + direction * step
            if nxt < lo or nxt > hi:
                return lo if direction < 0 else hi
            if lmax - float(target.log_pi(np.array([[nxt]]))[0]) > log_window:
                return nxt
            x = nxt
            step *= 1.5

    a, b = edge(-1), edge(+1)
    prev = None
    m = 256
    for _ in range(max_doublings):
        grid = np.linspace(a, b, m + 1)
        dens = np.exp(target.log_pi(grid[:, None]) - lmax)
        z = np.trapezoid(dens, grid)
        pdf = dens / z
        mean = np.trapezoid(grid * pdf, grid)
        sd = math.sqrt(max(np.trapezoid((grid - mean) ** 2 * pdf, grid), 0.0))
        if prev is not None and abs(mean - prev[0]) < rel_tol * sd and abs(sd - prev[1]) < rel_tol * sd:
            break
        prev = (mean, sd)
        m *= 2
    return Posterior1D(grid, pdf, mode, float(mean), float(sd))


# ---------------------------------------------------------------------------
# bounds on factor derivatives

@dataclass
class FactorBoundTable:
    per_factor_max_abs_grad: np.ndarray
    per_factor_max_abs_hess: np.ndarray
    C: float
    interval: tuple
    inflation: float = 0.01

    @property
    def n(self):
        return len(self.per_factor_max_abs_grad)

    def to_json(self):
        return json.dumps({
            "per_factor_max_abs_grad": [float(v) for v in self.per_factor_max_abs_grad],
            "per_factor_max_abs_hess": [float(v) for v in self.per_factor_max_abs_hess],
            "C": float(self.C), "interval": [float(v) for v in self.interval],
            "inflation": self.inflation,
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(np.array(d["per_factor_max_abs_grad"]), np.array(d["per_factor_max_abs_hess"]),
                   d["C"], tuple(d["interval"]), d["inflation"])


def _max_abs_over_interval(fn, n, lo, hi, n_grid, chunk):
    """Per-factor ``max_x |fn(i, x)|`` on ``[lo, hi]``: grid scan then golden section."""
    grid = np.linspace(lo, hi, n_grid)
    h = grid[1] - grid[0]
    out = np.empty(n)
    for s in range(0, n, chunk):
        idx = np.arange(s, min(n, s + chunk))
        vals = np.abs(fn(idx[:, None], grid[None, :, None])[..., 0])
        k = np.argmax(vals, axis=1)
        best_grid = vals[np.arange(len(idx)), k]
        a = np.maximum(grid[k] - h, lo)
        b = np.minimum(grid[k] + h, hi)
        xr, fr = golden_section_max(lambda z: np.abs(fn(idx, z[:, None])[..., 0]), a, b, tol=1e-10)
        out[idx] = np.maximum(best_grid, fr)
    return out


def factor_bound_table(target, n_grid=2001, inflation=0.01, interval=None):
    """Bounds on ``|d/dx log pi_i|`` per factor and on ``|d^2/dx^2 log pi_i|``.

    Dense grid scan over the search interval, golden-section refinement
    around each grid maximiser, then inflation by ``inflation``.
    """
    if target.d != 1:
        raise ValueError("factor bound tables are one-dimensional")
    lo, hi = interval if interval is not None else target.search_interval()
    chunk = max(1, 4_000_000 // n_grid)
    g = _max_abs_over_interval(target.factor_grad, target.n, lo, hi, n_grid, chunk)
    hmax = _max_abs_over_interval(target.factor_hess_diag, target.n, lo, hi, n_grid, chunk)
    f = 1.0 + inflation
    return FactorBoundTable(g * f, hmax * f, float(hmax.max() * f), (float(lo), float(hi)), inflation)


def cached_factor_bound_table(target, cache_dir, **kw):
    """Bound table stored in a sidecar JSON file keyed by the dataset hash."""
    path = Path(cache_dir) / f"bounds-{target.dataset_hash()}.json"
    if path.exists():
        return FactorBoundTable.from_json(path.read_text())
    table = factor_bound_table(target, **kw)
    from .io import atomic_write_text
    atomic_write_text(path, table.to_json())
    return table


def global_rate_bound_simple(table):
    """``n * max_i max_x |grad log pi_i|``."""
    return float(table.n * np.max(table.per_factor_max_abs_grad))


def global_rate_bound_sum(table):
    """``sum_i max_x |grad log pi_i|``."""
    return float(np.sum(table.per_factor_max_abs_grad))


def max_abs_grad_bound(target, lo, hi, n_grid=4001, inflation=0.01):
    """``max |grad log pi(x)|`` over ``[lo, hi]`` (only valid for exact rates)."""
    grid = np.linspace(lo, hi, n_grid)
    vals = np.abs(target.grad_log_pi(grid[:, None])[:, 0])
    k = int(np.argmax(vals))
    h = grid[1] - grid[0]
    _, fr = golden_section_max(lambda z: np.abs(target.grad_log_pi(np.atleast_1d(z)[:, None])[:, 0]),
                               [max(grid[k] - h, lo)], [min(grid[k] + h, hi)], tol=1e-10)
    return float(max(vals[k], fr[0]) * (1 + inflation))


@dataclass
class ControlVariateCache:
    x_hat: np.ndarray
    grad_at_hat: np.ndarray
    per_factor_grad_at_hat: np.ndarray
    per_factor_hess_at_hat: np.ndarray
    second_deriv_at_hat: np.ndarray
    rho_hat: float


def build_cv_cache(target, x_hat):
    """Precompute everything the control-variate estimators need at ``x_hat``."""
    x_hat = np.atleast_1d(np.asarray(x_hat, dtype=float))
    pf_g = target.all_factor_grads(x_hat)
    g = pf_g.sum(axis=0)
    if target.has_second_derivatives:
        pf_h = target.all_factor_hess_diag(x_hat)
        h = pf_h.sum(axis=0)
        rho_hat = float(-0.5 * np.sum(h + g * g))
    else:
        pf_h = np.full_like(pf_g, np.nan)
        h = np.full_like(g, np.nan)
        rho_hat = float("nan")
    return ControlVariateCache(x_hat, g, pf_g, pf_h, h, rho_hat)


def cv_rate_bound(cache, table, x):
    """``|grad log pi(x_hat)| + n C |x - x_hat|`` (1-D)."""
    x = np.asarray(x, dtype=float)
    n = len(cache.per_factor_grad_at_hat)
    return abs(float(cache.grad_at_hat[0])) + n * table.C * np.abs(x - cache.x_hat[0])


def cv_rate_envelope(cache, table, x, v, horizon=math.inf):
    """The control-variate bound along the ray ``x + v s`` as a V-shaped RateBound."""
    from .pdp import RateBound
    x = float(np.asarray(x).reshape(-1)[0])
    v = float(np.asarray(v).reshape(-1)[0])
    n = len(cache.per_factor_grad_at_hat)
    base = abs(float(cache.grad_at_hat[0]))
    slope = n * table.C * abs(v)
    dist = x - cache.x_hat[0]
    a0 = base + n * table.C * abs(dist)
    if dist * v < 0 and slope > 0:
        s0 = abs(dist) / abs(v)
        if s0 < horizon:
            return RateBound([(0.0, s0, a0, -slope), (s0, horizon, base, slope)])
        return RateBound([(0.0, horizon, a0, -slope)])
    return RateBound([(0.0, horizon, a0, slope)])
