"""Continuous-time importance sampling (CIS) with SCALE and Langevin weights.

A CIS particle carries the position ``y`` at its last event, a signed weight
``w`` and the time ``s`` since that event. Events arrive at rate
``lambda~(s)``; at an event a new position is drawn from the proposal
transition ``q_s(.|y)`` and the weight is multiplied by ``1 + rho / lambda~``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .pdp import first_event_inversion
from .rng import as_generator


class CisConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# proposals

class BrownianProposal:
    """Brownian transition ``q_s(x|y) = N(x; y, s I)``."""

    name = "brownian"

    def _check(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s <= 0):
            raise ValueError("transition time s must be positive")
        return s

    def log_density(self, x, y, s):
        s = self._check(s)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        d = x.shape[-1]
        r2 = np.sum((x - y) ** 2, axis=-1)
        return -0.5 * d * np.log(2 * np.pi * s) - r2 / (2 * s)

    def density(self, x, y, s):
        return np.exp(self.log_density(x, y, s))

    def sample(self, y, s, gen):
        y = np.asarray(y, dtype=float)
        s = self._check(s)
        return y + np.sqrt(s)[..., None] * gen.standard_normal(y.shape)

    def grad_log_x(self, x, y, s):
        return -(np.asarray(x) - np.asarray(y)) / np.asarray(s)[..., None]

    def ds_log(self, x, y, s):
        s = self._check(s)
        x = np.asarray(x, dtype=float)
        r2 = np.sum((x - np.asarray(y)) ** 2, axis=-1)
        return -0.5 * x.shape[-1] / s + r2 / (2 * s * s)

    def laplacian_over_q(self, x, y, s):
        s = self._check(s)
        x = np.asarray(x, dtype=float)
        r2 = np.sum((x - np.asarray(y)) ** 2, axis=-1)
        return -x.shape[-1] / s + r2 / (s * s)

    def diffusion_mismatch(self, x, y, s):
        """``(0.5 * Laplacian q - dq/ds) / q``; zero for the heat kernel."""
        return np.zeros(np.shape(s))


class StudentTProposal:
    """Multivariate-t transition with scale ``s`` and ``nu`` degrees of freedom.

    ``q_s(x|y) = c_d s^{-d/2} (1 + |x - y|^2 / (nu s))^{-(nu + d)/2}`` with the
    usual multivariate-t normalising constant ``c_d``.
    """

    name = "student_t"

    def __init__(self, nu):
        if not nu > 0:
            raise CisConfigError("degrees of freedom must be positive")
        self.nu = float(nu)

    def log_norm(self, d):
        nu = self.nu
        return gammaln((nu + d) / 2) - gammaln(nu / 2) - 0.5 * d * math.log(nu * math.pi)

    def _parts(self, x, y, s):
        s = np.asarray(s, dtype=float)
        if np.any(s <= 0):
            raise ValueError("transition time s must be positive")
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        d = x.shape[-1]
        diff = x - y
        r2 = np.sum(diff * diff, axis=-1)
        A = 1.0 + r2 / (self.nu * s)
        m = 0.5 * (self.nu + d)
        return s, diff, r2, A, m, d

    def log_density(self, x, y, s):
        s, diff, r2, A, m, d = self._parts(x, y, s)
        return self.log_norm(d) - 0.5 * d * np.log(s) - m * np.log(A)

    def density(self, x, y, s):
        return np.exp(self.log_density(x, y, s))

    def sample(self, y, s, gen):
        y = np.asarray(y, dtype=float)
        s = np.asarray(s, dtype=float)
        z = gen.standard_normal(y.shape)
        chi = gen.chisquare(self.nu, size=y.shape[:-1])
        return y + (np.sqrt(s * self.nu / chi))[..., None] * z

    def grad_log_x(self, x, y, s):
        s, diff, r2, A, m, d = self._parts(x, y, s)
        return -2 * m * diff / (self.nu * s * A)[..., None]

    def ds_log(self, x, y, s):
        s, diff, r2, A, m, d = self._parts(x, y, s)
        return -0.5 * d / s + m * r2 / (self.nu * s * s * A)

    def laplacian_over_q(self, x, y, s):
        s, diff, r2, A, m, d = self._parts(x, y, s)
        k = self.nu * s * A
        second = -2 * m * d / k + 4 * m * r2 / (k * k)
        first_sq = 4 * m * m * r2 / (k * k)
        return second + first_sq

    def diffusion_mismatch(self, x, y, s):
        return 0.5 * self.laplacian_over_q(x, y, s) - self.ds_log(x, y, s)


# ---------------------------------------------------------------------------
# rho: exact forms

def _row(x):
    return np.atleast_2d(np.asarray(x, dtype=float))


def scale_rho(target, x):
    """``-0.5 sum_i [d2 log pi + (d log pi)^2]``; independent of ``(y, s)``."""
    X = _row(x)
    g = target.grad_log_pi(X)
    h = target.hess_diag_log_pi(X)
    out = -0.5 * np.sum(h + g * g, axis=-1)
    return float(out[0]) if np.ndim(x) <= 1 else out


def langevin_rho(target, x, y, s):
    """Weight function when CIS with Brownian proposals targets the Langevin diffusion."""
    if np.any(np.asarray(s) <= 0):
        raise ValueError("s must be positive")
    X, Y = _row(x), _row(y)
    g = target.grad_log_pi(X)
    h = target.hess_diag_log_pi(X)
    out = -0.5 * np.sum((Y - X) / np.asarray(s, dtype=float).reshape(-1, 1) * g + h, axis=-1)
    return float(out[0]) if np.ndim(x) <= 1 else out


def incremental_rho_generic(Lstar_q, dq_ds, q, x, y, s):
    """``(L* q - dq/ds) / q`` from caller-supplied operator applications.

    Each callable takes ``(x, y, s)``; ``Lstar_q`` applies the target
    process's Fokker-Planck operator (acting on ``x``) to the proposal density.
    """
    qv = float(q(x, y, s))
    if not qv > 0:
        raise ValueError("proposal density must be positive")
    return (float(Lstar_q(x, y, s)) - float(dq_ds(x, y, s))) / qv


def brownian_motion_operators(proposal):
    """``(Lstar_q, dq_ds, q)`` when the target process is Brownian motion itself."""
    def q(x, y, s):
        return float(proposal.density(x, y, s))

    def dq_ds(x, y, s):
        return q(x, y, s) * float(proposal.ds_log(x, y, s))

    def Lstar_q(x, y, s):
        return 0.5 * q(x, y, s) * float(proposal.laplacian_over_q(x, y, s))

    return Lstar_q, dq_ds, q


def scale_operators(target, proposal):
    """``(Lstar_q, dq_ds, q)`` for the SCALE target process (1 point at a time).

    The killing term uses ``-0.5 Laplacian(pi) / pi = scale_rho``.
    """
    def q(x, y, s):
        return float(proposal.density(x, y, s))

    def dq_ds(x, y, s):
        return q(x, y, s) * float(proposal.ds_log(x, y, s))

    def Lstar_q(x, y, s):
        qv = q(x, y, s)
        return 0.5 * qv * float(proposal.laplacian_over_q(x, y, s)) + scale_rho(target, x) * qv

    return Lstar_q, dq_ds, q


def langevin_operators(target, proposal):
    """``(Lstar_q, dq_ds, q)`` for the Langevin diffusion with invariant law ``pi``."""
    def q(x, y, s):
        return float(proposal.density(x, y, s))

    def dq_ds(x, y, s):
        return q(x, y, s) * float(proposal.ds_log(x, y, s))

    def Lstar_q(x, y, s):
        qv = q(x, y, s)
        X = _row(x)
        g = target.grad_log_pi(X)[0]
        h = target.hess_diag_log_pi(X)[0]
        gq = qv * np.asarray(proposal.grad_log_x(x, y, s)).reshape(-1)
        lap = 0.5 * qv * float(proposal.laplacian_over_q(x, y, s))
        return lap - 0.5 * float(np.sum(gq * g + qv * h))

    return Lstar_q, dq_ds, q


# ---------------------------------------------------------------------------
# rho: sub-sampled estimators

def _pair(target, X, gen, j, k):
    m = len(X)
    if j is None:
        j = gen.integers(target.n, size=m)
    if k is None:
        k = gen.integers(target.n, size=m)
    return np.broadcast_to(np.asarray(j), (m,)), np.broadcast_to(np.asarray(k), (m,))


def scale_rho_subsample(target, x, rng=None, j=None, k=None):
    """Two-index estimator ``-0.5 sum [n h_j + n^2 g_j g_k]`` of the SCALE rho."""
    X = _row(x)
    j, k = _pair(target, X, as_generator(rng) if (j is None or k is None) else None, j, k)
    n = target.n
    gj = target.factor_grad(j, X)
    gk = target.factor_grad(k, X)
    hj = target.factor_hess_diag(j, X)
    out = -0.5 * np.sum(n * hj + n * n * gj * gk, axis=-1)
    return float(out[0]) if np.ndim(x) <= 1 and np.ndim(j) <= 1 and len(out) == 1 else out


def scale_rho_cv(target, cache, x, rng=None, j=None, k=None):
    """Control-variate estimator of the SCALE rho around ``cache.x_hat``.

    ``-n/2 sum {[h_j(x) - h_j(x_hat)] + n [g_j(x) - g_j(x_hat)]
    [g_k(x) - g_k(x_hat) + 2 G(x_hat)/n]} + rho_hat`` with independent
    uniform ``j`` and ``k``. Using the same index in both gradient
    differences would bias the estimator by the variance of the differences.
    """
    X = _row(x)
    j, k = _pair(target, X, as_generator(rng) if (j is None or k is None) else None, j, k)
    n = target.n
    dgj = target.factor_grad(j, X) - cache.per_factor_grad_at_hat[j]
    dgk = target.factor_grad(k, X) - cache.per_factor_grad_at_hat[k]
    dhj = target.factor_hess_diag(j, X) - cache.per_factor_hess_at_hat[j]
    inner = dhj + n * dgj * (dgk + 2.0 * cache.grad_at_hat / n)
    out = -0.5 * n * np.sum(inner, axis=-1) + cache.rho_hat
    return float(out[0]) if np.ndim(x) <= 1 and len(out) == 1 else out


def langevin_rho_subsample(target, x, y, s, rng=None, j=None):
    """Single-index estimator ``-n/2 sum [(y - x)/s g_j + h_j]``."""
    X, Y = _row(x), _row(y)
    if j is None:
        j = as_generator(rng).integers(target.n, size=len(X))
    j = np.broadcast_to(np.asarray(j), (len(X),))
    s = np.asarray(s, dtype=float).reshape(-1, 1)
    if np.any(s <= 0):
        raise ValueError("s must be positive")
    n = target.n
    out = -0.5 * n * np.sum((Y - X) / s * target.factor_grad(j, X) + target.factor_hess_diag(j, X), axis=-1)
    return float(out[0]) if np.ndim(x) <= 1 and len(out) == 1 else out


def scale_rho_pairs(target, x, cache=None):
    """Every ``(j, k)`` value of the two-index estimator (exact or CV) at one point.

    Returns an ``(n, n)`` array, used for exhaustive unbiasedness and variance checks.
    """
    X = _row(x)
    n = target.n
    g = target.all_factor_grads(X[0])
    h = target.all_factor_hess_diag(X[0])
    if cache is None:
        return -0.5 * (n * h.sum(-1)[:, None] + n * n * (g @ g.T))
    dg = g - cache.per_factor_grad_at_hat
    dh = h - cache.per_factor_hess_at_hat
    cross = dg @ (dg + 2.0 * cache.grad_at_hat / n).T
    return -0.5 * n * (dh.sum(-1)[:, None] + n * cross) + cache.rho_hat


def rho_estimator_variance(target, x, cache=None):
    """Exact variance of the two-index rho estimator at ``x`` by enumeration."""
    vals = scale_rho_pairs(target, x, cache)
    return float(np.var(vals))


# ---------------------------------------------------------------------------
# rho evaluators used by the particle propagators

class RhoFn:
    """Vectorised ``rho(x_new, y_old, s, gen) -> (values, data_accesses)``."""

    name = "rho"

    def __call__(self, x, y, s, gen):
        raise NotImplementedError


class ScaleRho(RhoFn):
    """SCALE weights; ``variant`` is ``exact``, ``subsample`` or ``cv``.

    Non-Brownian proposals add their diffusion mismatch term.
    """

    def __init__(self, target, variant="exact", cache=None, proposal=None):
        if variant not in ("exact", "subsample", "cv"):
            raise CisConfigError(f"unknown rho variant {variant!r}")
        if variant == "cv" and cache is None:
            raise CisConfigError("the control-variate rho needs a cache")
        self.target = target
        self.variant = variant
        self.cache = cache
        self.proposal = proposal
        self.name = f"scale-{variant}"

    def __call__(self, x, y, s, gen):
        m = len(x)
        if self.variant == "exact":
            vals = np.atleast_1d(scale_rho(self.target, x))
            acc = np.full(m, self.target.n)
        elif self.variant == "subsample":
            vals = np.atleast_1d(scale_rho_subsample(self.target, x, gen))
            acc = np.full(m, 2)
        else:
            vals = np.atleast_1d(scale_rho_cv(self.target, self.cache, x, gen))
            acc = np.full(m, 2)
        if self.proposal is not None:
            vals = vals + self.proposal.diffusion_mismatch(x, y, s)
        return vals, acc


class LangevinRho(RhoFn):
    def __init__(self, target, variant="exact"):
        if variant not in ("exact", "subsample"):
            raise CisConfigError(f"unknown Langevin rho variant {variant!r}")
        self.target = target
        self.variant = variant
        self.name = f"langevin-{variant}"

    def __call__(self, x, y, s, gen):
        if self.variant == "exact":
            return np.atleast_1d(langevin_rho(self.target, x, y, s)), np.full(len(x), self.target.n)
        return np.atleast_1d(langevin_rho_subsample(self.target, x, y, s, gen)), np.ones(len(x), int)


class GenericRho(RhoFn):
    """Weights from ``(Lstar_q, dq_ds, q)`` operator callables, one particle at a time."""

    def __init__(self, operators, accesses=0, name="generic"):
        self.operators = operators
        self.accesses = int(accesses)
        self.name = name

    def __call__(self, x, y, s, gen):
        vals = np.array([incremental_rho_generic(*self.operators, xi, yi, si)
                         for xi, yi, si in zip(x, y, np.asarray(s, dtype=float))])
        return vals, np.full(len(x), self.accesses)


class ConstantRho(RhoFn):
    """Synthetic constant rho (``0`` when the proposal equals the target)."""

    def __init__(self, c=0.0):
        self.c = float(c)
        self.name = f"constant({self.c})"

    def __call__(self, x, y, s, gen):
        return np.full(len(x), self.c), np.zeros(len(x), int)


# ---------------------------------------------------------------------------
# event-rate policies

class RatePolicy:
    """Event rate ``lambda~(s)``, possibly depending on the position at the last event."""

    name = "rate"

    def rate(self, y, s):
        raise NotImplementedError

    def next_gap(self, y, s, gen):
        """Time to the next event for particles at elapsed time ``s`` since their last event."""
        raise NotImplementedError

    def _checked(self, r):
        r = np.asarray(r, dtype=float)
        if np.any(~(r > 0)):
            raise CisConfigError("event rate must be strictly positive")
        return r


class ConstantRate(RatePolicy):
    def __init__(self, rate):
        self.value = float(rate)
        self._checked(self.value)
        self.name = f"constant({self.value:g})"

    def rate(self, y, s):
        return np.full(np.shape(s), self.value)

    def next_gap(self, y, s, gen):
        return gen.exponential(size=np.shape(s)) / self.value


class AnchorRate(RatePolicy):
    """Rate constant in ``s``, set from the position at the most recent event."""

    def __init__(self, fn, name="anchor"):
        self.fn = fn
        self.name = name

    def rate(self, y, s):
        return self._checked(self.fn(np.asarray(y, dtype=float)))

    def next_gap(self, y, s, gen):
        return gen.exponential(size=np.shape(s)) / self.rate(y, s)


def quadratic_anchor_rate(n, x_hat, a=2.0, b=4.0):
    """``a n + b n^2 |y - x_hat|^2`` as used for the control-variate weights."""
    x_hat = np.atleast_1d(np.asarray(x_hat, dtype=float))

    def fn(y):
        return a * n + b * n * n * np.sum((y - x_hat) ** 2, axis=-1)

    return AnchorRate(fn, name=f"{a:g}n+{b:g}n^2(y-xhat)^2")


class TimeVaryingRate(RatePolicy):
    """General ``lambda~(s)`` simulated by inverting its integral per particle."""

    def __init__(self, fn, cumulative=None, inverse=None, name="time-varying"):
        self.fn = fn
        self.cumulative = cumulative
        self.inverse = inverse
        self.name = name

    def rate(self, y, s):
        return self._checked(np.vectorize(self.fn)(np.asarray(s, dtype=float)))

    def _cum(self, s):
        if self.cumulative is not None:
            return float(self.cumulative(s))
        from scipy.integrate import quad
        return quad(self.fn, 0.0, s, limit=200)[0]

    def next_gap(self, y, s, gen):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        e = gen.exponential(size=s.shape)
        out = np.empty_like(s)
        for i, (s0, ei) in enumerate(zip(s, e)):
            base = self._cum(s0)
            if self.inverse is not None:
                out[i] = float(self.inverse(base + ei)) - s0
            else:
                out[i] = first_event_inversion(lambda u: self._cum(s0 + u) - base, ei)
        return out


# ---------------------------------------------------------------------------
# single-particle CIS

@dataclass
class CisParticle:
    y: np.ndarray
    w: float = 1.0
    s: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if self.s < 0:
            raise ValueError("s must be non-negative")


@dataclass
class CisStepResult:
    particle: CisParticle
    x: np.ndarray = None  # position at the horizon when it was reached
    event: bool = False
    sign_change: bool = False
    data_accesses: int = 0


def cis_step(particle, proposal, rho, rate, horizon, rng):
    """Advance one particle to its next event or to the absolute time ``horizon``."""
    gen = as_generator(rng)
    p = particle
    y = p.y[None, :]
    s_arr = np.array([p.s])
    gap = float(rate.next_gap(y, s_arr, gen)[0])
    remaining = horizon - p.t
    if gap > remaining:
        s_end = p.s + remaining
        x = p.y.copy() if s_end == 0 else proposal.sample(y, np.array([s_end]), gen)[0]
        return CisStepResult(CisParticle(p.y, p.w, s_end, horizon), x=x)
    s_new = p.s + gap
    y_new = proposal.sample(y, np.array([s_new]), gen)
    lam = float(rate.rate(y, np.array([s_new]))[0])
    r, acc = rho(y_new, y, np.array([s_new]), gen)
    w_new = p.w * (1.0 + float(r[0]) / lam)
    return CisStepResult(CisParticle(y_new[0], w_new, 0.0, p.t + gap), event=True,
                         sign_change=(w_new < 0) != (p.w < 0), data_accesses=int(acc[0]))


@dataclass
class CisTrajectory:
    times: np.ndarray
    positions: np.ndarray
    weights: np.ndarray
    x_T: np.ndarray
    w_T: float
    data_accesses: int
    sign_changes: int
    info: dict = field(default_factory=dict)


def run_cis(y0, proposal, rho, rate, T, rng, w0=1.0):
    """Single CIS path to time ``T``; returns the event trajectory and ``(X_T, W_T)``."""
    gen = as_generator(rng)
    p = CisParticle(y0, w0)
    times, ys, ws = [0.0], [p.y.copy()], [p.w]
    acc = flips = 0
    while True:
        out = cis_step(p, proposal, rho, rate, T, gen)
        p = out.particle
        if not out.event:
            return CisTrajectory(np.array(times), np.array(ys), np.array(ws), out.x, p.w, acc, flips,
                                 {"rho": rho.name, "rate": rate.name, "proposal": proposal.name})
        acc += out.data_accesses
        flips += out.sign_change
        times.append(p.t)
        ys.append(p.y.copy())
        ws.append(p.w)


def run_cis_scale(target, variant, rate, T, rng, y0=None, cache=None, proposal=None):
    """CIS targeting the SCALE process for ``target``."""
    proposal = proposal or BrownianProposal()
    rho = ScaleRho(target, variant, cache, None if isinstance(proposal, BrownianProposal) else proposal)
    y0 = np.zeros(target.d) if y0 is None else y0
    return run_cis(y0, proposal, rho, rate, T, rng)
