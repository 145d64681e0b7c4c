"""Continuous-time MCMC: pure reflection, Bouncy Particle and Zig-Zag samplers.

Event rates can be exact or built from unbiased sub-sampled gradient
estimators (simple, bound-weighted, control-variate, hybrid); the samplers
then remain exact-approximate and keep the target invariant.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .pdp import (CostCounters, EventSource, RateBound,
                  Skeleton, simulate_events)
from .rng import as_generator
from .targets import (GaussianTarget, cv_rate_envelope, global_rate_bound_simple,
                      global_rate_bound_sum)


class ConfigError(ValueError):
    pass


class UndefinedFlipError(ZeroDivisionError):
    pass


# ---------------------------------------------------------------------------
# sampler kinds

@dataclass(frozen=True)
class PureReflection:
    refresh_rate: float = 0.0
    name = "reflect"

    def __post_init__(self):
        if self.refresh_rate < 0:
            raise ConfigError("refresh_rate must be >= 0")


@dataclass(frozen=True)
class BPS:
    refresh_rate: float = 1.0
    name = "bps"

    def __post_init__(self):
        if not self.refresh_rate > 0:
            raise ConfigError("the Bouncy Particle Sampler needs a strictly positive refresh_rate")


@dataclass(frozen=True)
class ZigZag:
    name = "zigzag"


def sampler_kind(name, refresh_rate=None):
    if name == "reflect":
        return PureReflection(0.0 if refresh_rate is None else refresh_rate)
    if name == "bps":
        return BPS(1.0 if refresh_rate is None else refresh_rate)
    if name == "zigzag":
        return ZigZag()
    raise ConfigError(f"unknown sampler {name!r}")


# ---------------------------------------------------------------------------
# rates and flips

def canonical_rate(g, v):
    """``max(0, -v . g)`` for ``g = grad log pi(x)``."""
    return max(0.0, -float(np.dot(v, g)))


def random_rate(u, v):
    """``max(0, v . u)`` where ``u`` estimates ``-grad log pi(x)``."""
    return max(0.0, float(np.dot(v, u)))


def bps_flip(g, v):
    """Reflect ``v`` in the hyperplane orthogonal to ``g``."""
    g = np.asarray(g, dtype=float)
    v = np.asarray(v, dtype=float)
    gg = float(g @ g)
    if gg == 0.0:
        raise UndefinedFlipError("reflection undefined for a zero gradient")
    return v - 2.0 * (float(v @ g) / gg) * g


def zigzag_coordinate_rates(g, theta):
    """Per-coordinate canonical Zig-Zag rates ``max(0, -theta_i g_i)``."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.abs(theta) == 1.0):
        raise ValueError("Zig-Zag velocities must have entries in {-1, +1}")
    return np.maximum(0.0, -theta * np.asarray(g, dtype=float))


def zigzag_flip(theta, i):
    out = np.array(theta, dtype=float)
    out[i] = -out[i]
    return out


# ---------------------------------------------------------------------------
# gradient estimators

@dataclass
class GradientEstimate:
    u: np.ndarray
    factor_index: object = None


class RateEstimator:
    """Unbiased estimator ``U(x)`` of ``-grad log pi(x)``."""

    name = "estimator"
    cost = 1  # factor evaluations per draw

    def sample(self, target, x, gen):
        """``x`` has shape ``(K, d)``; returns ``(U, idx)`` with ``U`` of shape ``(K, d)``."""
        raise NotImplementedError

    def support(self, target, x):
        """All values ``U`` can take at ``x`` and their probabilities."""
        raise NotImplementedError

    def factor_cost(self, target):
        return self.cost


class Exact(RateEstimator):
    name = "exact"

    def sample(self, target, x, gen):
        return -target.grad_log_pi(x), None

    def support(self, target, x):
        return -target.grad_log_pi(np.asarray(x, dtype=float)[None, :]), np.ones(1)

    def factor_cost(self, target):
        return target.n


class SubsampleSimple(RateEstimator):
    name = "simple"

    def sample(self, target, x, gen):
        idx = gen.integers(target.n, size=len(x))
        return -target.n * target.factor_grad(idx, x), idx

    def support(self, target, x):
        x = np.asarray(x, dtype=float)
        return -target.n * target.all_factor_grads(x), np.full(target.n, 1.0 / target.n)


class SubsampleNonUniform(RateEstimator):
    """Factor ``i`` drawn with probability proportional to ``weights[i]``."""

    name = "nonuniform"

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        if np.any(w <= 0):
            raise ConfigError("non-uniform sampling weights must be positive")
        self.weights = w
        self.total = float(w.sum())
        self.probs = w / self.total
        self._cdf = np.cumsum(self.probs)
        self._cdf[-1] = 1.0

    def draw_index(self, gen, size):
        return np.minimum(np.searchsorted(self._cdf, gen.random(size), side="right"),
                          len(self._cdf) - 1)

    def sample(self, target, x, gen):
        idx = self.draw_index(gen, len(x))
        scale = (self.total / self.weights[idx])[:, None]
        return -scale * target.factor_grad(idx, x), idx

    def support(self, target, x):
        x = np.asarray(x, dtype=float)
        return -(self.total / self.weights)[:, None] * target.all_factor_grads(x), self.probs.copy()


class SubsampleCV(RateEstimator):
    """``-grad log pi(x_hat) + n (grad log pi_I(x_hat) - grad log pi_I(x))``."""

    name = "cv"

    def __init__(self, cache):
        self.cache = cache

    def sample(self, target, x, gen):
        c = self.cache
        idx = gen.integers(target.n, size=len(x))
        u = -c.grad_at_hat + target.n * (c.per_factor_grad_at_hat[idx] - target.factor_grad(idx, x))
        return u, idx

    def support(self, target, x):
        c = self.cache
        x = np.asarray(x, dtype=float)
        u = -c.grad_at_hat + target.n * (c.per_factor_grad_at_hat - target.all_factor_grads(x))
        return u, np.full(target.n, 1.0 / target.n)


class HybridCV(RateEstimator):
    """Control variates within ``radius`` of ``x_hat``, simple sub-sampling outside."""

    name = "hybrid"

    def __init__(self, cache, radius):
        self.cache = cache
        self.radius = float(radius)
        self._cv = SubsampleCV(cache)
        self._simple = SubsampleSimple()

    def _inside(self, x):
        return np.linalg.norm(np.asarray(x) - self.cache.x_hat, axis=-1) <= self.radius

    def sample(self, target, x, gen):
        idx = gen.integers(target.n, size=len(x))
        c = self.cache
        g_i = target.factor_grad(idx, x)
        cv = -c.grad_at_hat + target.n * (c.per_factor_grad_at_hat[idx] - g_i)
        return np.where(self._inside(x)[:, None], cv, -target.n * g_i), idx

    def support(self, target, x):
        inner = self._cv if self._inside(np.asarray(x, dtype=float)) else self._simple
        return inner.support(target, x)


def estimate_gradient(est, target, x, rng):
    """One draw of the estimator at a single point."""
    gen = as_generator(rng)
    u, idx = est.sample(target, np.atleast_2d(np.asarray(x, dtype=float)), gen)
    return GradientEstimate(u[0], None if idx is None else int(idx[0]))


def expected_rate(est, target, x, v):
    """Rate actually simulated by thinning with the random rate: ``E max(0, v . U)``."""
    u, p = est.support(target, x)
    return float(p @ np.maximum(0.0, u @ np.asarray(v, dtype=float)))


def estimator_variance(est, target, x):
    """Exact variance of the (1-D) estimator at ``x`` by enumeration."""
    u, p = est.support(target, x)
    m = p @ u
    return (p @ (u - m) ** 2)


# ---------------------------------------------------------------------------
# bound policies: envelopes along the current ray

class BoundPolicy:
    name = "bound"
    domain = None  # (lo, hi) box outside which the envelope is not valid

    def envelope(self, x, v, horizon, coord=None):
        raise NotImplementedError


class ConstantBound(BoundPolicy):
    def __init__(self, value, domain=None, name="constant"):
        self.value = float(value)
        self.domain = domain
        self.name = name

    def envelope(self, x, v, horizon, coord=None):
        return RateBound.constant(self.value)


class CVBound(BoundPolicy):
    name = "cv"

    def __init__(self, cache, table):
        self.cache = cache
        self.table = table
        self.domain = table.interval

    def envelope(self, x, v, horizon, coord=None):
        return cv_rate_envelope(self.cache, self.table, x, v)


class HybridBound(BoundPolicy):
    """CV envelope inside the hybrid radius, a global constant outside."""

    name = "hybrid"

    def __init__(self, cache, table, radius, outer, domain=None):
        self.cache = cache
        self.table = table
        self.radius = float(radius)
        self.outer = float(outer)
        self.domain = domain

    def envelope(self, x, v, horizon, coord=None):
        x0 = float(np.asarray(x).reshape(-1)[0] - self.cache.x_hat[0])
        v0 = float(np.asarray(v).reshape(-1)[0])
        base = abs(float(self.cache.grad_at_hat[0]))
        k = len(self.cache.per_factor_grad_at_hat) * self.table.C
        breaks = [0.0]
        if v0 != 0:
            for level in (-self.radius, 0.0, self.radius):
                s = (level - x0) / v0
                if s > 0:
                    breaks.append(s)
        breaks = sorted(set(breaks)) + [math.inf]
        segs = []
        for s0, s1 in zip(breaks[:-1], breaks[1:]):
            mid = s0 + (1.0 if math.isinf(s1) else 0.5 * (s1 - s0))
            d_mid = x0 + v0 * mid
            if abs(d_mid) <= self.radius:
                d0 = x0 + v0 * s0
                slope = k * v0 * (1.0 if d_mid >= 0 else -1.0)
                segs.append((s0, s1, base + k * abs(d0), slope))
            else:
                segs.append((s0, s1, self.outer, 0.0))
        return RateBound(segs)


class GaussianExactBound(BoundPolicy):
    """Exact canonical rates along a ray for a Gaussian target (tight envelope)."""

    name = "gaussian"

    def __init__(self, target, epsilon=0.0):
        if not isinstance(target, GaussianTarget):
            raise ConfigError("the exact Gaussian envelope needs a GaussianTarget")
        self.target = target
        self.epsilon = float(epsilon)

    def envelope(self, x, v, horizon, coord=None):
        if coord is None:
            a, b = self.target.ray_coefficients(x, v)
        else:
            a, b = self.target.coordinate_ray_coefficients(x, v, coord)
        return _positive_part_linear(a, b, self.epsilon)


def _positive_part_linear(a, b, eps=0.0):
    """Envelope of ``max(0, a + b s) + eps`` for ``b >= 0``."""
    b = max(b, 0.0)
    if a >= 0:
        return RateBound.linear(a + eps, b)
    if b == 0:
        return RateBound.constant(eps)
    s0 = -a / b
    return RateBound([(0.0, s0, eps, 0.0), (s0, math.inf, eps, b)])


def make_bound(name, target, table=None, cache=None, estimator=None, hybrid_radius=None,
               domain=None, max_grad=None):
    """Bound policy by name: ``simple``, ``sum``, ``max``, ``cv``, ``hybrid``, ``gaussian``."""
    if name == "gaussian":
        return GaussianExactBound(target)
    if table is None:
        raise ConfigError(f"bound {name!r} needs a factor bound table")
    dom = domain if domain is not None else table.interval
    if name == "simple":
        return ConstantBound(global_rate_bound_simple(table), dom, "simple")
    if name == "sum":
        return ConstantBound(global_rate_bound_sum(table), dom, "sum")
    if name == "max":
        if estimator is not None and not isinstance(estimator, Exact):
            raise ConfigError("the max-gradient bound is only valid with exact rates")
        if max_grad is None:
            raise ConfigError("bound 'max' needs the maximal |grad log pi| value")
        return ConstantBound(max_grad, dom, "max")
    if name == "cv":
        if cache is None:
            raise ConfigError("bound 'cv' needs a control-variate cache")
        return CVBound(cache, table)
    if name == "hybrid":
        return HybridBound(cache, table, hybrid_radius, global_rate_bound_simple(table), dom)
    raise ConfigError(f"unknown bound {name!r}")


def check_bound_compatibility(estimator, bound):
    """Reject estimator/bound pairs where the envelope cannot dominate the random rate."""
    if isinstance(bound, ConstantBound) and bound.name == "sum" and isinstance(
            estimator, (SubsampleSimple, SubsampleCV, HybridCV)):
        raise ConfigError("bound 'sum' dominates only exact or non-uniform sub-sampled rates")
    if isinstance(bound, ConstantBound) and bound.name == "simple" and isinstance(
            estimator, (SubsampleCV, HybridCV)):
        raise ConfigError("control-variate rates need bound 'cv' or 'hybrid'")
    if isinstance(bound, CVBound) and not isinstance(estimator, (SubsampleCV, Exact)):
        raise ConfigError("bound 'cv' dominates control-variate (or exact) rates only")
    if isinstance(bound, HybridBound) and not isinstance(estimator, HybridCV):
        raise ConfigError("bound 'hybrid' is for the hybrid estimator")
    if isinstance(estimator, (SubsampleCV, HybridCV)) and not isinstance(bound, (CVBound, HybridBound)):
        raise ConfigError("control-variate estimators need a state-dependent bound")


# ---------------------------------------------------------------------------
# event sources

def _positions(x, v, s):
    return x[None, :] + s[:, None] * v[None, :]


def _domain_mask(domain, xs):
    if domain is None:
        return None
    lo, hi = domain
    out = np.any((xs < lo) | (xs > hi), axis=-1)
    return out if out.any() else None


class _Bounce(EventSource):
    name = "bounce"

    def __init__(self, kind, estimator, target, bound, epsilon):
        self.kind = kind
        self.estimator = estimator
        self.target = target
        self.bound = bound
        self.epsilon = epsilon
        self.cost_per_proposal = estimator.factor_cost(target)
        self.max_block = max(8, 400_000 // max(1, self.cost_per_proposal))
        self._gen = None

    def envelope(self, x, v, horizon):
        return self.bound.envelope(x, v, horizon)

    def rates(self, x, v, s):
        xs = _positions(x, v, s)
        u, _ = self.estimator.sample(self.target, xs, self._gen)
        r = np.maximum(0.0, u @ v) + self.epsilon
        out = _domain_mask(self.bound.domain, xs)
        if out is not None:
            r = np.where(out, np.inf, r)
        return r, u

    def next_event(self, x, v, horizon, rng):
        self._gen = rng
        return super().next_event(x, v, horizon, rng)

    def jump(self, x, v, u, rng):
        if isinstance(self.kind, BPS):
            return bps_flip(u, v), "reflection"
        return -v, "reflection"


class _ZigZagCoordinate(EventSource):
    def __init__(self, i, estimator, target, bound, epsilon):
        self.i = i
        self.name = f"flip({i})"
        self.estimator = estimator
        self.target = target
        self.bound = bound
        self.epsilon = epsilon
        self.cost_per_proposal = estimator.factor_cost(target)
        self.max_block = max(8, 400_000 // max(1, self.cost_per_proposal))
        self._gen = None

    def envelope(self, x, v, horizon):
        return self.bound.envelope(x, v, horizon, coord=self.i if len(x) > 1 else None)

    def rates(self, x, v, s):
        xs = _positions(x, v, s)
        u, _ = self.estimator.sample(self.target, xs, self._gen)
        r = np.maximum(0.0, v[self.i] * u[:, self.i]) + self.epsilon
        out = _domain_mask(self.bound.domain, xs)
        if out is not None:
            r = np.where(out, np.inf, r)
        return r

    def next_event(self, x, v, horizon, rng):
        self._gen = rng
        return super().next_event(x, v, horizon, rng)

    def jump(self, x, v, payload, rng):
        return zigzag_flip(v, self.i), self.name


class _Refresh(EventSource):
    name = "refresh"

    def __init__(self, rate, speed=1.0):
        self.rate = float(rate)
        self.speed = speed

    def envelope(self, x, v, horizon):
        return RateBound.constant(self.rate)

    def rates(self, x, v, s):
        return np.full(len(s), self.rate)

    def jump(self, x, v, payload, rng):
        z = rng.standard_normal(len(v))
        return self.speed * z / np.linalg.norm(z), "refresh"


@dataclass
class CtmcmcResult:
    skeleton: Skeleton
    counters: CostCounters
    info: dict = field(default_factory=dict)


def validate_sampler_config(kind, d, v0, epsilon=0.0):
    v0 = np.asarray(v0, dtype=float).reshape(-1)
    if len(v0) != d:
        raise ConfigError(f"velocity has dimension {len(v0)}, target has {d}")
    if isinstance(kind, PureReflection) and d > 1 and kind.refresh_rate == 0:
        raise ConfigError("pure reflection without refresh in d > 1: this process would be reducible")
    if isinstance(kind, ZigZag):
        if not np.all(np.abs(v0) == 1.0):
            raise ConfigError("Zig-Zag velocities must have entries in {-1, +1}")
    elif abs(np.linalg.norm(v0) - 1.0) > 1e-12:
        raise ConfigError("reflection/BPS velocities must have unit speed")
    if epsilon < 0:
        raise ConfigError("epsilon must be non-negative")
    if epsilon > 0 and isinstance(kind, BPS):
        raise ConfigError("an excess rate epsilon is only supported for reflection and Zig-Zag")


def run_ctmcmc(kind, estimator, target, bound, x0, v0, T, rng, epsilon=0.0, meta=None):
    """Simulate a continuous-time MCMC sampler for time ``T``.

    Every putative event from the envelope draws a fresh estimator
    realisation ``u`` and is accepted with probability
    ``(max(0, v . u) + epsilon) / envelope``; the Bouncy Particle flip reuses
    that same ``u``. Refresh events come from an independent constant-rate
    Poisson process.
    """
    gen = as_generator(rng)
    d = target.d
    validate_sampler_config(kind, d, v0, epsilon)
    check_bound_compatibility(estimator, bound)
    if isinstance(kind, ZigZag):
        sources = [_ZigZagCoordinate(i, estimator, target, bound, epsilon) for i in range(d)]
    else:
        sources = [_Bounce(kind, estimator, target, bound, epsilon)]
        if kind.refresh_rate > 0:
            sources.append(_Refresh(kind.refresh_rate))
    info = {"sampler": kind.name, "estimator": estimator.name, "bound": bound.name}
    info.update(meta or {})
    skel, counters = simulate_events(x0, v0, sources, T, gen, meta=info)
    return CtmcmcResult(skel, counters, info)
