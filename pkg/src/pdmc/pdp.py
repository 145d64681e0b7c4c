"""Piecewise deterministic process machinery.

Constant-velocity flow, event-time simulation by inversion and by thinning
against piecewise-linear envelopes, skeleton recording and reconstruction.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .rng import as_generator

# relative slack tolerated when comparing an evaluated rate with its envelope
BOUND_RTOL = 1e-9
BOUND_ATOL = 1e-12


class InvalidBoundError(RuntimeError):
    """An envelope failed to dominate the rate it was meant to bound."""

    def __init__(self, u, rate, bound, detail=""):
        self.u = float(u)
        self.rate = float(rate)
        self.bound = float(bound)
        msg = f"invalid bound at u={self.u:.6g}: rate {self.rate:.6g} > bound {self.bound:.6g}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteStateError(FloatingPointError):
    def __init__(self, message, skeleton=None):
        super().__init__(message)
        self.skeleton = skeleton


class MonotonicityError(ValueError):
    pass


def deterministic_flow(x, v, s):
    """Position after moving for time ``s`` at constant velocity ``v``."""
    if s < 0:
        raise ValueError(f"flow duration must be non-negative, got {s}")
    return np.asarray(x, dtype=float) + s * np.asarray(v, dtype=float)


def first_event_inversion(cumulative_rate, u, horizon=math.inf, inverse=None,
                          check_points=64):
    """Solve ``Lambda(s) = u`` for the first event time.

    ``cumulative_rate`` is the integrated rate Lambda with Lambda(0) = 0. When
    ``inverse`` is supplied it is used directly; otherwise the root is found
    numerically after bracketing. Returns ``math.inf`` when no event happens
    before ``horizon`` (Lambda(horizon) < u, including Lambda bounded).
    """
    if u < 0:
        raise ValueError("u must be an Exp(1) draw (non-negative)")
    lam0 = cumulative_rate(0.0)
    if abs(lam0) > 1e-12:
        raise MonotonicityError(f"cumulative rate must vanish at 0, got {lam0}")

    if inverse is not None:
        s = float(inverse(u))
        if not (s >= 0):
            return math.inf
        if s > horizon:
            return math.inf
        _check_monotone(cumulative_rate, s if math.isfinite(s) else 1.0, check_points)
        return s

    # bracket the root by doubling
    hi = 1.0 if not math.isfinite(horizon) else min(1.0, horizon)
    while cumulative_rate(hi) < u:
        if hi >= horizon:
            _check_monotone(cumulative_rate, hi, check_points)
            return math.inf
        hi = min(hi * 2.0, horizon)
        if hi > 1e300:
            return math.inf
    _check_monotone(cumulative_rate, hi, check_points)
    if u == 0:
        return 0.0
    return brentq(lambda s: cumulative_rate(s) - u, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)


def _check_monotone(cumulative_rate, upper, n):
    grid = np.linspace(0.0, upper, n)
    vals = np.array([cumulative_rate(g) for g in grid])
    drops = np.diff(vals) < -1e-12 * np.maximum(1.0, np.abs(vals[1:]))
    if np.any(drops):
        k = int(np.argmax(drops))
        raise MonotonicityError(
            f"cumulative rate decreases between s={grid[k]:.6g} and s={grid[k + 1]:.6g}"
        )


class RateBound:
    """Piecewise-linear, non-negative rate envelope.

    Segment k covers ``[starts[k], ends[k])`` with value
    ``a[k] + b[k] * (u - starts[k])``. The last segment may extend to infinity.
    """

    def __init__(self, segments):
        seg = np.asarray(segments, dtype=float).reshape(-1, 4)
        if len(seg) == 0:
            raise ValueError("a RateBound needs at least one segment")
        self.starts, self.ends, self.a, self.b = seg.T.copy()
        if self.starts[0] != 0.0:
            raise ValueError("first segment must start at 0")
        if np.any(self.ends <= self.starts):
            raise ValueError("segments must have positive length")
        if np.any(self.starts[1:] != self.ends[:-1]):
            raise ValueError("segments must be contiguous")
        lengths = self.ends - self.starts
        finite = np.isfinite(lengths)
        end_vals = np.where(finite, self.a + self.b * np.where(finite, lengths, 0.0), np.inf)
        if np.any(self.a < -BOUND_ATOL) or np.any(end_vals[finite] < -1e-9 * np.maximum(1, np.abs(self.a[finite]))):
            raise ValueError("bound must be non-negative on every segment")
        if np.any(~finite & (self.b < 0)):
            raise ValueError("an unbounded segment cannot have negative slope")
        mass = np.where(finite, self.a * np.where(finite, lengths, 0) + 0.5 * self.b * np.where(finite, lengths, 0) ** 2, 0.0)
        inf_mass = ~finite & ((self.a > 0) | (self.b > 0))
        mass = np.where(inf_mass, np.inf, mass)
        self._mass = mass
        self._cum = np.concatenate([[0.0], np.cumsum(mass)])

    @classmethod
    def constant(cls, c, horizon=math.inf):
        return cls([(0.0, horizon, c, 0.0)])

    @classmethod
    def linear(cls, a, b, horizon=math.inf):
        return cls([(0.0, horizon, a, b)])

    @property
    def horizon(self):
        return float(self.ends[-1])

    @property
    def segments(self):
        return list(zip(self.starts, self.ends, self.a, self.b))

    def _segment(self, u):
        k = np.searchsorted(self.ends, u, side="right")
        return np.minimum(k, len(self.ends) - 1)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        k = self._segment(u)
        return self.a[k] + self.b[k] * (u - self.starts[k])

    def cumulative(self, u):
        """Integrated envelope from 0 to ``u``."""
        u = np.asarray(u, dtype=float)
        k = self._segment(u)
        du = np.clip(u - self.starts[k], 0.0, None)
        a, b = self.a[k], self.b[k]
        # a zero-rate tail contributes nothing, even out to u = inf
        with np.errstate(invalid="ignore"):
            lin = np.where(a == 0, 0.0, a * du)
            quad = np.where(b == 0, 0.0, 0.5 * b * du * du)
        return self._cum[k] + lin + quad

    def total_mass(self, horizon=None):
        if horizon is None or horizon >= self.horizon:
            return float(self._cum[-1])
        return float(self.cumulative(horizon))

    def invert(self, e):
        """Times at which the cumulative envelope reaches ``e`` (array, < total mass)."""
        e = np.asarray(e, dtype=float)
        k = np.searchsorted(self._cum[1:], e, side="right")
        k = np.minimum(k, len(self.a) - 1)
        r = e - self._cum[k]
        a, b = self.a[k], self.b[k]
        # root of a t + b t^2 / 2 = r; hypot avoids underflow of a*a for tiny a
        q = 2.0 * b * r
        inc = np.hypot(a, np.sqrt(np.maximum(q, 0.0)))
        dec = np.sqrt(np.maximum(a * a + np.minimum(q, 0.0), 0.0))
        denom = a + np.where(q >= 0, inc, dec)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            tau = np.where(denom > 0, 2.0 * r / denom, np.inf)
        return self.starts[k] + tau


@dataclass
class ThinningOutcome:
    duration: float
    n_proposals: int
    proposal_times: np.ndarray
    payload: object = None


def thin(bound, rate_fn, rng, horizon=math.inf, block=16, max_block=4096, label=""):
    """Thinning against a piecewise-linear envelope, evaluated in blocks.

    Proposal times are produced in blocks by inverting the cumulative envelope
    at partial sums of unit exponentials. ``rate_fn`` receives an array of
    proposal durations and returns either rates or ``(rates, payload)``; the
    payload row of the accepted proposal is returned with the outcome.
    Proposals that follow the first acceptance are discarded, they are never
    counted and never affect the result.
    """
    gen = as_generator(rng)
    horizon = min(horizon, bound.horizon)
    total = bound.total_mass(horizon)
    consumed_times = []
    e_base = 0.0
    n_total = 0
    while True:
        e = e_base + np.cumsum(gen.standard_exponential(block))
        k_in = int(np.searchsorted(e, total, side="left"))
        if k_in == 0:
            break
        times = bound.invert(e[:k_in])
        out = rate_fn(times)
        if isinstance(out, tuple):
            rates, payload = out
        else:
            rates, payload = out, None
        rates = np.asarray(rates, dtype=float)
        env = bound(times)
        unif = gen.random(k_in)
        accept = unif * env < rates
        first = int(np.argmax(accept)) if accept.any() else -1
        used = first + 1 if first >= 0 else k_in
        bad = rates[:used] > env[:used] * (1.0 + BOUND_RTOL) + BOUND_ATOL
        if bad.any():
            j = int(np.argmax(bad))
            raise InvalidBoundError(times[j], rates[j], env[j], label)
        if np.any(~np.isfinite(rates[:used])):
            j = int(np.argmax(~np.isfinite(rates[:used])))
            raise InvalidBoundError(times[j], rates[j], env[j], label + " non-finite rate")
        n_total += used
        consumed_times.append(times[:used])
        if first >= 0:
            pl = None
            if payload is not None:
                pl = payload[first]
            return ThinningOutcome(float(times[first]), n_total,
                                   np.concatenate(consumed_times), pl)
        if k_in < block:
            break
        e_base = e[-1]
        block = min(2 * block, max_block)
    times = np.concatenate(consumed_times) if consumed_times else np.empty(0)
    return ThinningOutcome(math.inf, n_total, times, None)


def first_event_thinning(bound, true_rate, rng, horizon=None):
    """First event of a Poisson process with rate ``true_rate`` by thinning.

    Returns ``(duration, n_proposals)``; duration is ``math.inf`` when no event
    occurs before the horizon (the bound's own horizon by default).
    """
    def rate_fn(times):
        return np.asarray(true_rate(times), dtype=float) * np.ones_like(times)

    out = thin(bound, rate_fn, rng, math.inf if horizon is None else horizon)
    return out.duration, out.n_proposals


@dataclass(frozen=True)
class SkeletonPoint:
    t: float
    x: np.ndarray
    v: np.ndarray
    kind: str


@dataclass
class Skeleton:
    """Event times and post-event states of a constant-velocity PDP path."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    kinds: list
    horizon: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.asarray(self.x, dtype=float).reshape(len(self.t), -1)
        self.v = np.asarray(self.v, dtype=float).reshape(len(self.t), -1)

    @property
    def d(self):
        return self.x.shape[1]

    def __len__(self):
        return len(self.t)

    @property
    def n_events(self):
        return len(self.t) - 2

    def points(self):
        return [SkeletonPoint(float(t), x.copy(), v.copy(), k)
                for t, x, v, k in zip(self.t, self.x, self.v, self.kinds)]

    def flow_residual(self):
        """Max relative mismatch between recorded points and linear flow."""
        if len(self.t) < 2:
            return 0.0
        pred = self.x[:-1] + np.diff(self.t)[:, None] * self.v[:-1]
        scale = np.maximum(1.0, np.maximum(np.abs(pred), np.abs(self.x[1:])))
        return float(np.max(np.abs(pred - self.x[1:]) / scale))

    def to_jsonl(self, path, seed=None, stream=None):
        header = {"d": self.d, "T": self.horizon, "seed": seed, "stream": stream}
        header.update({k: v for k, v in self.meta.items() if k not in header})
        lines = [json.dumps(header, sort_keys=True)]
        for t, x, v, k in zip(self.t, self.x, self.v, self.kinds):
            lines.append(json.dumps({"t": float(t), "x": [float(a) for a in x],
                                     "v": [float(a) for a in v], "kind": k}))
        from .io import atomic_write_text
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        with open(path) as fh:
            header = json.loads(fh.readline())
            rows = [json.loads(line) for line in fh if line.strip()]
        meta = {k: v for k, v in header.items() if k not in ("d", "T")}
        return cls([r["t"] for r in rows], [r["x"] for r in rows],
                   [r["v"] for r in rows], [r["kind"] for r in rows],
                   float(header["T"]), meta)


def state_at_time(skeleton, t):
    """Position and velocity at time ``t`` (scalar or array of times)."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > skeleton.horizon):
        raise ValueError(f"time outside [0, {skeleton.horizon}]")
    k = np.searchsorted(skeleton.t, t_arr, side="right") - 1
    k = np.clip(k, 0, len(skeleton.t) - 1)
    dt = t_arr - skeleton.t[k]
    x = skeleton.x[k] + dt[..., None] * skeleton.v[k]
    # exact recorded states at event times
    x = np.where((dt == 0)[..., None], skeleton.x[k], x)
    return x, skeleton.v[k]


class EventSource:
    """One stream of events in a superposition.

    Subclasses provide the envelope along the current ray, the (possibly
    random) rates at proposal durations, and the velocity jump applied when a
    proposal is accepted.
    """

    name = "event"
    cost_per_proposal = 0
    max_block = 4096

    def envelope(self, x, v, horizon):
        raise NotImplementedError

    def rates(self, x, v, s):
        raise NotImplementedError

    def jump(self, x, v, payload, rng):
        raise NotImplementedError

    def next_event(self, x, v, horizon, rng):
        bound = self.envelope(x, v, horizon)
        return thin(bound, lambda s: self.rates(x, v, s), rng, horizon,
                    max_block=self.max_block, label=self.name)


@dataclass
class CostCounters:
    proposals: int = 0
    events: int = 0
    refreshes: int = 0
    factor_evals: int = 0

    def as_dict(self):
        return dict(proposals=self.proposals, events=self.events,
                    refreshes=self.refreshes, factor_evals=self.factor_evals)


def simulate_events(x0, v0, sources, T, rng, meta=None, max_events=None):
    """Simulate a constant-velocity PDP driven by superposed event sources.

    Returns ``(skeleton, counters)``. Every source is thinned independently
    along the current ray; the earliest accepted event wins and the remaining
    streams are redrawn from the new state, which is valid because each is a
    Poisson process given the deterministic path. Only proposals up to the
    winning event time are charged to the cost counters.
    """
    if not T > 0:
        raise ValueError("horizon T must be positive")
    gen = as_generator(rng)
    x = np.array(x0, dtype=float).reshape(-1)
    v = np.array(v0, dtype=float).reshape(-1)
    ts, xs, vs, kinds = [0.0], [x.copy()], [v.copy()], ["initial"]
    counters = CostCounters()
    t = 0.0
    while True:
        horizon = T - t
        best, winner, best_payload = math.inf, None, None
        outcomes = []
        for src in sources:
            out = src.next_event(x, v, horizon, gen)
            outcomes.append((src, out))
            if out.duration < best:
                best, winner, best_payload = out.duration, src, out.payload
        for src, out in outcomes:
            n = int(np.count_nonzero(out.proposal_times <= best))
            counters.proposals += n
            counters.factor_evals += n * src.cost_per_proposal
        if winner is None or not best <= horizon:
            break
        x = x + best * v
        t = t + best
        v, kind = winner.jump(x, v, best_payload, gen)
        v = np.asarray(v, dtype=float)
        if kind == "refresh":
            counters.refreshes += 1
        else:
            counters.events += 1
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            partial = Skeleton(ts, xs, vs, kinds, t, dict(meta or {}))
            raise NonFiniteStateError(f"non-finite state at t={t}", partial)
        ts.append(t)
        xs.append(x.copy())
        vs.append(v.copy())
        kinds.append(kind)
        if max_events is not None and len(ts) > max_events:
            raise RuntimeError(f"more than {max_events} events before T={T}")
    x_T = x + (T - t) * v
    if not np.all(np.isfinite(x_T)):
        raise NonFiniteStateError("non-finite terminal state",
                                  Skeleton(ts, xs, vs, kinds, t, dict(meta or {})))
    if T > t:
        ts.append(float(T))
        xs.append(x_T)
        vs.append(v.copy())
        kinds.append("terminal")
    else:
        kinds[-1] = "terminal"
    return Skeleton(ts, xs, vs, kinds, float(T), dict(meta or {})), counters


class _CallableSource(EventSource):
    name = "pdp"

    def __init__(self, rate, bound_factory, transition):
        self._rate = rate
        self._bound_factory = bound_factory
        self._transition = transition

    def envelope(self, x, v, horizon):
        return self._bound_factory((x, v))

    def rates(self, x, v, s):
        s = np.atleast_1d(s)
        return np.array([self._rate((x, v), float(si)) for si in s])

    def jump(self, x, v, payload, rng):
        new_x, new_v = self._transition((x, v))
        return np.asarray(new_v, dtype=float), "event"


def simulate_pdp(initial, rate, bound_factory, transition, T, rng):
    """Generic S1-S3 loop for a single event type.

    ``rate(state, s)`` is the event rate ``s`` time units along the current
    ray, ``bound_factory(state)`` returns a dominating :class:`RateBound` and
    ``transition(state)`` returns the post-event ``(x, v)``; the position part
    must equal the pre-event position for constant-velocity dynamics.
    """
    x0, v0 = initial
    skel, counters = simulate_events(x0, v0, [_CallableSource(rate, bound_factory, transition)], T, rng)
    return skel
