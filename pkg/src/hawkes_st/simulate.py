"""Simulation of i.i.d. Hawkes sequences on S.

Two independent mechanisms are provided so that each can validate the other:

* ``simulate_branching`` uses the cluster (immigrant/offspring) representation;
* ``simulate_thinning`` thins the temporal ground process and then draws the
  spatial mark from the spatial section of the intensity.

Every sequence draws from its own counter-based Philox stream keyed by
``(seed, sequence index)``, so output does not depend on how sequences are
scheduled across workers.
"""
from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .grid import hat_box_weights, interp_weights
from .model import Dataset, EventSequence, ParameterF, branching_ratio

_MASK64 = (1 << 64) - 1


class Method(enum.Enum):
    BRANCHING = "branching"
    THINNING = "thinning"


class EventCapExceeded(RuntimeError):
    def __init__(self, index: int, cap: int):
        super().__init__(f"sequence {index} exceeded the event cap of {cap}")
        self.index = index
        self.cap = cap


@dataclass(frozen=True)
class SimConfig:
    f: ParameterF
    n: int
    seed: int = 0
    method: Method = Method.BRANCHING
    max_events_per_seq: int = 100_000
    workers: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if isinstance(self.method, str):
            object.__setattr__(self, "method", Method(self.method.lower()))
        if branching_ratio(self.f.g) >= 1:
            raise ValueError("branching ratio must be < 1")


def sequence_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one sequence (or one replicate)."""
    key = np.array([seed & _MASK64, index & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class _Fields:
    """Cached views of ``f`` used by both simulators and the time-rescaling map."""

    def __init__(self, f: ParameterF):
        self.f = f
        self.d = f.d
        self.a = f.support.a
        self.b = f.support.b
        self.mu_max = f.mu.max_value
        self.g_max = f.g.max_value
        self.mu_flat = f.mu.values.ravel()
        self.g_flat = f.g.values.ravel()
        # spatial marginal of mu on its time axis (exact for the multilinear interpolant)
        mu_grid = f.mu.grid
        self.mu_t_axis = mu_grid.axes[0]
        vals = f.mu.values
        for k in range(1, mu_grid.ndim):
            w = hat_box_weights(mu_grid.axes[k], np.array([0.0]), np.array([1.0]))[0]
            vals = np.tensordot(vals, w, axes=([1], [0]))
        self.mu_marginal = vals
        self.g_t_axis = f.g.grid.axes[0]

    def mu_at(self, pts: np.ndarray) -> np.ndarray:
        idx, w = interp_weights(self.f.mu.grid, pts)
        return np.sum(self.mu_flat[idx] * w, axis=-1)

    def g_at(self, lags: np.ndarray) -> np.ndarray:
        idx, w = interp_weights(self.f.g.grid, lags)
        return np.sum(self.g_flat[idx] * w, axis=-1)

    def spatial_box(self, locs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Lag box ``[-b, b]^d`` clipped so that ``s_j + lag`` stays in ``[0,1]^d``."""
        lo = np.maximum(-self.b, -locs)
        hi = np.minimum(self.b, 1.0 - locs)
        return lo, hi

    def time_profiles(self, locs: np.ndarray) -> np.ndarray:
        """For each event, the clipped spatial integral of ``g(u, .)`` at every node ``u`` of the time axis."""
        lo, hi = self.spatial_box(locs)
        vals = np.broadcast_to(self.f.g.values, (len(locs),) + self.f.g.values.shape)
        for k in range(self.d):
            w = hat_box_weights(self.f.g.grid.axes[k + 1], lo[:, k], hi[:, k])
            vals = np.einsum("pts...,ps->pt...", vals, w)
        return vals


def _check_cap(total: int, cap: int, index: int) -> None:
    if total > cap:
        raise EventCapExceeded(index, cap)


def _branching_one(fields: _Fields, rng: np.random.Generator, cap: int, index: int) -> EventSequence:
    d = fields.d
    D = d + 1
    n0 = rng.poisson(fields.mu_max)
    _check_cap(n0, cap, index)
    cand = rng.random((n0, D))
    keep = rng.random(n0) * fields.mu_max < fields.mu_at(cand) if n0 else np.zeros(0, bool)
    gen = cand[keep]
    events = [gen]
    total = len(gen)
    g_max = fields.g_max
    while len(gen) and g_max > 0:
        t_hi = np.minimum(fields.a, 1.0 - gen[:, 0])
        s_lo, s_hi = fields.spatial_box(gen[:, 1:])
        vol = np.clip(t_hi, 0, None) * np.prod(np.clip(s_hi - s_lo, 0, None), axis=1)
        counts = rng.poisson(g_max * vol)
        m = int(counts.sum())
        _check_cap(total + m, cap, index)
        if m == 0:
            break
        parent = np.repeat(np.arange(len(gen)), counts)
        lo = np.column_stack([np.zeros(len(gen)), s_lo])[parent]
        hi = np.column_stack([t_hi, s_hi])[parent]
        lags = lo + rng.random((m, D)) * (hi - lo)
        keep = rng.random(m) * g_max < fields.g_at(lags)
        child = gen[parent[keep]] + lags[keep]
        child = np.clip(child, 0.0, 1.0)
        child = child[child[:, 0] > gen[parent[keep], 0]]
        gen = child
        total += len(gen)
        _check_cap(total, cap, index)
        events.append(gen)
    allev = np.concatenate(events, axis=0) if events else np.zeros((0, D))
    allev = allev[np.argsort(allev[:, 0], kind="stable")]
    return EventSequence(allev[:, 0], allev[:, 1:], d=d)


def _thinning_one(fields: _Fields, rng: np.random.Generator, cap: int, index: int) -> EventSequence:
    d = fields.d
    a = fields.a
    mu_max = fields.mu_max
    g_max = fields.g_max
    g_mass_max = g_max * (2.0 * fields.b) ** d
    mu_t, mu_m = fields.mu_t_axis, fields.mu_marginal
    g_t = fields.g_t_axis

    times: list[float] = []
    locs: list[np.ndarray] = []
    profiles: list[np.ndarray] = []
    t = 0.0
    first_active = 0
    while True:
        while first_active < len(times) and times[first_active] < t - a:
            first_active += 1
        k = len(times) - first_active
        bound = mu_max + k * g_mass_max
        t += rng.exponential(1.0 / bound)
        if t > 1.0:
            break
        while first_active < len(times) and times[first_active] < t - a:
            first_active += 1
        active = range(first_active, len(times))
        masses = [float(np.interp(t, mu_t, mu_m))]
        for j in active:
            masses.append(float(np.interp(t - times[j], g_t, profiles[j])))
        lam = sum(masses)
        if rng.random() * bound >= lam:
            continue
        # spatial mark: choose the mixture component, then exact rejection inside it
        comp = int(np.searchsorted(np.cumsum(masses), rng.random() * lam, side="right"))
        comp = min(comp, len(masses) - 1)
        while True:
            if comp == 0:
                s = rng.random(d)
                if rng.random() * mu_max < fields.mu_at(np.concatenate([[t], s])[None])[0]:
                    break
            else:
                j = first_active + comp - 1
                lo, hi = fields.spatial_box(locs[j][None])
                v = lo[0] + rng.random(d) * (hi[0] - lo[0])
                if rng.random() * g_max < fields.g_at(np.concatenate([[t - times[j]], v])[None])[0]:
                    s = np.clip(locs[j] + v, 0.0, 1.0)
                    break
        times.append(t)
        locs.append(s)
        profiles.append(fields.time_profiles(s[None])[0])
        _check_cap(len(times), cap, index)
    if not times:
        return EventSequence(np.empty(0), np.empty((0, d)), d=d)
    return EventSequence(np.array(times), np.array(locs), d=d)


def _run(cfg: SimConfig, one) -> Dataset:
    fields = _Fields(cfg.f)

    def work(i: int) -> EventSequence:
        return one(fields, sequence_rng(cfg.seed, i), cfg.max_events_per_seq, i)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            seqs = list(pool.map(work, range(cfg.n)))
    else:
        seqs = [work(i) for i in range(cfg.n)]
    return Dataset(tuple(seqs), cfg.f.d)


def simulate_branching(cfg: SimConfig) -> Dataset:
    return _run(cfg, _branching_one)


def simulate_thinning(cfg: SimConfig) -> Dataset:
    return _run(cfg, _thinning_one)


def simulate(cfg: SimConfig) -> Dataset:
    if cfg.method is Method.BRANCHING:
        return simulate_branching(cfg)
    return simulate_thinning(cfg)


def ground_compensator(f: ParameterF, seq: EventSequence, times) -> np.ndarray:
    """``Lambda_g(t) = int_0^t int_{[0,1]^d} lambda(u, s) ds du`` at each requested time."""
    fields = _Fields(f)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    out = hat_box_weights(fields.mu_t_axis, np.zeros_like(times), times) @ fields.mu_marginal
    if len(seq) == 0:
        return out
    prof = fields.time_profiles(seq.locations)
    for k, tk in enumerate(seq.times):
        later = times > tk
        if not np.any(later):
            continue
        span = np.minimum(times[later] - tk, fields.a)
        w = hat_box_weights(fields.g_t_axis, np.zeros_like(span), span)
        out[later] += w @ prof[k]
    return out


def time_rescale(f: ParameterF, seq: EventSequence) -> np.ndarray:
    """Increments of the ground compensator between consecutive events (starting from 0)."""
    if len(seq) == 0:
        return np.zeros(0)
    lam = ground_compensator(f, seq, seq.times)
    return np.diff(np.concatenate([[0.0], lam]))


def pooled_rescaled_gaps(f: ParameterF, data: Dataset) -> np.ndarray:
    """Rescaled gaps of all sequences laid end to end on one time axis.

    Each sequence occupies an interval of length ``Lambda_g(1)``; under the
    true parameter the concatenation is a unit-rate Poisson process, so gaps
    that straddle sequence boundaries are kept and the final censored gap is
    dropped.
    """
    pts = []
    offset = 0.0
    for seq in data.sequences:
        grid = np.concatenate([seq.times, [1.0]])
        lam = ground_compensator(f, seq, grid)
        pts.append(offset + lam[:-1])
        offset += lam[-1]
    allpts = np.concatenate(pts) if pts else np.zeros(0)
    return np.diff(np.concatenate([[0.0], allpts]))


def expected_count_bounds(f: ParameterF) -> tuple[float, float]:
    """Poisson-domination bounds ``(min mu, max mu) / (1 - ||g||_1)`` on the mean count."""
    br = branching_ratio(f.g)
    return float(f.mu.values.min()) / (1 - br), float(f.mu.values.max()) / (1 - br)


__all__ = [
    "EventCapExceeded",
    "Method",
    "SimConfig",
    "expected_count_bounds",
    "ground_compensator",
    "pooled_rescaled_gaps",
    "sequence_rng",
    "simulate",
    "simulate_branching",
    "simulate_thinning",
    "time_rescale",
]

