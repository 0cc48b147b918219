"""Events, parameters and the deterministic functionals of a spatio-temporal Hawkes process.

The observation window is ``S = [0, 1] x [0, 1]^d``. A parameter ``f = (mu, g)``
pairs a background rate on ``S`` with a triggering kernel supported on
``[0, a] x [-b, b]^d``; the conditional intensity of a sequence is

    lambda(t, s) = mu(t, s) + sum_{t_j < t} g(t - t_j, s - s_j).
"""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .grid import Grid, box_integrals, interp_weights, trapezoid_weights

DEFAULT_CELLS = {1: 32, 2: 16}


class DomainError(ValueError):
    """Raised when an input lies outside the mathematical domain of an operation."""


class SpatioTemporalPoint(NamedTuple):
    t: float
    s: tuple[float, ...]


class EventSequence:
    """One observed sequence: strictly increasing times with spatial marks in ``[0,1]^d``."""

    __slots__ = ("times", "locations")

    def __init__(self, times, locations, d: int | None = None):
        times = np.asarray(times, dtype=float).reshape(-1)
        locations = np.asarray(locations, dtype=float)
        if locations.size == 0:
            locations = locations.reshape(0, d if d is not None else 1)
        elif locations.ndim == 1:
            locations = locations.reshape(len(times), -1)
        if locations.shape[0] != times.shape[0]:
            raise ValueError("times and locations disagree on the number of events")
        if d is not None and locations.shape[1] != d:
            raise ValueError(f"locations have dimension {locations.shape[1]}, expected {d}")
        if locations.shape[1] < 1:
            raise ValueError("spatial dimension must be at least 1")
        if np.any(times < 0) or np.any(times > 1) or np.any(locations < 0) or np.any(locations > 1):
            raise DomainError("events must lie in [0,1] x [0,1]^d")
        if np.any(np.diff(times) <= 0):
            raise ValueError("event times must be strictly increasing (ties are rejected)")
        times.flags.writeable = False
        locations.flags.writeable = False
        self.times = times
        self.locations = locations

    @classmethod
    def from_points(cls, points: Sequence[SpatioTemporalPoint], d: int | None = None) -> EventSequence:
        if len(points) == 0:
            return cls(np.empty(0), np.empty((0, d or 1)), d=d)
        points = sorted(points, key=lambda p: p.t)
        return cls([p.t for p in points], [list(p.s) for p in points], d=d)

    @property
    def d(self) -> int:
        return self.locations.shape[1]

    @property
    def points(self) -> list[SpatioTemporalPoint]:
        return [SpatioTemporalPoint(float(t), tuple(map(float, s))) for t, s in zip(self.times, self.locations)]

    @property
    def coords(self) -> np.ndarray:
        """Events as rows ``(t, s_1, ..., s_d)``."""
        return np.column_stack([self.times, self.locations])

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[SpatioTemporalPoint]:
        return iter(self.points)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EventSequence)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.locations, other.locations)
        )

    def __repr__(self) -> str:
        return f"EventSequence(m={len(self)}, d={self.d})"


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[EventSequence, ...]
    d: int

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        if any(seq.d != self.d for seq in self.sequences):
            raise ValueError("all sequences must share the spatial dimension d")

    @property
    def n(self) -> int:
        return len(self.sequences)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(s) for s in self.sequences], dtype=np.int64)

    def __len__(self) -> int:
        return self.n

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]


@dataclass(frozen=True)
class TriggeringSupport:
    a: float
    b: float

    def __post_init__(self):
        if not 0.0 < self.a < 0.5:
            raise DomainError(f"temporal range a={self.a} must lie in (0, 1/2) (finite-range constraint)")
        if not 0.0 < self.b < 0.5:
            raise DomainError(f"spatial range b={self.b} must lie in (0, 1/2) (finite-range constraint)")


class Domain(enum.Enum):
    BACKGROUND = "background"
    TRIGGER = "trigger"


def background_grid(d: int, cells: int) -> Grid:
    return Grid((0.0,) * (d + 1), (1.0,) * (d + 1), cells)


def trigger_grid(support: TriggeringSupport, d: int, cells: int) -> Grid:
    return Grid((0.0,) + (-support.b,) * d, (support.a,) + (support.b,) * d, cells)


@dataclass(frozen=True, eq=False)
class GridField:
    """Nonnegative field given by node values on a uniform grid, multilinear in between."""

    grid: Grid
    values: np.ndarray
    domain: Domain

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        if np.any(values < 0):
            raise ValueError("field values must be nonnegative")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def background(cls, values, d: int, cells: int | None = None) -> GridField:
        values = np.asarray(values, dtype=float)
        if cells is None:
            cells = round(values.size ** (1.0 / (d + 1))) - 1
        return cls(background_grid(d, cells), values, Domain.BACKGROUND)

    @classmethod
    def trigger(cls, values, support: TriggeringSupport, d: int, cells: int | None = None) -> GridField:
        values = np.asarray(values, dtype=float)
        if cells is None:
            cells = round(values.size ** (1.0 / (d + 1))) - 1
        return cls(trigger_grid(support, d, cells), values, Domain.TRIGGER)

    @classmethod
    def constant_background(cls, value: float, d: int, cells: int | None = None) -> GridField:
        cells = cells or DEFAULT_CELLS.get(d, 8)
        grid = background_grid(d, cells)
        return cls(grid, np.full(grid.shape, float(value)), Domain.BACKGROUND)

    @classmethod
    def constant_trigger(cls, value: float, support: TriggeringSupport, d: int, cells: int | None = None) -> GridField:
        cells = cells or DEFAULT_CELLS.get(d, 8)
        grid = trigger_grid(support, d, cells)
        return cls(grid, np.full(grid.shape, float(value)), Domain.TRIGGER)

    @property
    def d(self) -> int:
        return self.grid.ndim - 1

    @property
    def max_value(self) -> float:
        return float(self.values.max())

    def __call__(self, points) -> np.ndarray:
        idx, w = interp_weights(self.grid, points)
        return np.sum(self.values.ravel()[idx] * w, axis=-1)

    def integral(self) -> float:
        return float(trapezoid_weights(self.grid) @ self.values.ravel())

    def box_integral(self, lo, hi) -> np.ndarray:
        return box_integrals(self.grid, self.values, lo, hi)


@dataclass(frozen=True, eq=False)
class ParameterF:
    """Hawkes parameter: background rate ``mu`` on S and triggering kernel ``g``."""

    mu: GridField
    g: GridField
    support: TriggeringSupport
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.mu.domain is not Domain.BACKGROUND or self.g.domain is not Domain.TRIGGER:
            raise ValueError("mu must be a BACKGROUND field and g a TRIGGER field")
        if self.mu.d != self.g.d:
            raise ValueError("mu and g must share the spatial dimension")
        expected = trigger_grid(self.support, self.g.d, self.g.grid.cells)
        if not np.allclose(expected.lo, self.g.grid.lo) or not np.allclose(expected.hi, self.g.grid.hi):
            raise ValueError("g grid does not match the triggering support")
        if self.check:
            if np.any(self.mu.values <= 0):
                raise DomainError("background rate must be strictly positive at every node")
            br = branching_ratio(self.g)
            if br >= 1.0:
                raise DomainError(f"branching ratio {br:.6g} must be < 1")

    @property
    def d(self) -> int:
        return self.mu.d

    @classmethod
    def constant(cls, mu: float, g: float, support: TriggeringSupport, d: int, cells: int | None = None) -> ParameterF:
        return cls(
            GridField.constant_background(mu, d, cells),
            GridField.constant_trigger(g, support, d, cells),
            support,
        )

    def to_dict(self) -> dict:
        out = {
            "d": self.d,
            "a": self.support.a,
            "b": self.support.b,
            "resolution": self.mu.grid.cells,
            "mu_values": self.mu.values.ravel().tolist(),
            "g_values": self.g.values.ravel().tolist(),
        }
        if self.g.grid.cells != self.mu.grid.cells:
            out["g_resolution"] = self.g.grid.cells
        return out

    @classmethod
    def from_dict(cls, data: dict) -> ParameterF:
        d = int(data["d"])
        support = TriggeringSupport(float(data["a"]), float(data["b"]))
        cells = int(data["resolution"])
        g_cells = int(data.get("g_resolution", cells))
        mu = GridField.background(np.asarray(data["mu_values"], dtype=float), d, cells)
        g = GridField.trigger(np.asarray(data["g_values"], dtype=float), support, d, g_cells)
        return cls(mu, g, support)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> ParameterF:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_in_S(points: np.ndarray) -> None:
    if np.any(points < 0) or np.any(points > 1):
        raise DomainError("query point lies outside S = [0,1]^(d+1)")


def intensity(f: ParameterF, history: EventSequence, points) -> np.ndarray:
    """Conditional intensity at each row ``(t, s)`` of ``points``.

    Only history events strictly before each query time contribute.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != f.d + 1:
        raise ValueError(f"query points must have {f.d + 1} coordinates")
    _check_in_S(points)
    out = f.mu(points)
    if len(history) == 0:
        return out
    ev = history.coords
    # chunk over query points to bound the (Q, m, D) lag array
    chunk = max(1, 2_000_000 // max(1, len(ev)))
    for start in range(0, len(points), chunk):
        q = points[start:start + chunk]
        lag = q[:, None, :] - ev[None, :, :]
        before = lag[..., 0] > 0
        vals = f.g(lag.reshape(-1, f.d + 1)).reshape(lag.shape[:2])
        out[start:start + chunk] += np.sum(np.where(before, vals, 0.0), axis=1)
    return out


def intensity_at(f: ParameterF, history: EventSequence, t: float, s) -> float:
    s = np.atleast_1d(np.asarray(s, dtype=float))
    return float(intensity(f, history, np.concatenate([[t], s])[None, :])[0])


def branching_ratio(g: GridField) -> float:
    """``||g||_1`` by the trapezoidal rule on the trigger grid."""
    return g.integral()


def trigger_masses(f: ParameterF, seq: EventSequence, box_lo=None, box_hi=None) -> np.ndarray:
    """Per-event triggered mass ``G(t_j, s_j)``: integral of ``g(. - e_j)`` over a box (default S)."""
    D = f.d + 1
    box_lo = np.zeros(D) if box_lo is None else np.asarray(box_lo, dtype=float)
    box_hi = np.ones(D) if box_hi is None else np.asarray(box_hi, dtype=float)
    if len(seq) == 0:
        return np.zeros(0)
    ev = seq.coords
    return f.g.box_integral(box_lo[None, :] - ev, box_hi[None, :] - ev)


def compensator(f: ParameterF, sequence: EventSequence, box_lo=None, box_hi=None) -> float:
    """Integral of the conditional intensity over S, or over an axis-aligned sub-box."""
    if box_lo is None and box_hi is None:
        mu_part = f.mu.integral()
    else:
        D = f.d + 1
        lo = np.zeros(D) if box_lo is None else np.asarray(box_lo, dtype=float)
        hi = np.ones(D) if box_hi is None else np.asarray(box_hi, dtype=float)
        mu_part = float(f.mu.box_integral(lo[None], hi[None])[0])
    return mu_part + float(np.sum(trigger_masses(f, sequence, box_lo, box_hi)))


def midpoint_nodes(d: int, cells: int) -> tuple[np.ndarray, float]:
    """Cell midpoints of a uniform partition of S, with the common cell volume."""
    centers = (np.arange(cells) + 0.5) / cells
    mesh = np.meshgrid(*([centers] * (d + 1)), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1), cells ** -(d + 1)


def stochastic_distance(f: ParameterF, f2: ParameterF, data: Dataset, cells: int | None = None) -> float:
    """Average over sequences of the L1 distance between the two intensity paths.

    Uses the midpoint rule on ``cells`` cells per axis (default 128 for d=1, 32 for d=2).
    """
    if data.n == 0:
        raise DomainError("stochastic distance needs at least one sequence")
    if f.d != f2.d or f.d != data.d:
        raise ValueError("parameters and data must share d")
    if cells is None:
        cells = {1: 128, 2: 32}.get(f.d, 12)
    pts, vol = midpoint_nodes(f.d, cells)
    total = 0.0
    for seq in data.sequences:
        total += float(np.sum(np.abs(intensity(f, seq, pts) - intensity(f2, seq, pts)))) * vol
    return total / data.n


def _field_l1(a: GridField, b: GridField) -> float:
    if a.grid == b.grid:
        return float(trapezoid_weights(a.grid) @ np.abs(a.values - b.values).ravel())
    if not (np.allclose(a.grid.lo, b.grid.lo) and np.allclose(a.grid.hi, b.grid.hi)):
        raise ValueError("fields live on different domains")
    fine = Grid(a.grid.lo, a.grid.hi, 4 * max(a.grid.cells, b.grid.cells))
    diff = np.abs(a(fine.nodes) - b(fine.nodes))
    return float(trapezoid_weights(fine) @ diff)


def l1_distance(f: ParameterF, f2: ParameterF) -> float:
    """``||mu - mu'||_1 + ||g - g'||_1``, each by trapezoidal quadrature on its own domain."""
    if f.d != f2.d or f.support != f2.support:
        raise ValueError("parameters must share d and triggering support")
    return _field_l1(f.mu, f2.mu) + _field_l1(f.g, f2.g)


# ---------------------------------------------------------------- I/O

def write_events_csv(data: Dataset, path) -> None:
    header = ["seq_id", "t"] + [f"s{k + 1}" for k in range(data.d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, seq in enumerate(data.sequences):
            for t, s in zip(seq.times, seq.locations):
                w.writerow([i, repr(float(t))] + [repr(float(x)) for x in s])


class EventFileError(ValueError):
    pass


def read_events_csv(path, n_sequences: int | None = None) -> Dataset:
    """Read the ``seq_id,t,s1,...,sd`` event table.

    Rows need not be grouped; within each ``seq_id`` they are sorted by time
    and ties are rejected. Sequence ids are nonnegative integers; ids missing
    from the file (and ids up to ``n_sequences - 1``) become empty sequences.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EventFileError(f"{path}: empty file, expected a header row") from None
        header = [h.strip() for h in header]
        d = len(header) - 2
        expected = ["seq_id", "t"] + [f"s{k + 1}" for k in range(d)]
        if d < 1 or header != expected:
            raise EventFileError(f"{path}: line 1: header must be seq_id,t,s1,...,sd; got {','.join(header)}")
        rows: dict[int, list[tuple[float, list[float], int]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise EventFileError(f"{path}: line {lineno}: expected {d + 2} fields, got {len(row)}")
            try:
                sid = int(row[0])
                t = float(row[1])
                s = [float(x) for x in row[2:]]
            except ValueError:
                raise EventFileError(f"{path}: line {lineno}: malformed value in {row!r}") from None
            if sid < 0:
                raise EventFileError(f"{path}: line {lineno}: seq_id must be nonnegative")
            if not (0 <= t <= 1 and all(0 <= x <= 1 for x in s)):
                raise EventFileError(f"{path}: line {lineno}: event outside [0,1]^(d+1)")
            rows.setdefault(sid, []).append((t, s, lineno))
    n = max(rows, default=-1) + 1
    if n_sequences is not None:
        if n_sequences < n:
            raise EventFileError(f"{path}: seq_id {n - 1} exceeds n_sequences={n_sequences}")
        n = n_sequences
    seqs = []
    for i in range(n):
        evs = sorted(rows.get(i, []), key=lambda r: r[0])
        for prev, cur in zip(evs, evs[1:]):
            if prev[0] == cur[0]:
                raise EventFileError(f"{path}: line {cur[2]}: tied time {cur[0]} in sequence {i}")
        seqs.append(EventSequence([r[0] for r in evs], np.array([r[1] for r in evs]).reshape(-1, d), d=d))
    return Dataset(tuple(seqs), d)
