"""Uniform tensor grids, multilinear interpolation and exact box integrals.

Every field in the package (background rate, triggering kernel, latent GP
values) lives on a :class:`Grid`. A field is the multilinear interpolant of
its node values, so integrals over axis-aligned boxes are computed exactly
as contractions of the node values with per-axis "hat" integral weights.
On the full grid domain this is the trapezoidal rule.
"""
from __future__ import annotations

import string
from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on the box ``[lo, hi]`` with ``cells`` cells per axis."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    cells: int

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or len(self.lo) == 0:
            raise ValueError("lo and hi must be non-empty and of equal length")
        if self.cells < 1:
            raise ValueError("a grid needs at least one cell per axis")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("grid box must have positive extent on every axis")

    @property
    def ndim(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.cells + 1,) * self.ndim

    @property
    def size(self) -> int:
        return (self.cells + 1) ** self.ndim

    @cached_property
    def spacing(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / self.cells

    @cached_property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, h, self.cells + 1) for l, h in zip(self.lo, self.hi)]

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(size, ndim)``, row-major (last axis fastest)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def volume(self) -> float:
        return float(np.prod(np.asarray(self.hi) - np.asarray(self.lo)))

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(points)
        lo = np.asarray(self.lo) - tol
        hi = np.asarray(self.hi) + tol
        return np.all((points >= lo) & (points <= hi), axis=-1)


def interp_weights(grid: Grid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Multilinear interpolation stencil for each point.

    Returns flat node indices and weights, both of shape ``(P, 2**ndim)``.
    Points outside the grid box get all-zero weights, so the interpolant is
    exactly 0 there.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    P, D = points.shape
    if D != grid.ndim:
        raise ValueError(f"points have dimension {D}, grid has {grid.ndim}")
    inside = grid.contains(points)
    u = (points - np.asarray(grid.lo)) / grid.spacing
    cell = np.clip(np.floor(u).astype(np.int64), 0, grid.cells - 1)
    frac = np.clip(u - cell, 0.0, 1.0)

    n1 = grid.cells + 1
    strides = n1 ** np.arange(D - 1, -1, -1)
    corners = np.array(np.meshgrid(*([[0, 1]] * D), indexing="ij")).reshape(D, -1).T
    idx = np.zeros((P, 2**D), dtype=np.int64)
    w = np.ones((P, 2**D))
    for k in range(D):
        off = corners[:, k]
        idx += (cell[:, k, None] + off[None, :]) * strides[k]
        w *= np.where(off[None, :] == 1, frac[:, k, None], 1.0 - frac[:, k, None])
    w[~inside] = 0.0
    return idx, w


def interpolate(grid: Grid, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    idx, w = interp_weights(grid, points)
    return np.sum(np.ravel(values)[idx] * w, axis=-1)


def _hat_antiderivative(u: np.ndarray) -> np.ndarray:
    # integral of max(0, 1 - |x|) from -inf to u
    u = np.clip(u, -1.0, 1.0)
    return np.where(u <= 0.0, 0.5 * (u + 1.0) ** 2, 1.0 - 0.5 * (1.0 - u) ** 2)


def hat_box_weights(axis: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Integrals of each node's hat function over ``[lo_p, hi_p]``.

    ``axis`` is a uniform node vector; bounds are clipped to the axis range,
    empty intervals give zero rows. Shape ``(P, len(axis))``.
    """
    lo = np.clip(np.atleast_1d(np.asarray(lo, dtype=float)), axis[0], axis[-1])
    hi = np.clip(np.atleast_1d(np.asarray(hi, dtype=float)), axis[0], axis[-1])
    hi = np.maximum(hi, lo)
    h = axis[1] - axis[0]
    a = _hat_antiderivative((hi[:, None] - axis[None, :]) / h)
    b = _hat_antiderivative((lo[:, None] - axis[None, :]) / h)
    return h * (a - b)


def _box_factors(grid: Grid, lo: np.ndarray, hi: np.ndarray) -> list[np.ndarray]:
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    return [hat_box_weights(grid.axes[k], lo[:, k], hi[:, k]) for k in range(grid.ndim)]


def box_integrals(grid: Grid, values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Exact integral of the interpolant over each box ``[lo_p, hi_p]`` (clipped to the grid)."""
    factors = _box_factors(grid, lo, hi)
    letters = string.ascii_lowercase[: grid.ndim]
    spec = ",".join(f"p{c}" for c in letters) + f",{letters}->p"
    return np.einsum(spec, *factors, np.reshape(values, grid.shape), optimize=True)


def summed_box_weights(grid: Grid, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Flat weight vector ``w`` with ``w @ values == box_integrals(...).sum()``."""
    factors = _box_factors(grid, lo, hi)
    letters = string.ascii_lowercase[: grid.ndim]
    spec = ",".join(f"p{c}" for c in letters) + f"->{letters}"
    return np.einsum(spec, *factors, optimize=True).ravel()


def trapezoid_weights(grid: Grid) -> np.ndarray:
    return summed_box_weights(grid, np.asarray(grid.lo)[None], np.asarray(grid.hi)[None])
