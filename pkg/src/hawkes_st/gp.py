"""Gaussian-process priors on grid fields.

Kernels
-------
``rbf``       ``amplitude * exp(-r**2 / lengthscale**2)``
``matern``    ``amplitude * 2**(1-tau) / Gamma(tau) * x**tau * K_tau(x)`` with
              ``x = sqrt(2 tau) r / lengthscale``; ``tau = 1/2`` is the exponential
              kernel and ``tau -> inf`` tends to ``amplitude * exp(-r**2 / (2 lengthscale**2))``
``separable`` product of a kernel on ``|t - t'|`` and one on ``||s - s'||_2``

A latent field is whitened as ``latent = L @ z`` with ``L`` the Cholesky
factor of the (jittered) Gram matrix on the grid nodes and ``z ~ N(0, I)``;
the positive field is the link applied node-wise.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import linalg, special

from .grid import Grid
from .model import (
    DomainError,
    GridField,
    ParameterF,
    TriggeringSupport,
    background_grid,
    branching_ratio,
    trigger_grid,
)


class KernelFamily(enum.Enum):
    RBF = "rbf"
    MATERN = "matern"
    SEPARABLE = "separable"


@dataclass(frozen=True)
class KernelSpec:
    family: KernelFamily = KernelFamily.MATERN
    amplitude: float = 1.0
    lengthscale: float = 0.3
    smoothness: float = 1.5
    time: KernelSpec | None = None
    space: KernelSpec | None = None

    def __post_init__(self):
        if isinstance(self.family, str):
            object.__setattr__(self, "family", KernelFamily(self.family.lower()))
        if self.amplitude <= 0 or self.lengthscale <= 0 or self.smoothness <= 0:
            raise ValueError("kernel hyperparameters must be strictly positive")
        if self.family is KernelFamily.SEPARABLE:
            if self.time is None or self.space is None:
                raise ValueError("a separable kernel needs time and space factors")
            if KernelFamily.SEPARABLE in (self.time.family, self.space.family):
                raise ValueError("separable kernels nest only one level deep")

    @classmethod
    def rbf(cls, amplitude=1.0, lengthscale=0.3) -> KernelSpec:
        return cls(KernelFamily.RBF, amplitude, lengthscale)

    @classmethod
    def matern(cls, amplitude=1.0, lengthscale=0.3, smoothness=1.5) -> KernelSpec:
        return cls(KernelFamily.MATERN, amplitude, lengthscale, smoothness)

    @classmethod
    def separable(cls, time: KernelSpec, space: KernelSpec, amplitude=1.0) -> KernelSpec:
        return cls(KernelFamily.SEPARABLE, amplitude, 1.0, 1.0, time, space)

    @property
    def variance(self) -> float:
        if self.family is KernelFamily.SEPARABLE:
            return self.amplitude * self.time.variance * self.space.variance
        return self.amplitude

    def to_dict(self) -> dict:
        out = {"family": self.family.value, "amplitude": self.amplitude}
        if self.family is KernelFamily.SEPARABLE:
            out["time"] = self.time.to_dict()
            out["space"] = self.space.to_dict()
        else:
            out["lengthscale"] = self.lengthscale
            if self.family is KernelFamily.MATERN:
                out["smoothness"] = self.smoothness
        return out

    @classmethod
    def from_dict(cls, data: dict) -> KernelSpec:
        data = dict(data)
        fam = KernelFamily(data.pop("family"))
        if fam is KernelFamily.SEPARABLE:
            return cls.separable(cls.from_dict(data["time"]), cls.from_dict(data["space"]), data.get("amplitude", 1.0))
        return cls(fam, **data)


def matern_correlation(r, lengthscale: float, smoothness: float) -> np.ndarray:
    """Matérn correlation (value 1 at r=0) for distances ``r``."""
    r = np.asarray(r, dtype=float)
    tau = smoothness
    x = np.sqrt(2.0 * tau) * r / lengthscale
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    # log form avoids overflow of K_tau at small x / large tau
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        logk = (1.0 - tau) * np.log(2.0) - special.gammaln(tau) + tau * np.log(xp) + np.log(special.kve(tau, xp)) - xp
        vals = np.exp(logk)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        # leading terms of the small-argument expansion
        vals[bad] = 1.0 - xp[bad] ** 2 / (4.0 * (tau - 1.0)) if tau > 1 else 1.0
    out[pos] = np.minimum(vals, 1.0)
    return out


def _stationary(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    if spec.family is KernelFamily.RBF:
        return spec.amplitude * np.exp(-(r**2) / spec.lengthscale**2)
    if spec.family is KernelFamily.MATERN:
        return spec.amplitude * matern_correlation(r, spec.lengthscale, spec.smoothness)
    raise ValueError("separable kernels are not functions of a single distance")


def kernel_matrix(spec: KernelSpec, X: np.ndarray, Y: np.ndarray | None = None) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = X if Y is None else np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.family is KernelFamily.SEPARABLE:
        rt = np.abs(X[:, None, 0] - Y[None, :, 0])
        rs = np.sqrt(np.sum((X[:, None, 1:] - Y[None, :, 1:]) ** 2, axis=-1))
        return spec.amplitude * _stationary(spec.time, rt) * _stationary(spec.space, rs)
    r = np.sqrt(np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=-1))
    return _stationary(spec, r)


def kernel_eval(spec: KernelSpec, u, u2) -> float:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    u2 = np.atleast_1d(np.asarray(u2, dtype=float))
    if u.shape != u2.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {u2.shape}")
    return float(kernel_matrix(spec, u[None], u2[None])[0, 0])


class CholeskyError(np.linalg.LinAlgError):
    pass


def gram_cholesky(spec: KernelSpec, nodes: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``K + jitter I``.

    Jitter starts at ``1e-10 * var`` and grows tenfold up to ``1e-4 * var``.
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    if len(nodes) == 0:
        raise ValueError("grid must be non-empty")
    K = kernel_matrix(spec, nodes)
    var = spec.variance
    for exponent in range(-10, -3):
        jitter = var * 10.0**exponent
        try:
            return np.linalg.cholesky(K + jitter * np.eye(len(K)))
        except np.linalg.LinAlgError:
            continue
    eig = np.linalg.eigvalsh(K)
    raise CholeskyError(
        f"Gram matrix not factorizable at jitter {var * 1e-4:.3g}; "
        f"eigenvalue range [{eig[0]:.3g}, {eig[-1]:.3g}], size {len(K)}"
    )


@lru_cache(maxsize=32)
def grid_cholesky(spec: KernelSpec, grid: Grid) -> np.ndarray:
    L = gram_cholesky(spec, grid.nodes)
    L.flags.writeable = False
    return L


# ---------------------------------------------------------------- links

class LinkKind(enum.Enum):
    SOFTPLUS = "softplus"
    SCALED_SIGMOID = "scaled_sigmoid"


@dataclass(frozen=True)
class LinkSpec:
    kind: LinkKind = LinkKind.SOFTPLUS
    ceiling: float = 1.0
    slope: float = 1.0

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", LinkKind(self.kind.lower()))
        if self.ceiling <= 0 or self.slope <= 0:
            raise ValueError("link ceiling and slope must be positive")

    @classmethod
    def softplus(cls) -> LinkSpec:
        return cls(LinkKind.SOFTPLUS)

    @classmethod
    def scaled_sigmoid(cls, ceiling: float, slope: float = 1.0) -> LinkSpec:
        return cls(LinkKind.SCALED_SIGMOID, ceiling, slope)

    def to_dict(self) -> dict:
        if self.kind is LinkKind.SOFTPLUS:
            return {"kind": self.kind.value}
        return {"kind": self.kind.value, "ceiling": self.ceiling, "slope": self.slope}

    @classmethod
    def from_dict(cls, data: dict) -> LinkSpec:
        return cls(**data)


def link_apply(link: LinkSpec, x):
    x = np.asarray(x, dtype=float)
    if link.kind is LinkKind.SOFTPLUS:
        return np.logaddexp(0.0, x)
    return link.ceiling * special.expit(link.slope * x)


def link_derivative(link: LinkSpec, x):
    x = np.asarray(x, dtype=float)
    if link.kind is LinkKind.SOFTPLUS:
        return special.expit(x)
    p = special.expit(link.slope * x)
    return link.ceiling * link.slope * p * (1.0 - p)


def link_invert(link: LinkSpec, y):
    y = np.asarray(y, dtype=float)
    if link.kind is LinkKind.SOFTPLUS:
        if np.any(y <= 0):
            raise DomainError("softplus inverse needs values in (0, inf)")
        # log(expm1(y)) without overflow for large y
        return y + np.log(-np.expm1(-y))
    if np.any((y <= 0) | (y >= link.ceiling)):
        raise DomainError(f"scaled sigmoid inverse needs values in (0, {link.ceiling})")
    return special.logit(y / link.ceiling) / link.slope


# ---------------------------------------------------------------- latent fields

@dataclass(frozen=True, eq=False)
class LatentField:
    """Whitened GP coefficients on a grid: ``field = link(chol @ z)`` node-wise."""

    z: np.ndarray
    grid: Grid
    chol: np.ndarray
    link: LinkSpec = field(default_factory=LinkSpec)

    @classmethod
    def zeros(cls, grid: Grid, kernel: KernelSpec, link: LinkSpec) -> LatentField:
        return cls(np.zeros(grid.size), grid, grid_cholesky(kernel, grid), link)

    def with_z(self, z: np.ndarray) -> LatentField:
        return LatentField(np.asarray(z, dtype=float), self.grid, self.chol, self.link)

    def latent(self) -> np.ndarray:
        return self.chol @ self.z

    def values(self) -> np.ndarray:
        return link_apply(self.link, self.latent())

    def rewhiten(self, values: np.ndarray) -> np.ndarray:
        latent = link_invert(self.link, np.ravel(values))
        return linalg.solve_triangular(self.chol, latent, lower=True)


def sample_latent(chol: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    if size is None:
        return chol @ rng.standard_normal(chol.shape[0])
    return rng.standard_normal((size, chol.shape[0])) @ chol.T


def prior_draw(
    mu_kernel: KernelSpec,
    g_kernel: KernelSpec,
    links: tuple[LinkSpec, LinkSpec],
    support: TriggeringSupport,
    seed: int,
    d: int = 1,
    cells: int | None = None,
    max_redraws: int = 100,
) -> ParameterF:
    """Independent GP draws for ``mu`` and ``g`` pushed through their links.

    ``g`` is redrawn (up to ``max_redraws`` times) while its branching ratio is >= 1.
    """
    from .simulate import sequence_rng

    cells = cells or {1: 32, 2: 16}.get(d, 8)
    mu_grid = background_grid(d, cells)
    g_grid = trigger_grid(support, d, cells)
    rng = sequence_rng(seed, 0)
    mu_vals = link_apply(links[0], sample_latent(grid_cholesky(mu_kernel, mu_grid), rng))
    mu = GridField.background(mu_vals, d, cells)
    L_g = grid_cholesky(g_kernel, g_grid)
    for attempt in range(max_redraws + 1):
        g_vals = link_apply(links[1], sample_latent(L_g, sequence_rng(seed, 1 + attempt)))
        g = GridField.trigger(g_vals, support, d, cells)
        if branching_ratio(g) < 1.0:
            return ParameterF(mu, g, support)
    raise ValueError(
        f"trigger draws kept a branching ratio >= 1 after {max_redraws} redraws; "
        "reduce the trigger kernel amplitude or the link ceiling"
    )
