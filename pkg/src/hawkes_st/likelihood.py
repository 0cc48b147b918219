"""Exact log-likelihood of i.i.d. Hawkes sequences and its whitened-GP gradient.

For fields on fixed grids the intensity at every event is linear in the node
values of ``mu`` and ``g``::

    lambda_events = A_mu @ mu + A_g @ g

and so is the total compensator ``n * q_mu @ mu + q_g @ g``. The workspace
precomputes the sparse interpolation matrices (over the finite-range
neighbour pairs) and the exact box-integral weights once per dataset, after
which a likelihood evaluation is two sparse mat-vecs and two dot products.
"""
from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .gp import LatentField, link_apply, link_derivative
from .grid import Grid, hat_box_weights, interp_weights, trapezoid_weights
from .model import Dataset, GridField, ParameterF, TriggeringSupport, background_grid, trigger_grid

CLAMP = 1e-300


class NonPositiveIntensity(ArithmeticError):
    def __init__(self, sequence: int, event: int, value: float):
        super().__init__(f"intensity {value!r} <= 0 at event {event} of sequence {sequence}")
        self.sequence = sequence
        self.event = event


def neighbour_pairs(seq_times: np.ndarray, seq_locs: np.ndarray, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Pairs ``(j, k)`` with ``0 < t_j - t_k <= a`` and ``||s_j - s_k||_inf <= b``."""
    m = len(seq_times)
    if m < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    start = np.searchsorted(seq_times, seq_times - a, side="left")
    lens = np.arange(m) - start
    j = np.repeat(np.arange(m), lens)
    k = np.concatenate([np.arange(s, e) for s, e in zip(start, range(m))]) if lens.sum() else np.zeros(0, np.int64)
    k = k.astype(np.int64)
    ok = np.all(np.abs(seq_locs[j] - seq_locs[k]) <= b, axis=1) & (seq_times[j] - seq_times[k] <= a)
    return j[ok], k[ok]


def _box_factor_list(grid: Grid, lo: np.ndarray, hi: np.ndarray) -> list[np.ndarray]:
    return [hat_box_weights(grid.axes[k], lo[:, k], hi[:, k]) for k in range(grid.ndim)]


@dataclass(frozen=True, eq=False)
class LikelihoodWorkspace:
    """Dataset-dependent precomputation for a fixed support and fixed field grids."""

    data: Dataset
    support: TriggeringSupport
    mu_grid: Grid
    g_grid: Grid
    seq_index: np.ndarray        # sequence of each event (E,)
    event_index: np.ndarray      # position of each event within its sequence (E,)
    A_mu: sparse.csr_matrix      # (E, N_mu)
    A_g: sparse.csr_matrix       # (E, N_g)
    q_mu: np.ndarray             # trapezoid weights of mu (N_mu,)
    q_g: np.ndarray              # summed clipped-box weights of g over all events (N_g,)
    g_factors: tuple[np.ndarray, ...]  # per-axis box weights of every event, for per-event masses
    pairs: tuple[tuple[np.ndarray, np.ndarray], ...]  # finite-range neighbour lists per sequence

    @classmethod
    def build(cls, data: Dataset, support: TriggeringSupport, mu_cells: int, g_cells: int | None = None) -> LikelihoodWorkspace:
        d = data.d
        mu_grid = background_grid(d, mu_cells)
        g_grid = trigger_grid(support, d, g_cells or mu_cells)
        coords = [seq.coords for seq in data.sequences]
        E = sum(len(c) for c in coords)
        D = d + 1
        allc = np.concatenate(coords) if E else np.zeros((0, D))
        seq_index = np.repeat(np.arange(data.n), [len(c) for c in coords])
        event_index = np.concatenate([np.arange(len(c)) for c in coords]) if E else np.zeros(0, np.int64)

        idx, w = interp_weights(mu_grid, allc)
        rows = np.repeat(np.arange(E), idx.shape[1])
        A_mu = sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(E, mu_grid.size))

        offsets = np.concatenate([[0], np.cumsum([len(c) for c in coords])])
        pairs = []
        lag_rows, lags = [], []
        for i, seq in enumerate(data.sequences):
            j, k = neighbour_pairs(seq.times, seq.locations, support.a, support.b)
            pairs.append((j, k))
            if len(j):
                lags.append(coords[i][j] - coords[i][k])
                lag_rows.append(offsets[i] + j)
        if lags:
            lag = np.concatenate(lags)
            lrow = np.concatenate(lag_rows)
            gidx, gw = interp_weights(g_grid, lag)
            A_g = sparse.csr_matrix(
                (gw.ravel(), (np.repeat(lrow, gidx.shape[1]), gidx.ravel())), shape=(E, g_grid.size)
            )
        else:
            A_g = sparse.csr_matrix((E, g_grid.size))

        q_mu = trapezoid_weights(mu_grid)
        lo = -allc
        hi = 1.0 - allc
        factors = tuple(_box_factor_list(g_grid, lo, hi))
        if E:
            letters = string.ascii_lowercase[:D]
            spec = ",".join(f"p{c}" for c in letters) + f"->{letters}"
            q_g = np.einsum(spec, *factors, optimize=True).ravel()
        else:
            q_g = np.zeros(g_grid.size)
        return cls(data, support, mu_grid, g_grid, seq_index, event_index, A_mu, A_g, q_mu, q_g, factors, tuple(pairs))

    @classmethod
    def for_parameter(cls, data: Dataset, f: ParameterF) -> LikelihoodWorkspace:
        return cls.build(data, f.support, f.mu.grid.cells, f.g.grid.cells)

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def n_events(self) -> int:
        return len(self.seq_index)

    def matches(self, f: ParameterF) -> bool:
        return f.support == self.support and f.mu.grid == self.mu_grid and f.g.grid == self.g_grid

    def event_intensities(self, mu_vals: np.ndarray, g_vals: np.ndarray) -> np.ndarray:
        return self.A_mu @ mu_vals + self.A_g @ g_vals

    def event_masses(self, g_vals: np.ndarray) -> np.ndarray:
        """Clipped triggered mass ``G_S`` of every event."""
        D = self.g_grid.ndim
        letters = string.ascii_lowercase[:D]
        spec = ",".join(f"p{c}" for c in letters) + f",{letters}->p"
        if self.n_events == 0:
            return np.zeros(0)
        return np.einsum(spec, *self.g_factors, np.reshape(g_vals, self.g_grid.shape), optimize=True)


def _values(f: ParameterF, ws: LikelihoodWorkspace) -> tuple[np.ndarray, np.ndarray]:
    if not ws.matches(f):
        raise ValueError("parameter grids/support do not match the workspace; rebuild it")
    return f.mu.values.ravel(), f.g.values.ravel()


def _check_positive(lam: np.ndarray, ws: LikelihoodWorkspace) -> None:
    bad = np.flatnonzero(~(lam > 0))
    if len(bad):
        e = bad[0]
        raise NonPositiveIntensity(int(ws.seq_index[e]), int(ws.event_index[e]), float(lam[e]))


def loglik_values(mu_vals: np.ndarray, g_vals: np.ndarray, ws: LikelihoodWorkspace, clamp: bool = False) -> float:
    lam = ws.event_intensities(mu_vals, g_vals)
    if clamp:
        lam = np.maximum(lam, CLAMP)
    else:
        _check_positive(lam, ws)
    return float(np.sum(np.log(lam)) - ws.n * (ws.q_mu @ mu_vals) - ws.q_g @ g_vals)


def log_likelihood(f: ParameterF, ws: LikelihoodWorkspace) -> float:
    """``sum_i [ sum_j log lambda^i(t_j, s_j) - int_S lambda^i ]``."""
    return loglik_values(*_values(f, ws), ws)


def per_sequence_log_likelihood(f: ParameterF, ws: LikelihoodWorkspace) -> np.ndarray:
    mu_vals, g_vals = _values(f, ws)
    lam = ws.event_intensities(mu_vals, g_vals)
    _check_positive(lam, ws)
    logs = np.bincount(ws.seq_index, weights=np.log(lam), minlength=ws.n)
    comp = np.bincount(ws.seq_index, weights=ws.event_masses(g_vals), minlength=ws.n)
    return logs - ws.q_mu @ mu_vals - comp


def loglik_value_and_grad(mu_vals, g_vals, ws: LikelihoodWorkspace, clamp: bool = False):
    lam = ws.event_intensities(mu_vals, g_vals)
    if clamp:
        lam = np.maximum(lam, CLAMP)
    else:
        _check_positive(lam, ws)
    inv = 1.0 / lam
    value = float(np.sum(np.log(lam)) - ws.n * (ws.q_mu @ mu_vals) - ws.q_g @ g_vals)
    return value, ws.A_mu.T @ inv - ws.n * ws.q_mu, ws.A_g.T @ inv - ws.q_g


class WhitenedModel:
    """Log-posterior over the stacked whitened vector ``z = [z_mu, z_g]``.

    With ``g_template=None`` the trigger is pinned at zero and only ``z_mu`` is free.
    """

    def __init__(self, ws: LikelihoodWorkspace, mu_template: LatentField, g_template: LatentField | None):
        if mu_template.grid != ws.mu_grid or (g_template is not None and g_template.grid != ws.g_grid):
            raise ValueError("latent field grids must match the workspace grids")
        self.ws = ws
        self.mu = mu_template
        self.g = g_template
        self.n_mu = mu_template.grid.size
        self.n_g = g_template.grid.size if g_template is not None else 0
        self.dim = self.n_mu + self.n_g

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return z[: self.n_mu], z[self.n_mu:]

    def latents(self, z):
        z_mu, z_g = self.split(z)
        lat_mu = self.mu.chol @ z_mu
        lat_g = self.g.chol @ z_g if self.g is not None else None
        return lat_mu, lat_g

    def field_values(self, z) -> tuple[np.ndarray, np.ndarray]:
        lat_mu, lat_g = self.latents(z)
        mu_vals = link_apply(self.mu.link, lat_mu)
        g_vals = link_apply(self.g.link, lat_g) if self.g is not None else np.zeros(self.ws.g_grid.size)
        return mu_vals, g_vals

    def loglik(self, z, clamp: bool = False) -> float:
        return loglik_values(*self.field_values(z), self.ws, clamp=clamp)

    def loglik_and_grad(self, z, clamp: bool = False) -> tuple[float, np.ndarray]:
        lat_mu, lat_g = self.latents(z)
        mu_vals = link_apply(self.mu.link, lat_mu)
        g_vals = link_apply(self.g.link, lat_g) if self.g is not None else np.zeros(self.ws.g_grid.size)
        value, d_mu, d_g = loglik_value_and_grad(mu_vals, g_vals, self.ws, clamp=clamp)
        grad_mu = self.mu.chol.T @ (link_derivative(self.mu.link, lat_mu) * d_mu)
        if self.g is None:
            return value, grad_mu
        grad_g = self.g.chol.T @ (link_derivative(self.g.link, lat_g) * d_g)
        return value, np.concatenate([grad_mu, grad_g])

    def log_posterior(self, z, clamp: bool = False) -> float:
        return self.loglik(z, clamp) - 0.5 * float(z @ z)

    def log_posterior_and_grad(self, z, clamp: bool = False) -> tuple[float, np.ndarray]:
        value, grad = self.loglik_and_grad(z, clamp)
        return value - 0.5 * float(z @ z), grad - z

    def to_parameter(self, z, check: bool = True) -> ParameterF:
        mu_vals, g_vals = self.field_values(z)
        d = self.ws.data.d
        return ParameterF(
            GridField.background(mu_vals, d, self.ws.mu_grid.cells),
            GridField.trigger(g_vals, self.ws.support, d, self.ws.g_grid.cells),
            self.ws.support,
            check=check,
        )


def log_posterior_grad(z_mu: LatentField, z_g: LatentField | None, ws: LikelihoodWorkspace):
    """Whitened log-posterior value and its gradients ``(grad_mu, grad_g)``.

    ``z_g=None`` pins the trigger at zero; ``grad_g`` is then ``None``.
    """
    model = WhitenedModel(ws, z_mu, z_g)
    z = z_mu.z if z_g is None else np.concatenate([z_mu.z, z_g.z])
    value, grad = model.log_posterior_and_grad(z)
    g_mu, g_g = model.split(grad)
    return value, (g_mu, g_g if z_g is not None else None)


def gaussian_kl_to_standard(q_mean: np.ndarray, q_logstd: np.ndarray) -> float:
    """``KL(N(m, diag e^{2s}) || N(0, I))``."""
    return 0.5 * float(np.sum(q_mean**2 + np.exp(2 * q_logstd) - 1.0 - 2.0 * q_logstd))


def elbo_samples(model: WhitenedModel, q_mean, q_logstd, n_mc: int, rng: np.random.Generator, with_grad: bool = False):
    """Per-draw log-likelihoods (and, optionally, reparameterised gradients)."""
    eps = rng.standard_normal((n_mc, model.dim))
    std = np.exp(q_logstd)
    vals = np.empty(n_mc)
    g_mean = np.zeros(model.dim)
    g_logstd = np.zeros(model.dim)
    for r in range(n_mc):
        z = q_mean + std * eps[r]
        if with_grad:
            vals[r], gz = model.loglik_and_grad(z)
            g_mean += gz
            g_logstd += gz * eps[r] * std
        else:
            vals[r] = model.loglik(z)
    if with_grad:
        return vals, g_mean / n_mc, g_logstd / n_mc
    return vals


def elbo_estimate(q_mean, q_logstd, ws_or_model, n_mc: int, seed: int, templates=None, return_se: bool = False):
    """Monte-Carlo ELBO for a mean-field Gaussian over whitened coefficients.

    Only ``E_Q[log L]`` is sampled; the prior cross-entropy and the entropy
    of ``Q`` enter in closed form as ``-KL(Q || N(0, I))``.
    """
    from .simulate import sequence_rng

    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if isinstance(ws_or_model, WhitenedModel):
        model = ws_or_model
    else:
        model = WhitenedModel(ws_or_model, *templates)
    q_mean = np.concatenate([np.ravel(v) for v in q_mean]) if isinstance(q_mean, (tuple, list)) else np.asarray(q_mean)
    q_logstd = np.concatenate([np.ravel(v) for v in q_logstd]) if isinstance(q_logstd, (tuple, list)) else np.asarray(q_logstd)
    vals = elbo_samples(model, q_mean, q_logstd, n_mc, sequence_rng(seed, 0))
    elbo = float(vals.mean()) - gaussian_kl_to_standard(q_mean, q_logstd)
    if return_se:
        se = float(vals.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("nan")
        return elbo, se
    return elbo
