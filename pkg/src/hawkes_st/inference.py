"""Posterior computation in whitened coordinates: MAP, pCN MCMC and mean-field VI.

All three start from ``z = 0`` (the prior mean) unless given an explicit
initial vector; pCN and VI can be warm-started from the MAP.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .gp import KernelSpec, LatentField, LinkSpec, link_apply
from .grid import trapezoid_weights
from .likelihood import LikelihoodWorkspace, WhitenedModel, gaussian_kl_to_standard
from .model import ParameterF, l1_distance, stochastic_distance
from .simulate import Method, SimConfig, sequence_rng, simulate

log = logging.getLogger(__name__)


class FitMethod(enum.Enum):
    MAP = "map"
    PCN = "pcn"
    VI = "vi"


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    method: FitMethod = FitMethod.MAP
    iterations: int = 200
    seed: int = 0
    mu_kernel: KernelSpec = field(default_factory=lambda: KernelSpec.matern(1.0, 0.3, 1.5))
    g_kernel: KernelSpec = field(default_factory=lambda: KernelSpec.matern(1.0, 0.3, 1.5))
    mu_link: LinkSpec = field(default_factory=LinkSpec.softplus)
    g_link: LinkSpec = field(default_factory=LinkSpec.softplus)
    fit_trigger: bool = True
    # MAP
    tol: float = 1e-6
    # pCN
    pcn_beta: float = 0.2
    burn_in: int = 0
    thin: int = 1
    adapt_beta: bool = True
    target_accept: float = 0.23
    warm_start: bool = False
    # VI
    step_size: float = 0.05
    n_mc: int = 8
    init_logstd: float = 0.0
    n_band_draws: int = 0

    def __post_init__(self):
        if isinstance(self.method, str):
            object.__setattr__(self, "method", FitMethod(self.method.lower()))
        if not 0.0 < self.pcn_beta <= 1.0:
            raise ValueError("pcn_beta must lie in (0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.burn_in < 0 or self.thin < 1:
            raise ValueError("burn_in must be >= 0 and thin >= 1")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")


@dataclass
class PosteriorSummary:
    method: FitMethod
    point: ParameterF
    mu_band: tuple[np.ndarray, np.ndarray] | None = None
    g_band: tuple[np.ndarray, np.ndarray] | None = None
    mu_sd: np.ndarray | None = None
    g_sd: np.ndarray | None = None
    l1_error: float | None = None
    ds_error: float | None = None
    acceptance_rate: float | None = None
    beta: float | None = None
    final_elbo: float | None = None
    invalid_g_fraction: float | None = None
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    z: np.ndarray | None = None
    draws_l1: np.ndarray | None = None
    q_logstd: np.ndarray | None = None

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else np.asarray(x).ravel().tolist()

        return {
            "method": self.method.value,
            "point": self.point.to_dict(),
            "mu_lower": arr(self.mu_band[0]) if self.mu_band else None,
            "mu_upper": arr(self.mu_band[1]) if self.mu_band else None,
            "g_lower": arr(self.g_band[0]) if self.g_band else None,
            "g_upper": arr(self.g_band[1]) if self.g_band else None,
            "l1_error": self.l1_error,
            "ds_error": self.ds_error,
            "acceptance_rate": self.acceptance_rate,
            "beta": self.beta,
            "final_elbo": self.final_elbo,
            "invalid_g_fraction": self.invalid_g_fraction,
            "warnings": list(self.warnings),
        }

    def save(self, json_path, trace_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1))
        if trace_path is not None:
            with open(trace_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["iter", "objective", "acceptance"])
                for it, obj, acc in self.trace:
                    w.writerow([it, repr(float(obj)), repr(float(acc))])

    def with_truth(self, truth: ParameterF, data=None) -> PosteriorSummary:
        self.l1_error = l1_distance(self.point, truth)
        if data is not None:
            self.ds_error = stochastic_distance(self.point, truth, data)
        return self


def build_model(ws: LikelihoodWorkspace, cfg: FitConfig) -> WhitenedModel:
    mu = LatentField.zeros(ws.mu_grid, cfg.mu_kernel, cfg.mu_link)
    g = LatentField.zeros(ws.g_grid, cfg.g_kernel, cfg.g_link) if cfg.fit_trigger else None
    return WhitenedModel(ws, mu, g)


def _point(model: WhitenedModel, mu_vals, g_vals) -> tuple[ParameterF, list[str]]:
    from .model import DomainError, GridField

    d = model.ws.data.d
    mu = GridField.background(mu_vals, d, model.ws.mu_grid.cells)
    g = GridField.trigger(g_vals, model.ws.support, d, model.ws.g_grid.cells)
    try:
        return ParameterF(mu, g, model.ws.support), []
    except DomainError as exc:
        return ParameterF(mu, g, model.ws.support, check=False), [f"point estimate violates model constraints: {exc}"]


# ---------------------------------------------------------------- MAP

def _lbfgs_direction(grad, s_hist, y_hist):
    q = grad.copy()
    alphas = []
    for s, y in reversed(list(zip(s_hist, y_hist))):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for a, rho, s, y in reversed(alphas):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def maximize(model: WhitenedModel, z0: np.ndarray, iterations: int, tol: float, memory: int = 10):
    """Ascent on the whitened log-posterior with Armijo backtracking.

    Directions are limited-memory quasi-Newton (falling back to the gradient
    when they fail to ascend). Only accepted steps enter the trace, so the
    objective trace is nondecreasing.
    """
    z = np.array(z0, dtype=float)
    value, grad = model.log_posterior_and_grad(z)
    if not np.isfinite(value):
        raise FitError(f"non-finite objective at initialisation; iterate={z.tolist()}")
    trace = [(0, value, 1.0)]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    for it in range(1, iterations + 1):
        if np.linalg.norm(grad) < tol:
            break
        direction = _lbfgs_direction(grad, s_hist, y_hist)
        slope = grad @ direction
        if not slope > 0:
            s_hist.clear()
            y_hist.clear()
            direction = grad
            slope = grad @ grad
        step = 1.0
        accepted = False
        for _ in range(60):
            trial = z + step * direction
            try:
                tv, tg = model.log_posterior_and_grad(trial, clamp=True)
            except FloatingPointError:
                tv = -np.inf
            if np.isfinite(tv) and tv >= value + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        # accepted states are re-evaluated without clamping
        tv, tg = model.log_posterior_and_grad(trial)
        if not np.isfinite(tv):
            raise FitError(f"non-finite objective at iteration {it}; iterate={trial.tolist()}")
        s, y = trial - z, grad - tg
        if s @ y > 1e-12:
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        z, value, grad = trial, tv, tg
        trace.append((it, value, 1.0))
    return z, value, grad, trace


def fit_map(ws: LikelihoodWorkspace, cfg: FitConfig, z0: np.ndarray | None = None) -> PosteriorSummary:
    model = build_model(ws, cfg)
    z0 = np.zeros(model.dim) if z0 is None else z0
    z, value, grad, trace = maximize(model, z0, cfg.iterations, cfg.tol)
    point, warns = _point(model, *model.field_values(z))
    return PosteriorSummary(FitMethod.MAP, point, trace=trace, warnings=warns, z=z)


# ---------------------------------------------------------------- pCN

def _node_l1_weights(ws: LikelihoodWorkspace):
    return trapezoid_weights(ws.mu_grid), trapezoid_weights(ws.g_grid)


def pcn_chain(model: WhitenedModel, cfg: FitConfig, z0: np.ndarray, on_draw=None):
    """Run the chain; ``on_draw(z)`` is called for every retained state.

    Returns ``(z, trace, acceptance_rate_after_burn_in, beta)``.
    """
    rng = sequence_rng(cfg.seed, 0)
    beta = cfg.pcn_beta
    z = np.array(z0, dtype=float)
    ll = model.loglik(z)
    trace = []
    acc_window = 0
    acc_post = 0
    n_post = 0
    for it in range(1, cfg.iterations + 1):
        prop = np.sqrt(1.0 - beta**2) * z + beta * rng.standard_normal(model.dim)
        try:
            ll_prop = model.loglik(prop)
        except ArithmeticError:
            ll_prop = -np.inf
        accept = np.log(rng.random()) < ll_prop - ll
        if accept:
            z, ll = prop, ll_prop
        burning = it <= cfg.burn_in
        if burning:
            acc_window += accept
            if cfg.adapt_beta and it % 50 == 0:
                rate = acc_window / 50
                beta = float(np.clip(beta * np.exp(2.0 * (rate - cfg.target_accept)), 1e-4, 1.0))
                acc_window = 0
        else:
            n_post += 1
            acc_post += accept
            if on_draw is not None and (it - cfg.burn_in) % cfg.thin == 0:
                on_draw(z)
        trace.append((it, ll, (acc_post / n_post) if n_post else float(accept)))
    rate = acc_post / n_post if n_post else None
    if cfg.adapt_beta and cfg.burn_in:
        log.info("pCN beta adapted to %.4g during %d burn-in iterations", beta, cfg.burn_in)
    return z, trace, rate, beta


def fit_pcn(ws: LikelihoodWorkspace, cfg: FitConfig, z0: np.ndarray | None = None, truth: ParameterF | None = None) -> PosteriorSummary:
    model = build_model(ws, cfg)
    if z0 is None:
        if cfg.warm_start:
            z0 = fit_map(ws, replace(cfg, method=FitMethod.MAP, iterations=max(cfg.iterations, 200))).z
        else:
            z0 = np.zeros(model.dim)
    mu_draws, g_draws = [], []

    def keep(z):
        mv, gv = model.field_values(z)
        mu_draws.append(mv)
        g_draws.append(gv)

    if cfg.iterations == 0:
        point, warns = _point(model, *model.field_values(z0))
        return PosteriorSummary(FitMethod.PCN, point, warnings=warns, z=np.asarray(z0), beta=cfg.pcn_beta)
    z, trace, rate, beta = pcn_chain(model, cfg, z0, keep)
    warns = []
    if not mu_draws:
        keep(z)
        warns.append("no post-burn-in draws retained; summary uses the final state")
    mu_d = np.array(mu_draws)
    g_d = np.array(g_draws)
    w_mu, w_g = _node_l1_weights(ws)
    br = g_d @ w_g
    invalid = float(np.mean(br >= 1.0))
    if invalid > 0:
        warns.append(f"{invalid:.1%} of retained draws have branching ratio >= 1")
    if rate is not None and rate < 0.01:
        warns.append(f"acceptance rate {rate:.3%} below 1% after adaptation")
    point, pw = _point(model, mu_d.mean(0), g_d.mean(0))
    summary = PosteriorSummary(
        FitMethod.PCN,
        point,
        mu_band=(np.quantile(mu_d, 0.05, axis=0), np.quantile(mu_d, 0.95, axis=0)),
        g_band=(np.quantile(g_d, 0.05, axis=0), np.quantile(g_d, 0.95, axis=0)),
        mu_sd=mu_d.std(0),
        g_sd=g_d.std(0),
        acceptance_rate=rate,
        beta=beta,
        invalid_g_fraction=invalid,
        trace=trace,
        warnings=warns + pw,
        z=z,
    )
    _clip_point_into_band(summary)
    if truth is not None:
        tm, tg = truth.mu.values.ravel(), truth.g.values.ravel()
        summary.draws_l1 = np.abs(mu_d - tm) @ w_mu + np.abs(g_d - tg) @ w_g
    return summary


def _clip_point_into_band(summary: PosteriorSummary) -> None:
    # bands are widened to contain the point estimate (a mean of skewed draws can leave [q05, q95])
    for band, vals in ((summary.mu_band, summary.point.mu.values.ravel()), (summary.g_band, summary.point.g.values.ravel())):
        if band is not None:
            np.minimum(band[0], vals, out=band[0])
            np.maximum(band[1], vals, out=band[1])


# ---------------------------------------------------------------- VI

def fit_vi(ws: LikelihoodWorkspace, cfg: FitConfig, z0: np.ndarray | None = None) -> PosteriorSummary:
    """Stochastic-gradient ELBO ascent (Adam) over a mean-field Gaussian in whitened space."""
    from .likelihood import elbo_samples

    model = build_model(ws, cfg)
    if z0 is None:
        if cfg.warm_start:
            z0 = fit_map(ws, replace(cfg, method=FitMethod.MAP, iterations=max(cfg.iterations, 200))).z
        else:
            z0 = np.zeros(model.dim)
    m = np.array(z0, dtype=float)
    s = np.full(model.dim, cfg.init_logstd)
    rng = sequence_rng(cfg.seed, 0)
    b1, b2, eps = 0.9, 0.999, 1e-8
    mom = np.zeros(2 * model.dim)
    vel = np.zeros(2 * model.dim)
    trace = []
    for it in range(1, cfg.iterations + 1):
        vals, g_m, g_s = elbo_samples(model, m, s, cfg.n_mc, rng, with_grad=True)
        elbo = float(vals.mean()) - gaussian_kl_to_standard(m, s)
        if not np.isfinite(elbo):
            raise FitError(f"ELBO diverged at iteration {it}")
        trace.append((it, elbo, float("nan")))
        grad = np.concatenate([g_m - m, g_s + 1.0 - np.exp(2 * s)])
        mom = b1 * mom + (1 - b1) * grad
        vel = b2 * vel + (1 - b2) * grad**2
        upd = cfg.step_size * (mom / (1 - b1**it)) / (np.sqrt(vel / (1 - b2**it)) + eps)
        m = m + upd[: model.dim]
        s = s + upd[model.dim:]
    final = None
    if cfg.iterations > 0:
        vals = elbo_samples(model, m, s, max(64, cfg.n_mc), sequence_rng(cfg.seed, 1))
        final = float(vals.mean()) - gaussian_kl_to_standard(m, s)
    point, warns = _point(model, *model.field_values(m))
    summary = PosteriorSummary(FitMethod.VI, point, trace=trace, warnings=warns, z=m, final_elbo=final, q_logstd=s)
    if cfg.iterations > 0:
        summary.mu_band, summary.mu_sd = _vi_band(model.mu, m[: model.n_mu], s[: model.n_mu])
        if model.g is not None:
            summary.g_band, summary.g_sd = _vi_band(model.g, m[model.n_mu:], s[model.n_mu:])
        _clip_point_into_band(summary)
    return summary


def _vi_band(template: LatentField, m, s, z05: float = 1.6448536269514722):
    """Node-wise 5-95% band of ``link(L z)``, ``z ~ N(m, diag e^{2s})``, and a delta-method sd."""
    from .gp import link_derivative

    mean = template.chol @ m
    sd = np.sqrt((template.chol**2) @ np.exp(2 * s))
    lo = link_apply(template.link, mean - z05 * sd)
    hi = link_apply(template.link, mean + z05 * sd)
    return (lo, hi), link_derivative(template.link, mean) * sd


def fit(ws: LikelihoodWorkspace, cfg: FitConfig) -> PosteriorSummary:
    if cfg.method is FitMethod.MAP:
        return fit_map(ws, cfg)
    if cfg.method is FitMethod.PCN:
        return fit_pcn(ws, cfg)
    return fit_vi(ws, cfg)


def select_lengthscale(ws: LikelihoodWorkspace, cfg: FitConfig, lengthscales) -> tuple[float, dict[float, float]]:
    """Score a fixed grid of background length-scales by the MAP log-posterior."""
    scores = {}
    for ell in lengthscales:
        k = replace(cfg.mu_kernel, lengthscale=float(ell))
        res = fit_map(ws, replace(cfg, method=FitMethod.MAP, mu_kernel=k))
        scores[float(ell)] = res.trace[-1][1]
    best = max(scores, key=scores.get)
    return best, scores


# ---------------------------------------------------------------- contraction

def rate_exponent(tau: float, d: int) -> float:
    """Contraction exponent ``tau / (2 tau + d + 1)`` of the Matérn-prior rate ``n^{-exponent}``."""
    return tau / (2.0 * tau + d + 1.0)


@dataclass
class ContractionCurve:
    rows: list[tuple[int, float, float, float]]
    slope: float
    theoretical_slope: float | None = None

    @property
    def ns(self):
        return [r[0] for r in self.rows]

    @property
    def medians(self):
        return [r[1] for r in self.rows]


def posterior_l1_curve(
    truth: ParameterF,
    ns,
    base_cfg: FitConfig,
    seed: int,
    replicates: int = 1,
    tau: float | None = None,
    workers: int = 1,
) -> ContractionCurve:
    """Median posterior L1 error to ``truth`` as the number of sequences grows.

    For each ``n``: simulate ``n`` sequences from ``truth`` (``replicates``
    independent datasets), sample the posterior with pCN on the truth's grids,
    and pool the L1 errors of the retained draws.
    """
    ns = [int(n) for n in ns]
    if len(ns) < 3 or any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("ns must hold at least 3 strictly increasing values")
    cfg = replace(base_cfg, method=FitMethod.PCN)
    rows = []
    for k, n in enumerate(ns):
        errs = []
        for r in range(replicates):
            data = simulate(SimConfig(truth, n, seed=(seed * 1_000_003 + k * 1009 + r) & ((1 << 63) - 1), method=Method.BRANCHING, workers=workers))
            ws = LikelihoodWorkspace.for_parameter(data, truth)
            res = fit_pcn(ws, replace(cfg, seed=cfg.seed + 7919 * k + r), truth=truth)
            errs.append(res.draws_l1)
        errs = np.concatenate(errs)
        rows.append((n, float(np.median(errs)), float(np.quantile(errs, 0.25)), float(np.quantile(errs, 0.75))))
    slope = float(np.polyfit(np.log([r[0] for r in rows]), np.log([r[1] for r in rows]), 1)[0])
    theo = -rate_exponent(tau, truth.d) if tau is not None else None
    return ContractionCurve(rows, slope, theo)
