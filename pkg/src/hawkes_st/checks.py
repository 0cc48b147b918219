"""Monte-Carlo checks of the quantitative concentration results.

Each check returns a :class:`CheckReport` whose rows hold every number the
verdict depends on (estimate, bound, Monte-Carlo standard error, the
comparison rule and its slack in standard errors), so the verdict can be
recomputed from the report alone.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .likelihood import LikelihoodWorkspace, per_sequence_log_likelihood
from .model import (
    Dataset,
    DomainError,
    GridField,
    ParameterF,
    branching_ratio,
    intensity,
    l1_distance,
    midpoint_nodes,
)
from .simulate import Method, SimConfig, ground_compensator, simulate


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------- reports

@dataclass
class CheckReport:
    name: str
    settings: dict
    rows: list[dict] = field(default_factory=list)
    replicates: int = 0

    @staticmethod
    def row_passes(row: dict) -> bool:
        est, bound, se, k = row["estimate"], row["bound"], row["se"], row["k_se"]
        if row["rule"] == "le":
            return est <= bound + k * se
        if row["rule"] == "ge":
            return est >= bound - k * se
        if row["rule"] == "gt":
            return est > bound + k * se
        if row["rule"] == "eq":
            return est == bound
        raise ValueError(f"unknown rule {row['rule']!r}")

    def add(self, setting: dict, estimate: float, bound: float, se: float, rule: str, k_se: float = 3.0, **extra) -> dict:
        row = {"setting": setting, "estimate": float(estimate), "bound": float(bound), "se": float(se), "rule": rule, "k_se": float(k_se)}
        row.update(extra)
        row["pass"] = self.row_passes(row)
        self.rows.append(row)
        return row

    @property
    def verdict(self) -> str:
        return "PASS" if self.rows and all(self.row_passes(r) for r in self.rows) else "FAIL"

    def to_dict(self) -> dict:
        return {"check": self.name, "settings": self.settings, "replicates": self.replicates, "verdict": self.verdict, "rows": self.rows}

    def save(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1, default=float))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["check", "setting", "estimate", "bound", "se", "rule", "k_se", "pass"])
                for r in self.rows:
                    w.writerow([self.name, json.dumps(r["setting"], sort_keys=True), r["estimate"], r["bound"], r["se"], r["rule"], r["k_se"], r["pass"]])


def _binomial_se(p: float, reps: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / reps)


def _sim(f: ParameterF, n: int, seed: int, workers: int = 1) -> Dataset:
    return simulate(SimConfig(f, n, seed=seed, method=Method.BRANCHING, workers=workers))


def _groups(n_total: int, size: int) -> np.ndarray:
    return np.arange(n_total) // size


# ---------------------------------------------------------------- kappa

@dataclass(frozen=True)
class KappaInputs:
    mu_lower: float
    mu_upper: float
    g0_l1: float
    lambda02: float

    def __post_init__(self):
        if not 0 < self.mu_lower <= self.mu_upper:
            raise DomainError("need 0 < mu_lower <= mu_upper")
        if not 0 <= self.g0_l1 < 1:
            raise DomainError(f"g0_l1={self.g0_l1} must lie in [0, 1)")
        if not self.lambda02 > 0:
            raise DomainError("the second-moment integral must be > 0")


def kappa(inputs: KappaInputs) -> float:
    """``(4 log 2 / mu_lower) * (2 + 4 (mu_upper / (1 - ||g0||_1) + Lambda02))``."""
    return (4.0 * math.log(2.0) / inputs.mu_lower) * (
        2.0 + 4.0 * (inputs.mu_upper / (1.0 - inputs.g0_l1) + inputs.lambda02)
    )


def squared_intensity_integral(f: ParameterF, seq, cells: int | None = None) -> float:
    cells = cells or {1: 64, 2: 24}.get(f.d, 12)
    pts, vol = midpoint_nodes(f.d, cells)
    return float(np.sum(intensity(f, seq, pts) ** 2) * vol)


def estimate_lambda02(f: ParameterF, n_sequences: int = 1000, seed: int = 0, cells: int | None = None) -> tuple[float, float]:
    """Mean and standard error of ``int_S lambda^2`` over simulated sequences."""
    data = _sim(f, n_sequences, seed)
    vals = np.array([squared_intensity_integral(f, s, cells) for s in data])
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


# ---------------------------------------------------------------- high-probability event

def check_omega_event(f0: ParameterF, n_values, alpha: float, replicates: int, seed: int, pilot_replicates: int | None = None, workers: int = 1) -> CheckReport:
    """Frequency of the count event (mean-count band and max-count bound) against ``1 - 3 n^-alpha``.

    The existential constants (band width ``delta_0`` and ``c_alpha``) are
    calibrated on a pilot run at the smallest ``n`` and then held fixed.
    """
    if replicates < 1:
        raise DomainError("replicates must be >= 1")
    n_values = sorted(int(n) for n in n_values)
    br = branching_ratio(f0.g)
    lo_c = float(f0.mu.values.min()) / (1 - br)
    hi_c = float(f0.mu.values.max()) / (1 - br)
    n0 = n_values[0]
    tail = 1.5 * n0 ** (-alpha)
    if pilot_replicates is None:
        # enough pilot draws that about 20 fall beyond the calibration quantile
        pilot_replicates = max(replicates, math.ceil(20 / min(tail, 1.0)))

    def counts_for(n: int, reps: int, stream: int) -> np.ndarray:
        data = _sim(f0, n * reps, seed * 7 + stream, workers)
        return data.counts.reshape(reps, n)

    pilot = counts_for(n0, pilot_replicates, 1)
    logn = math.log(n0)
    mean = pilot.mean(axis=1)
    need_delta = np.maximum.reduce([np.zeros_like(mean), lo_c - mean, mean - hi_c]) * math.sqrt(n0) / logn
    need_c = pilot.max(axis=1) / logn
    level = float(np.clip(1 - tail, 0.0, 1.0))
    delta0 = float(np.quantile(need_delta, level))
    c_alpha = float(np.quantile(need_c, level))

    report = CheckReport(
        "omega_event",
        {"alpha": alpha, "n_values": n_values, "delta0": delta0, "c_alpha": c_alpha, "count_band": [lo_c, hi_c],
         "pilot_n": n0, "pilot_replicates": pilot_replicates},
        replicates=replicates,
    )
    for k, n in enumerate(n_values):
        c = counts_for(n, replicates, 2 + k)
        delta_n = delta0 * math.log(n) / math.sqrt(n)
        mean = c.mean(axis=1)
        band = (mean >= lo_c - delta_n) & (mean <= hi_c + delta_n)
        cap = c.max(axis=1) <= c_alpha * math.log(n)
        freq = float(np.mean(band & cap))
        target = 1 - 3 * n ** (-alpha)
        report.add(
            {"n": n, "delta_n": delta_n, "max_bound": c_alpha * math.log(n)},
            freq,
            target,
            _binomial_se(max(target, 0.0), replicates),
            "ge",
            slack=target,
            mean_band_frequency=float(band.mean()),
            mean_band_se=_binomial_se(float(band.mean()), replicates),
            max_bound_frequency=float(cap.mean()),
        )
    return report


# ---------------------------------------------------------------- Bernstein

def _event_masses_in_box(f: ParameterF, coords: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    if len(coords) == 0:
        return np.zeros(0)
    return f.g.box_integral(lo[None, :] - coords, hi[None, :] - coords)


def subset_counts_and_compensators(f: ParameterF, data: Dataset, rule, v_per_sequence: float | None = None):
    """``N^i(S_i)`` and ``Lambda^i(S_i)`` for every sequence under a subset rule.

    Rules: ``"full"`` (``S_i = S``), a ``(lo, hi)`` box, a callable
    ``(i, seq) -> (lo, hi)``, or ``"stopped"``: ``S_i = [0, T_i] x [0,1]^d``
    with ``T_i`` the time at which the ground compensator reaches
    ``v_per_sequence`` (the whole window if it never does).
    """
    n = data.n
    D = f.d + 1
    N = np.zeros(n)
    Lam = np.zeros(n)
    if isinstance(rule, str) and rule == "stopped":
        if v_per_sequence is None:
            raise ConfigurationError("the stopped rule needs a per-sequence compensator budget")
        for i, seq in enumerate(data):
            grid = np.concatenate([seq.times, [1.0]])
            lam = ground_compensator(f, seq, grid)
            N[i] = np.sum(lam[:-1] <= v_per_sequence)
            Lam[i] = min(v_per_sequence, lam[-1])
        return N, Lam
    if isinstance(rule, str) and rule == "full":
        coords = np.concatenate([s.coords for s in data]) if data.counts.sum() else np.zeros((0, D))
        seq_idx = np.repeat(np.arange(n), data.counts)
        masses = _event_masses_in_box(f, coords, np.zeros(D), np.ones(D))
        N = data.counts.astype(float)
        Lam = f.mu.integral() + np.bincount(seq_idx, weights=masses, minlength=n)
        return N, Lam
    if callable(rule):
        boxes = [rule(i, seq) for i, seq in enumerate(data)]
    else:
        lo, hi = rule
        boxes = [(lo, hi)] * n
    for i, (seq, (lo, hi)) in enumerate(zip(data, boxes)):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        c = seq.coords
        N[i] = np.sum(np.all((c >= lo) & (c <= hi), axis=1)) if len(c) else 0
        Lam[i] = float(f.mu.box_integral(lo[None], hi[None])[0]) + float(np.sum(_event_masses_in_box(f, c, lo, hi)))
    return N, Lam


def bernstein_threshold(v: float, x: float) -> float:
    return math.sqrt(2.0 * v * x) + x / 3.0


def moment_constants(z: np.ndarray, kmax: int = 8) -> tuple[float, float]:
    """``sigma^2 = E Z^2`` and the smallest ``b`` with ``E|Z|^k <= k! b^(k-2) sigma^2 / 2`` for ``3 <= k <= kmax``."""
    sigma2 = float(np.mean(z**2))
    b = 0.0
    for k in range(3, kmax + 1):
        mk = float(np.mean(np.abs(z) ** k))
        b = max(b, (2.0 * mk / (math.factorial(k) * sigma2)) ** (1.0 / (k - 2)))
    return sigma2, b


def check_bernstein(f: ParameterF, subsets_rule, v: float, x_grid, replicates: int, seed: int, n: int = 1, workers: int = 1) -> CheckReport:
    """Empirical tails of ``sum_i N^i(S_i) - Lambda^i(S_i)`` against the Bernstein bounds.

    Both tails of the ``sqrt(2 v x) + x/3`` form are checked, together with
    the moment form ``exp(-n x^2 / (2 (sigma^2 + b x)))`` for the sample mean
    (``sigma^2`` and ``b`` measured from the per-sequence deviations).
    """
    if replicates < 1 or n < 1:
        raise DomainError("replicates and n must be >= 1")
    stopped = isinstance(subsets_rule, str) and subsets_rule == "stopped"
    if not stopped:
        # background part is deterministic; a violation there is known before simulating
        if isinstance(subsets_rule, str):
            mu_part = f.mu.integral()
        elif callable(subsets_rule):
            mu_part = 0.0
        else:
            lo, hi = subsets_rule
            mu_part = float(f.mu.box_integral(np.asarray(lo, float)[None], np.asarray(hi, float)[None])[0])
        if n * mu_part > v:
            raise ConfigurationError(f"sum of compensators over the subsets is at least {n * mu_part:.6g} > v={v}")
    data = _sim(f, n * replicates, seed, workers)
    N, Lam = subset_counts_and_compensators(f, data, subsets_rule, v / n if stopped else None)
    grp = _groups(n * replicates, n)
    S_N = np.bincount(grp, weights=N, minlength=replicates)
    S_L = np.bincount(grp, weights=Lam, minlength=replicates)
    worst = float(S_L.max())
    if worst > v * (1 + 1e-12):
        raise ConfigurationError(f"measured sum of compensators {worst:.6g} exceeds v={v}")
    dev = S_N - S_L
    rule_name = subsets_rule if isinstance(subsets_rule, str) else "box"
    report = CheckReport(
        "bernstein",
        {"rule": rule_name, "v": v, "n": n, "max_compensator_sum": worst, "mean_compensator_sum": float(S_L.mean())},
        replicates=replicates,
    )
    tails = {}
    for x in x_grid:
        thr = bernstein_threshold(v, x)
        bound = math.exp(-x)
        p_up = float(np.mean(dev >= thr))
        p_lo = float(np.mean(dev <= -thr))
        tails[x] = p_up
        report.add({"form": "upper", "x": x, "threshold": thr}, p_up, bound, _binomial_se(p_up, replicates), "le")
        report.add({"form": "lower", "x": x, "threshold": thr}, p_lo, bound, _binomial_se(p_lo, replicates), "le")
    z = N - Lam
    sigma2, b = moment_constants(z)
    report.settings.update({"sigma2": sigma2, "b": b})
    mean_dev = dev / n
    for x in x_grid:
        bound = math.exp(-n * x * x / (2.0 * (sigma2 + b * x))) if sigma2 + b * x > 0 else 1.0
        p = float(np.mean(mean_dev >= x))
        report.add({"form": "moment", "x": x}, p, bound, _binomial_se(p, replicates), "le")
    return report


# ---------------------------------------------------------------- Kullback-Leibler

def perturbed_parameter(f0: ParameterF, eps: float) -> ParameterF:
    """``f0`` shifted up by ``eps/2`` on both components (sup-distance exactly ``eps``)."""
    mu = GridField(f0.mu.grid, f0.mu.values + eps / 2, f0.mu.domain)
    g = GridField(f0.g.grid, f0.g.values + eps / 2, f0.g.domain)
    if branching_ratio(g) >= 1:
        raise ConfigurationError(f"eps={eps} pushes the branching ratio to {branching_ratio(g):.4g} >= 1")
    return ParameterF(mu, g, f0.support)


def sup_distance(f: ParameterF, f0: ParameterF) -> float:
    return float(np.max(np.abs(f.mu.values - f0.mu.values)) + np.max(np.abs(f.g.values - f0.g.values)))


def check_kl_bound(
    f0: ParameterF,
    eps: float,
    n: int,
    replicates: int,
    seed: int,
    f: ParameterF | None = None,
    slack: float = 0.5,
    lambda02_sequences: int = 1000,
    workers: int = 1,
) -> CheckReport:
    """Monte-Carlo KL between the laws of ``n`` sequences under ``f0`` and a nearby ``f``.

    The bound is ``kappa * n * eps^2 * (1 + slack)``.
    """
    if replicates < 1:
        raise DomainError("replicates must be >= 1")
    f = perturbed_parameter(f0, eps) if f is None else f
    if f.mu.grid != f0.mu.grid or f.g.grid != f0.g.grid or f.support != f0.support:
        raise ConfigurationError("f and f0 must share grids and support")
    dist = sup_distance(f, f0)
    if dist > eps * (1 + 1e-9):
        raise ConfigurationError(f"f lies at sup-distance {dist:.6g} > eps={eps}")
    total = n * replicates
    data = _sim(f0, total, seed, workers)
    ws = LikelihoodWorkspace.for_parameter(data, f0)
    llr = per_sequence_log_likelihood(f0, ws) - per_sequence_log_likelihood(f, ws)
    per_rep = np.bincount(_groups(total, n), weights=llr, minlength=replicates)
    est = float(per_rep.mean())
    se = float(llr.std(ddof=1) * math.sqrt(n / replicates)) if total > 1 else float("nan")
    lam02, lam02_se = estimate_lambda02(f0, lambda02_sequences, seed + 1)
    inputs = KappaInputs(float(f0.mu.values.min()), float(f0.mu.values.max()), branching_ratio(f0.g), lam02)
    k = kappa(inputs)
    bound = k * n * eps**2 * (1 + slack)
    report = CheckReport(
        "kl_bound",
        {"eps": eps, "n": n, "slack": slack, "kappa": k, "lambda02": lam02, "lambda02_se": lam02_se,
         "mu_lower": inputs.mu_lower, "mu_upper": inputs.mu_upper, "g0_l1": inputs.g0_l1, "sup_distance": dist},
        replicates=replicates,
    )
    report.add({"form": "bound"}, est, bound, se, "le", per_sequence=est / n)
    report.add({"form": "nonnegative"}, est, 0.0, se, "ge")
    return report


# ---------------------------------------------------------------- identifiability

def check_identifiability(f: ParameterF, f2: ParameterF, n: int, seed: int, workers: int = 1) -> CheckReport:
    """Log-likelihood ratio of ``f`` against ``f2`` on ``n`` sequences simulated from ``f``."""
    data = _sim(f, n, seed, workers)
    ll1 = per_sequence_log_likelihood(f, LikelihoodWorkspace.for_parameter(data, f))
    ll2 = per_sequence_log_likelihood(f2, LikelihoodWorkspace.for_parameter(data, f2))
    llr = ll1 - ll2
    ratio = float(np.sum(llr))
    se = float(llr.std(ddof=1) * math.sqrt(n)) if n > 1 else 0.0
    same = f.mu.grid == f2.mu.grid and f.g.grid == f2.g.grid and l1_distance(f, f2) == 0.0
    report = CheckReport("identifiability", {"n": n, "l1_distance": 0.0 if same else l1_distance(f, f2)}, replicates=1)
    if same:
        report.add({"case": "identical"}, ratio, 0.0, se, "eq", k_se=0.0)
    else:
        report.add({"case": "distinct"}, ratio, 0.0, se, "gt")
    return report
