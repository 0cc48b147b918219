import csv
import json
import math

import numpy as np
import pytest

from hawkes_st.checks import (
    CheckReport,
    ConfigurationError,
    KappaInputs,
    bernstein_threshold,
    check_bernstein,
    check_identifiability,
    check_kl_bound,
    check_omega_event,
    kappa,
    perturbed_parameter,
    squared_intensity_integral,
    subset_counts_and_compensators,
)
from hawkes_st.model import DomainError, EventSequence, GridField, ParameterF, TriggeringSupport
from hawkes_st.simulate import SimConfig, simulate

SUP = TriggeringSupport(0.1, 0.1)


def hawkes(mu, br, d=1, cells=8, support=SUP):
    return ParameterF.constant(mu, br / (support.a * (2 * support.b) ** d), support, d, cells)


# ---------------------------------------------------------------- kappa

def test_kappa_examples():
    assert kappa(KappaInputs(1.0, 2.0, 0.5, 5.0)) == pytest.approx(152 * math.log(2))
    assert kappa(KappaInputs(1.0, 1.0, 0.0, 1.0)) == pytest.approx(40 * math.log(2))


@pytest.mark.parametrize("args", [(1.0, 2.0, 0.5, 0.0), (1.0, 2.0, 1.0, 5.0), (2.0, 1.0, 0.5, 5.0), (0.0, 1.0, 0.1, 1.0)])
def test_kappa_rejects_invalid_inputs(args):
    with pytest.raises(DomainError):
        KappaInputs(*args)


def test_kappa_monotonicity():
    sweep = [1.0, 2.0, 4.0]
    by_lambda = [kappa(KappaInputs(1.0, 4.0, 0.3, x)) for x in sweep]
    by_upper = [kappa(KappaInputs(1.0, x, 0.3, 1.0)) for x in sweep]
    by_lower = [kappa(KappaInputs(x, 4.0, 0.3, 1.0)) for x in sweep]
    assert by_lambda[0] < by_lambda[1] < by_lambda[2]
    assert by_upper[0] < by_upper[1] < by_upper[2]
    assert by_lower[0] > by_lower[1] > by_lower[2]


def test_squared_intensity_of_poisson_is_rate_squared():
    f = hawkes(2.0, 0.0)
    assert squared_intensity_integral(f, EventSequence([0.4], [[0.3]])) == pytest.approx(4.0)


# ---------------------------------------------------------------- reports

def test_verdict_recomputable_from_saved_numbers(tmp_path):
    rep = CheckReport("demo", {"a": 1}, replicates=10)
    rep.add({"x": 1}, 0.2, 0.1, 0.05, "le")
    rep.add({"x": 2}, 0.2, 0.1, 0.01, "le")
    assert rep.verdict == "FAIL"
    rep.save(tmp_path / "r.json", tmp_path / "r.csv")
    stored = json.loads((tmp_path / "r.json").read_text())
    assert [CheckReport.row_passes(r) for r in stored["rows"]] == [True, False]
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["pass"] for r in rows] == ["True", "False"]
    assert CheckReport("empty", {}).verdict == "FAIL"


# ---------------------------------------------------------------- high-probability event

def test_omega_event_poisson_frequency_grows_with_n():
    rep = check_omega_event(hawkes(2.0, 0.0), [50, 200, 800], alpha=1.0, replicates=100, seed=3)
    freq = [r["mean_band_frequency"] for r in rep.rows]
    se = [r["mean_band_se"] for r in rep.rows]
    for k in range(2):
        assert freq[k + 1] >= freq[k] - max(se[k], se[k + 1], 1 / 100)
    assert rep.verdict == "PASS"


def test_omega_event_records_slack_and_rejects_zero_replicates():
    rep = check_omega_event(hawkes(2.0, 0.3), [100], alpha=1.0, replicates=30, seed=1, pilot_replicates=30)
    assert rep.rows[0]["slack"] == pytest.approx(0.97)
    with pytest.raises(DomainError):
        check_omega_event(hawkes(2.0, 0.3), [100], alpha=1.0, replicates=0, seed=1)


# ---------------------------------------------------------------- Bernstein

def test_bernstein_threshold_arithmetic():
    assert bernstein_threshold(10, 2) == pytest.approx(math.sqrt(40) + 2 / 3)
    assert bernstein_threshold(10, 2) == pytest.approx(6.99122, abs=1e-5)
    assert math.exp(-2) == pytest.approx(0.13534, abs=1e-5)


def test_bernstein_x_zero_is_trivial():
    rep = check_bernstein(hawkes(2.0, 0.0), "full", 2.0, [0.0], replicates=200, seed=0)
    upper = [r for r in rep.rows if r["setting"]["form"] == "upper"]
    assert upper[0]["bound"] == 1.0 and upper[0]["pass"]


def test_bernstein_poisson_full_window():
    rep = check_bernstein(hawkes(2.0, 0.0), "full", 2.0, [0.5, 1, 2, 4], replicates=20000, seed=5)
    assert rep.verdict == "PASS"
    upper = [r["estimate"] for r in rep.rows if r["setting"]["form"] == "upper"]
    assert all(b <= a for a, b in zip(upper, upper[1:]))


def test_bernstein_hawkes_stopped_window():
    rep = check_bernstein(hawkes(2.0, 0.5), "stopped", 3.0, [0.5, 1, 2, 4], replicates=20000, seed=6)
    assert rep.verdict == "PASS"
    assert rep.settings["max_compensator_sum"] <= 3.0


def test_bernstein_rejects_a_budget_below_the_compensator():
    with pytest.raises(ConfigurationError, match="2"):
        check_bernstein(hawkes(2.0, 0.0), "full", 1.0, [1.0], replicates=10, seed=0)
    # only the measured triggered mass exceeds the budget here
    with pytest.raises(ConfigurationError, match="measured"):
        check_bernstein(hawkes(2.0, 0.5), "full", 2.05, [1.0], replicates=200, seed=0)


def test_subset_compensators_for_boxes_match_brute_force():
    f = hawkes(2.0, 0.5)
    data = simulate(SimConfig(f, 30, seed=2))
    lo, hi = np.array([0.2, 0.1]), np.array([0.7, 0.6])
    N, Lam = subset_counts_and_compensators(f, data, (lo, hi))
    for i, seq in enumerate(data):
        inside = np.all((seq.coords >= lo) & (seq.coords <= hi), axis=1)
        assert N[i] == inside.sum()
        g_height = float(f.g.values.flat[0])
        # constant trigger: each event's box overlap times the height
        t0 = np.clip(seq.times, lo[0], hi[0])
        t1 = np.clip(seq.times + 0.1, lo[0], hi[0])
        s0 = np.clip(seq.locations[:, 0] - 0.1, lo[1], hi[1])
        s1 = np.clip(seq.locations[:, 0] + 0.1, lo[1], hi[1])
        expect = 2.0 * 0.25 + g_height * np.sum((t1 - t0) * (s1 - s0))
        assert Lam[i] == pytest.approx(expect, rel=1e-10)


# ---------------------------------------------------------------- KL

def test_kl_of_identical_parameters_is_zero():
    f0 = hawkes(1.5, 0.3)
    rep = check_kl_bound(f0, 0.05, n=5, replicates=20, seed=0, f=f0, lambda02_sequences=50)
    assert rep.rows[0]["estimate"] == 0.0


def test_kl_poisson_closed_form():
    f0 = hawkes(1.0, 0.0)
    f = hawkes(1.1, 0.0)
    rep = check_kl_bound(f0, 0.1, n=1, replicates=20000, seed=2, f=f, lambda02_sequences=50)
    row = rep.rows[0]
    assert abs(row["estimate"] - (0.1 - math.log(1.1))) <= 3 * row["se"]


def test_kl_hawkes_under_budgeted_bound():
    sup = TriggeringSupport(0.2, 0.2)
    f0 = hawkes(1.0, 0.3, support=sup)
    rep = check_kl_bound(f0, 0.05, n=50, replicates=100, seed=4, lambda02_sequences=200)
    assert rep.verdict == "PASS"
    assert rep.rows[1]["estimate"] >= -3 * rep.rows[1]["se"]
    assert rep.settings["sup_distance"] == pytest.approx(0.05)


def test_kl_perturbation_too_large():
    f0 = hawkes(1.0, 0.9, support=TriggeringSupport(0.2, 0.2))
    with pytest.raises(ConfigurationError):
        perturbed_parameter(f0, 4.0)
    far = hawkes(1.5, 0.3)
    with pytest.raises(ConfigurationError):
        check_kl_bound(hawkes(1.0, 0.3), 0.05, n=1, replicates=1, seed=0, f=far)


# ---------------------------------------------------------------- identifiability

def test_identifiability_identical_is_exactly_zero():
    f = hawkes(2.0, 0.4)
    rep = check_identifiability(f, f, 50, seed=0)
    assert rep.rows[0]["estimate"] == 0.0 and rep.verdict == "PASS"


def test_identifiability_separates_background_and_trigger():
    f = hawkes(2.0, 0.4)
    mu_alt = ParameterF(GridField(f.mu.grid, 1.5 * f.mu.values, f.mu.domain), f.g, f.support)
    g_vals = f.g.values.copy()
    g_vals.reshape(-1)[: g_vals.size // 2] *= 0.2
    g_alt = ParameterF(f.mu, GridField(f.g.grid, g_vals, f.g.domain), f.support)
    for alt in (mu_alt, g_alt):
        rep = check_identifiability(f, alt, 500, seed=1)
        assert rep.verdict == "PASS", rep.rows
