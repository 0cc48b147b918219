"""``hawkes-st simulate|fit|check|contraction --config PATH [--out DIR]``.

Exit codes: 0 success, 1 a check reported FAIL, 2 configuration or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checks import (
    check_bernstein,
    check_identifiability,
    check_kl_bound,
    check_omega_event,
)
from .config import ConfigError, ExperimentConfig, identifiability_alternative, load_config
from .inference import fit, posterior_l1_curve
from .likelihood import LikelihoodWorkspace
from .model import ParameterF, TriggeringSupport, read_events_csv, write_events_csv
from .simulate import SimConfig, simulate

log = logging.getLogger("hawkes_st")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

# fixed tags so truth, data and fitting never share a random stream
_TRUTH, _SIM, _FIT, _CHECK, _CONTRACTION = range(5)


def derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1, np.uint64)[0] >> 1)


def _require(section, name: str):
    if section is None:
        raise ConfigError(f"{name}: section required for this command")
    return section


def _write_manifest(out: Path, command: str, cfg: ExperimentConfig, threads: int, extra: dict | None = None) -> None:
    manifest = {
        "tool": "hawkes-st",
        "version": __version__,
        "command": command,
        "seed": cfg.seed,
        "threads": threads,
        "config": cfg.echo(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def _truth(cfg: ExperimentConfig) -> ParameterF:
    return _require(cfg.truth, "truth").build(derive_seed(cfg.seed, _TRUTH))


def run_simulate(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    sim = _require(cfg.sim, "sim")
    truth = _truth(cfg)
    data = simulate(SimConfig(truth, sim.n, seed=derive_seed(cfg.seed, _SIM), method=sim.method,
                              max_events_per_seq=sim.max_events_per_seq, workers=threads))
    write_events_csv(data, out / "events.csv")
    truth.save(out / "truth.json")
    _write_manifest(out, "simulate", cfg, threads, {"n_sequences": data.n, "n_events": int(data.counts.sum())})
    log.info("wrote %d events in %d sequences to %s", int(data.counts.sum()), data.n, out)
    return EXIT_OK


def _n_sequences_hint(events: Path) -> int | None:
    man = events.parent / "manifest.json"
    if not man.exists():
        return None
    try:
        return json.loads(man.read_text()).get("n_sequences")
    except (json.JSONDecodeError, OSError):
        return None


def run_fit(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    sec = _require(cfg.fit, "fit")
    events = Path(sec.events) if sec.events else out / "events.csv"
    if not events.exists():
        raise ConfigError(f"events file {events} not found")
    truth_path = Path(sec.truth) if sec.truth else out / "truth.json"
    truth = ParameterF.load(truth_path) if truth_path.exists() else None
    data = read_events_csv(events, sec.n_sequences or _n_sequences_hint(events))
    if sec.a is not None and sec.b is not None:
        support = TriggeringSupport(sec.a, sec.b)
    elif truth is not None:
        support = truth.support
    elif cfg.truth is not None and cfg.truth.file is None:
        support = TriggeringSupport(cfg.truth.a, cfg.truth.b)
    else:
        raise ConfigError("fit: give a and b, or provide a truth file for the triggering support")
    if data.d != (truth.d if truth is not None else data.d):
        raise ConfigError(f"events have d={data.d} but the truth has d={truth.d}")
    ws = LikelihoodWorkspace.build(data, support, sec.mu_cells, sec.g_cells)
    summary = fit(ws, sec.fit_config(derive_seed(cfg.seed, _FIT)))
    if truth is not None:
        summary.with_truth(truth, data)
    summary.save(out / "posterior.json", out / "trace.csv")
    _write_manifest(out, "fit", cfg, threads, {"events": str(events), "n_sequences": data.n})
    for w in summary.warnings:
        log.warning(w)
    return EXIT_OK


def run_check(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    sec = _require(cfg.checks, "checks")
    f0 = _truth(cfg)
    seed = derive_seed(cfg.seed, _CHECK)
    verdicts = {}
    for k, name in enumerate(sec.enabled):
        s = derive_seed(seed, k)
        if name == "omega_event":
            c = sec.omega_event
            rep = check_omega_event(f0, c.n_values, c.alpha, c.replicates, s, c.pilot_replicates, workers=threads)
        elif name == "bernstein":
            c = sec.bernstein
            rule = c.rule if isinstance(c.rule, str) else (c.rule.lo, c.rule.hi)
            rep = check_bernstein(f0, rule, c.v, c.x_grid, c.replicates, s, n=c.n, workers=threads)
        elif name == "kl_bound":
            c = sec.kl_bound
            rep = check_kl_bound(f0, c.eps, c.n, c.replicates, s, slack=c.slack,
                                 lambda02_sequences=c.lambda02_sequences, workers=threads)
        else:
            c = sec.identifiability
            rep = check_identifiability(f0, identifiability_alternative(f0, c), c.n, s, workers=threads)
        rep.save(out / f"{name}.json", out / f"{name}.csv")
        verdicts[name] = rep.verdict
        log.info("%s: %s", name, rep.verdict)
    _write_manifest(out, "check", cfg, threads, {"verdicts": verdicts})
    return EXIT_OK if all(v == "PASS" for v in verdicts.values()) else EXIT_FAIL


def run_contraction(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    sec = _require(cfg.contraction, "contraction")
    truth = _truth(cfg)
    tau = sec.tau if sec.tau is not None else cfg.truth.smoothness
    curve = posterior_l1_curve(truth, sec.ns, sec.fit.fit_config(derive_seed(cfg.seed, _FIT)),
                               derive_seed(cfg.seed, _CONTRACTION), sec.replicates, tau, workers=threads)
    with open(out / "contraction.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "median_l1", "q25", "q75"])
        for row in curve.rows:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
    slope = {
        "slope": curve.slope,
        "theoretical_exponent": curve.theoretical_slope,
        "tau": tau,
        "d": truth.d,
    }
    (out / "slope.json").write_text(json.dumps(slope, indent=1) + "\n")
    truth.save(out / "truth.json")
    _write_manifest(out, "contraction", cfg, threads)
    return EXIT_OK


COMMANDS = {
    "simulate": run_simulate,
    "fit": run_fit,
    "check": run_check,
    "contraction": run_contraction,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hawkes-st", description="Spatio-temporal Hawkes simulation, fitting and checks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run config (or a manifest.json to replay)")
    p.add_argument("--out", help="output directory (overrides the config's out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        threads = cfg.resolved_threads()
        out = Path(args.out or cfg.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, threads)
    except (OSError, ValueError) as exc:
        # config, event-file, domain and precondition errors are all ValueErrors
        print(f"hawkes-st: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
