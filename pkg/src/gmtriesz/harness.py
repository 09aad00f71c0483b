"""End-to-end experiments: one call builds measure, lattice, coefficient
tables and transform fields, then reports both sides of the two-sided
energy comparison together with per-run invariant checks and timings.

The cube side of the comparison sums beta^2 density energy over lattice
cubes; the integral side samples the same square function on an atoms
times dyadic-radii grid with ln 2 weights, radii running from the
minimum atom gap to the support diameter.  All sampling is
deterministic, so reports reproduce bit for bit for a fixed backend.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .measure import DiscreteMeasure, generate, support_diameter, \
    GENERATOR_KINDS
from .lattice import Params, build_lattice
from .coeffs import compute_coeffs, beta2_profile, beta_wolff_sum, \
    chain_decay_report
from .riesz import pv_riesz_at_atoms, haar_energy

REPORT_SCHEMA = "gmtriesz.report/1"
SUITE_SCHEMA = "gmtriesz.suite/1"

# measure resolution used when an experiment does not pin one
DEFAULT_GEN_DEPTH = {
    "segment": 12,
    "plane_patch": 5,
    "lipschitz_graph": 12,
    "cantor_line": 8,
    "cantor4corner": 6,
}

# lattice ratio aligned with the generator's self-similarity scale
DEFAULT_A0 = {"cantor4corner": 4.0}

CSV_COLUMNS = [
    "name", "kind", "lattice_depth", "gen_depth", "n_atoms", "mass",
    "lhs", "lhs_haar", "rhs_cubes", "rhs_integral",
    "ratio_lhs_rhs_cubes", "ratio_haar_rhs_cubes",
    "ratio_lhs_rhs_integral", "checks_pass", "time_total_s",
]


@dataclass
class ExperimentReport:
    name: str
    kind: str
    gen_depth: int
    lattice_depth: int
    n_atoms: int
    mass: float
    lhs: float
    lhs_haar: float
    rhs_cubes: float
    rhs_integral: float
    ratios: dict
    checks: dict
    timings: dict
    backend: str
    accuracy: float
    seed: int
    params: dict = field(default_factory=dict)
    schema: str = REPORT_SCHEMA

    @property
    def checks_pass(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        d = dict(d)
        d.pop("schema", None)
        return cls(**d)

    def csv_row(self) -> list:
        return [self.name, self.kind, self.lattice_depth, self.gen_depth,
                self.n_atoms, repr(self.mass), repr(self.lhs),
                repr(self.lhs_haar), repr(self.rhs_cubes),
                repr(self.rhs_integral),
                repr(self.ratios["lhs_over_rhs_cubes"]),
                repr(self.ratios["haar_over_rhs_cubes"]),
                repr(self.ratios["lhs_over_rhs_integral"]),
                int(self.checks_pass), f"{self.timings['total']:.3f}"]


def _kind_params(kind: str, overrides: dict | None) -> Params:
    kw = {"C0": 2.0, "A0": DEFAULT_A0.get(kind, 16.0),
          "n": 2 if kind == "plane_patch" else 1}
    kw.update(overrides or {})
    return Params(**kw)


def rhs_integral(mu: DiscreteMeasure, max_centers: int = 512) -> float:
    """Sampled double integral of beta^2 times density, dr/r measure.

    Centers are an even stride over the atoms, reweighted to the total
    mass; radii are dyadic (ratio 2) from the minimum atom gap to the
    support diameter; each radius carries weight ln 2.
    """
    m = len(mu)
    idx = np.unique(np.linspace(0, m - 1, min(max_centers, m)).astype(int))
    w = mu.weights[idx]
    w = w * (mu.weights.sum() / w.sum())
    r0 = mu.min_gap()
    diam = support_diameter(mu.positions)
    if not (r0 > 0) or not (diam > 0):
        raise ValueError("degenerate support")
    klast = max(int(math.floor(math.log2(diam / r0))), 0)
    radii = r0 * 2.0 ** np.arange(klast + 1)
    beta_sq, masses = beta2_profile(mu, mu.positions[idx], radii)
    theta = masses / radii[None, :] ** mu.dim_growth
    return float(math.log(2.0) * (w[:, None] * beta_sq * theta).sum())


def verify_equivalence(kind: str, depth: int, params: Params | None = None,
                       *, gen_depth: int | None = None,
                       backend: str = "direct", accuracy: float = 1e-3,
                       seed: int = 0, max_centers: int = 512,
                       gen_params: dict | None = None,
                       name: str | None = None) -> ExperimentReport:
    """Full pipeline at one lattice depth; returns both sides and checks."""
    if kind not in GENERATOR_KINDS:
        raise ValueError(f"unknown generator kind: {kind}")
    gen_depth = DEFAULT_GEN_DEPTH[kind] if gen_depth is None else gen_depth
    if params is None:
        params = _kind_params(kind, None)
    timings = {}
    t0 = time.perf_counter()

    t = time.perf_counter()
    mu = generate(kind, gen_depth, gen_params)
    timings["measure"] = time.perf_counter() - t

    t = time.perf_counter()
    lat = build_lattice(mu, params, max_depth=depth)
    timings["lattice"] = time.perf_counter() - t

    t = time.perf_counter()
    table = compute_coeffs(lat)
    timings["coeffs"] = time.perf_counter() - t

    t = time.perf_counter()
    fld = pv_riesz_at_atoms(mu, backend=backend, accuracy=accuracy)
    he = haar_energy(lat, fld.values)
    timings["fields"] = time.perf_counter() - t

    t = time.perf_counter()
    integral = rhs_integral(mu, max_centers=max_centers)
    timings["integral"] = time.perf_counter() - t

    mass = float(mu.weights.sum())
    lhs = fld.norm_sq(mu) + mass
    lhs_haar = he.haar_sum + mass
    rhs_cubes = beta_wolff_sum(lat, table) + mass
    rhs_int = integral + mass

    ratios = {
        "lhs_over_rhs_cubes": lhs / rhs_cubes,
        "haar_over_rhs_cubes": lhs_haar / rhs_cubes,
        "lhs_over_rhs_integral": lhs / rhs_int,
    }

    # antisymmetry relies on exact pairwise cancellation, so it is always
    # measured on a direct-backend field
    fd = fld if backend == "direct" else pv_riesz_at_atoms(mu)
    fvals = np.asarray(fd)
    pair_sum = float(np.linalg.norm((mu.weights[:, None] * fvals).sum(axis=0)))
    fmax = float(np.abs(fvals).max()) if len(fvals) else 0.0
    chain = chain_decay_report(lat, table)
    checks = {
        "antisymmetry": pair_sum <= 1e-10 * mass * max(fmax, 1e-300),
        "haar_identity": abs(he.haar_sum + he.below_depth
                             - he.centered_norm_sq)
        <= 1e-9 * max(he.centered_norm_sq, 1e-300),
        "chain_decay": len(chain["violations"]) == 0,
        "ratios_positive": all(np.isfinite(v) and v > 0
                               for v in ratios.values()),
    }
    timings["total"] = time.perf_counter() - t0

    return ExperimentReport(
        name=name or f"{kind}-g{gen_depth}-d{depth}",
        kind=kind, gen_depth=gen_depth, lattice_depth=depth,
        n_atoms=len(mu), mass=mass, lhs=lhs, lhs_haar=lhs_haar,
        rhs_cubes=rhs_cubes, rhs_integral=rhs_int, ratios=ratios,
        checks=checks, timings=timings, backend=backend,
        accuracy=accuracy, seed=seed,
        params={"C0": params.C0, "A0": params.A0, "n": params.n})


def save_report(report: ExperimentReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=1)


def load_report(path) -> ExperimentReport:
    with open(path) as f:
        return ExperimentReport.from_dict(json.load(f))


def reports_to_csv(reports, path) -> None:
    import csv
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(CSV_COLUMNS)
        for r in reports:
            wr.writerow(r.csv_row())


def default_suite() -> dict:
    return {
        "seed": 0,
        "backend": "direct",
        "accuracy": 1e-3,
        "experiments": [
            {"name": "segment-quick", "kind": "segment", "depth": 4,
             "gen_depth": 9},
            {"name": "cantor-quick", "kind": "cantor4corner", "depth": 3,
             "gen_depth": 4},
        ],
    }


def _parse_config(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise ValueError("malformed config: expected an object")
    exps = cfg.get("experiments", [])
    if not isinstance(exps, list):
        raise ValueError("malformed config: experiments must be a list")
    for e in exps:
        if not isinstance(e, dict) or "kind" not in e or "depth" not in e:
            raise ValueError(
                "malformed config: each experiment needs kind and depth")
    return cfg


def run_suite(config_path=None, config: dict | None = None,
              max_workers: int = 4) -> tuple[int, dict]:
    """Run every configured experiment in a worker pool.

    Returns (exit_status, bundle).  Any raised error or failed check in
    an experiment makes the status nonzero; errors are listed per
    experiment name, and reports merge in name order.
    """
    if config is None:
        if config_path is None:
            config = default_suite()
        else:
            with open(config_path) as f:
                try:
                    config = json.load(f)
                except json.JSONDecodeError as e:
                    raise ValueError(f"malformed config: {e}") from e
    config = _parse_config(config)
    seed = int(config.get("seed", 0))
    backend = config.get("backend", "direct")
    accuracy = float(config.get("accuracy", 1e-3))

    def _one(exp):
        p = None
        if exp.get("params") or exp.get("strict_paper_constants"):
            over = dict(exp.get("params") or {})
            if exp.get("strict_paper_constants"):
                over["strict_paper_constants"] = True
            p = _kind_params(exp["kind"], over)
        return verify_equivalence(
            exp["kind"], int(exp["depth"]), p,
            gen_depth=exp.get("gen_depth"),
            backend=exp.get("backend", backend),
            accuracy=float(exp.get("accuracy", accuracy)),
            seed=seed, gen_params=exp.get("gen_params"),
            name=exp.get("name"))

    exps = config["experiments"] if "experiments" in config else []
    results, failures = {}, {}
    if exps:
        with ThreadPoolExecutor(max_workers=min(max_workers,
                                                len(exps))) as pool:
            futs = {}
            for i, exp in enumerate(exps):
                nm = exp.get("name", f"{exp.get('kind', '?')}-{i}")
                futs[nm] = pool.submit(_one, exp)
            for nm in sorted(futs):
                try:
                    results[nm] = futs[nm].result()
                except Exception as e:
                    failures[nm] = f"{type(e).__name__}: {e}"
    all_pass = not failures and all(r.checks_pass for r in results.values())
    bundle = {
        "schema": SUITE_SCHEMA,
        "seed": seed,
        "backend": backend,
        "experiments": [results[nm].to_dict() for nm in sorted(results)],
        "failures": [{"name": nm, "error": failures[nm]}
                     for nm in sorted(failures)],
        "all_pass": bool(all_pass),
    }
    return (0 if all_pass else 1), bundle


def save_bundle(bundle: dict, path, csv_path=None) -> None:
    with open(path, "w") as f:
        json.dump(bundle, f, indent=1)
    if csv_path is not None:
        reports = [ExperimentReport.from_dict(d)
                   for d in bundle["experiments"]]
        reports_to_csv(reports, csv_path)
