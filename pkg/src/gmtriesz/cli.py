"""Command-line front end.

Subcommands mirror the pipeline stages: generate a canonical measure,
build a lattice over it, tabulate cube coefficients, evaluate the
transform, run the corona decomposition, verify the two-sided energy
comparison at one depth, or run a whole configured suite.  Measures
travel as CSV or JSON; reports are schema-versioned JSON with optional
CSV summaries.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .measure import GENERATOR_KINDS, generate, load_measure, save_measure
from .lattice import Params, build_lattice
from .coeffs import compute_coeffs, beta_wolff_sum
from .riesz import pv_riesz_at_atoms, save_field
from .corona import build_top, save_forest_report
from .harness import (verify_equivalence, run_suite, save_report,
                      save_bundle, reports_to_csv, _kind_params)

LATTICE_SCHEMA = "gmtriesz.lattice/1"

COEFF_COLUMNS = ["gen", "idx", "ell", "mass", "theta2B", "BigTheta",
                 "BigThetaExp", "P", "beta2_2B", "is_pdoubling", "is_HE"]


def parse_params_file(path) -> dict:
    """key=value lines; '#' comments; values become bool/int/float."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad params line: {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if v.lower() in ("true", "false"):
            out[k] = v.lower() == "true"
            continue
        try:
            out[k] = int(v)
        except ValueError:
            out[k] = float(v)
    return out


def _params_from_args(args, kind: str | None = None) -> Params:
    over = {}
    if getattr(args, "params", None):
        over.update(parse_params_file(args.params))
    if getattr(args, "strict_paper_constants", False):
        over["strict_paper_constants"] = True
    if kind is not None:
        return _kind_params(kind, over)
    kw = {"C0": 2.0, "A0": 16.0, "n": 1}
    kw.update(over)
    return Params(**kw)


def _load_input_measure(args):
    return load_measure(args.input, dim_growth=getattr(args, "dim_growth",
                                                       None))


def _cmd_generate(args) -> int:
    mu = generate(args.kind, args.depth)
    save_measure(mu, args.output)
    print(f"{args.kind} depth {args.depth}: {len(mu)} atoms, "
          f"mass {mu.weights.sum():.6g} -> {args.output}")
    return 0


def _cmd_lattice(args) -> int:
    mu = _load_input_measure(args)
    params = _params_from_args(args)
    lat = build_lattice(mu, params, max_depth=args.depth)
    gens = []
    for g in range(lat.depth + 1):
        cells = lat.generations[g]
        gens.append({"gen": g, "cells": len(cells),
                     "ell": cells[0].ell,
                     "min_mass": min(c.mass for c in cells),
                     "max_mass": max(c.mass for c in cells)})
    doc = {"schema": LATTICE_SCHEMA, "depth": lat.depth,
           "n_atoms": len(mu), "mass": float(mu.weights.sum()),
           "params": {"C0": params.C0, "A0": params.A0, "n": params.n},
           "generations": gens}
    with open(args.output, "w") as f:
        json.dump(doc, f, indent=1)
    print(f"lattice depth {lat.depth}, "
          f"{sum(g['cells'] for g in gens)} cubes -> {args.output}")
    return 0


def _cmd_coeffs(args) -> int:
    import csv
    mu = _load_input_measure(args)
    params = _params_from_args(args)
    lat = build_lattice(mu, params, max_depth=args.depth)
    table = compute_coeffs(lat)
    with open(args.output, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(COEFF_COLUMNS)
        for g in range(lat.depth + 1):
            for c in lat.generations[g]:
                i = c.idx
                wr.writerow([g, i, repr(c.ell), repr(c.mass),
                             repr(float(table.theta2B[g][i])),
                             repr(float(table.BigTheta[g][i])),
                             int(table.BigThetaExp[g][i]),
                             repr(float(table.P[g][i])),
                             repr(float(table.beta2_2B[g][i])),
                             int(table.is_pdoubling[g][i]),
                             int(table.is_HE[g][i])])
    print(f"beta-wolff sum {beta_wolff_sum(lat, table):.6g} "
          f"-> {args.output}")
    return 0


def _cmd_riesz(args) -> int:
    mu = _load_input_measure(args)
    fld = pv_riesz_at_atoms(mu, backend=args.backend,
                            accuracy=args.accuracy)
    save_field(fld, args.output)
    print(f"pv transform at {len(mu)} atoms, "
          f"L2(mu)^2 = {fld.norm_sq(mu):.6g} -> {args.output}")
    return 0


def _cmd_corona(args) -> int:
    mu = _load_input_measure(args)
    params = _params_from_args(args)
    lat = build_lattice(mu, params, max_depth=args.depth)
    forest = build_top(lat, compute_coeffs(lat))
    save_forest_report(forest, args.output, spread=args.spread)
    print(f"{len(forest.roots)} corona roots -> {args.output}")
    return 0


def _cmd_verify(args) -> int:
    params = None
    if args.params or args.strict_paper_constants:
        params = _params_from_args(args, kind=args.kind)
    rep = verify_equivalence(args.kind, args.depth, params,
                             gen_depth=args.gen_depth,
                             backend=args.backend, accuracy=args.accuracy,
                             seed=args.seed)
    save_report(rep, args.output)
    if args.csv:
        reports_to_csv([rep], args.csv)
    ok = rep.checks_pass
    print(f"{rep.name}: lhs {rep.lhs:.6g} lhs_haar {rep.lhs_haar:.6g} "
          f"rhs_cubes {rep.rhs_cubes:.6g} rhs_integral "
          f"{rep.rhs_integral:.6g} checks "
          f"{'pass' if ok else 'FAIL'} -> {args.output}")
    return 0 if ok else 1


def _cmd_suite(args) -> int:
    status, bundle = run_suite(args.input)
    save_bundle(bundle, args.output, csv_path=args.csv)
    n = len(bundle["experiments"])
    print(f"suite: {n} experiments, {len(bundle['failures'])} failures, "
          f"all_pass={bundle['all_pass']} -> {args.output}")
    for fail in bundle["failures"]:
        print(f"  FAIL {fail['name']}: {fail['error']}")
    return status


def _add_common(p, *, measure_input=False, lattice=False):
    if measure_input:
        p.add_argument("--input", required=True,
                       help="measure file (CSV or JSON)")
        p.add_argument("--dim-growth", type=int, default=None,
                       dest="dim_growth",
                       help="growth exponent n (required for CSV input)")
    if lattice:
        p.add_argument("--depth", type=int, default=4,
                       help="maximum lattice generation")
        p.add_argument("--params", default=None,
                       help="key=value text file overriding parameters")
        p.add_argument("--strict-paper-constants", action="store_true",
                       dest="strict_paper_constants")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gmt-riesz",
        description="Geometric measure toolkit: lattices, beta numbers, "
                    "Riesz transforms, corona decompositions.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="emit a canonical test measure")
    p.add_argument("--kind", required=True, choices=GENERATOR_KINDS)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("lattice", help="build a cube lattice summary")
    _add_common(p, measure_input=True, lattice=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_lattice)

    p = sub.add_parser("coeffs", help="per-cube coefficient table (CSV)")
    _add_common(p, measure_input=True, lattice=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_coeffs)

    p = sub.add_parser("riesz", help="principal-value transform at atoms")
    _add_common(p, measure_input=True)
    p.add_argument("--backend", default="direct",
                   choices=("direct", "tree"))
    p.add_argument("--accuracy", type=float, default=1e-3)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_riesz)

    p = sub.add_parser("corona", help="corona decomposition report")
    _add_common(p, measure_input=True, lattice=True)
    p.add_argument("--spread", action="store_true",
                   help="annotate roots with spreading-tree stop causes")
    p.add_argument("--output", required=True)
    p.set_defaults(fn=_cmd_corona)

    p = sub.add_parser("verify", help="two-sided energy comparison")
    p.add_argument("--kind", required=True, choices=GENERATOR_KINDS)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--gen-depth", type=int, default=None, dest="gen_depth")
    p.add_argument("--params", default=None)
    p.add_argument("--strict-paper-constants", action="store_true",
                   dest="strict_paper_constants")
    p.add_argument("--backend", default="direct",
                   choices=("direct", "tree"))
    p.add_argument("--accuracy", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("suite", help="run a configured experiment suite")
    p.add_argument("--input", default=None,
                   help="suite config JSON (default: built-in quick suite)")
    p.add_argument("--output", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(fn=_cmd_suite)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
