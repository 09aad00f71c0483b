import json
import math

import numpy as np
import pytest

from gmtriesz.measure import Ball, DiscreteMeasure, mass_in_ball, \
    support_diameter
from gmtriesz.coeffs import beta2
import gmtriesz.harness as hz


@pytest.fixture(scope="module")
def cloud():
    rng = np.random.default_rng(11)
    pos = rng.uniform(0.0, 1.0, size=(90, 2))
    w = rng.uniform(0.5, 1.5, 90)
    w /= w.sum()
    return DiscreteMeasure(pos, w, 1)


def test_rhs_integral_oracle(cloud):
    got = hz.rhs_integral(cloud, max_centers=10_000)
    r0 = cloud.min_gap()
    diam = support_diameter(cloud.positions)
    want = 0.0
    for i in range(len(cloud)):
        x = cloud.positions[i]
        r = r0
        while r <= diam:
            b = Ball(x, r)
            th = mass_in_ball(cloud, b) / r ** cloud.dim_growth
            want += cloud.weights[i] * beta2(cloud, b) ** 2 * th \
                * math.log(2.0)
            r *= 2.0
        assert r0 * 2.0 ** math.floor(math.log2(diam / r0)) < r
    assert got == pytest.approx(want, rel=1e-10)


def test_rhs_integral_subsample_reweights(cloud):
    got = hz.rhs_integral(cloud, max_centers=30)
    assert np.isfinite(got) and got > 0.0


def test_rhs_integral_degenerate():
    mu = DiscreteMeasure(np.zeros((1, 2)), np.ones(1), 1)
    with pytest.raises(ValueError):
        hz.rhs_integral(mu)


def test_verify_equivalence_segment():
    r = hz.verify_equivalence("segment", 3, gen_depth=7)
    assert r.kind == "segment"
    assert r.n_atoms == 128
    assert r.mass == pytest.approx(1.0, rel=1e-12)
    # flat support: cube side reduces to the mass term
    assert r.rhs_cubes == pytest.approx(1.0, abs=1e-8)
    assert r.rhs_integral == pytest.approx(1.0, abs=1e-8)
    assert r.lhs > 1.0 and r.lhs_haar > 1.0
    assert all(r.checks.values()), r.checks
    assert r.ratios["lhs_over_rhs_cubes"] == pytest.approx(
        r.lhs / r.rhs_cubes, rel=1e-15)
    assert set(r.timings) >= {"measure", "lattice", "coeffs", "fields",
                              "integral", "total"}


def test_verify_unknown_kind():
    with pytest.raises(ValueError):
        hz.verify_equivalence("helix", 3)


def test_reports_reproducible_bitwise():
    a = hz.verify_equivalence("cantor4corner", 2, gen_depth=3)
    b = hz.verify_equivalence("cantor4corner", 2, gen_depth=3)
    da, db = a.to_dict(), b.to_dict()
    da.pop("timings")
    db.pop("timings")
    assert da == db


def test_tree_backend_within_accuracy():
    acc = 1e-3
    d = hz.verify_equivalence("cantor4corner", 3, gen_depth=4,
                              backend="direct", accuracy=acc)
    t = hz.verify_equivalence("cantor4corner", 3, gen_depth=4,
                              backend="tree", accuracy=acc)
    assert abs(t.lhs - d.lhs) <= acc * d.lhs
    assert abs(t.lhs_haar - d.lhs_haar) <= acc * d.lhs_haar
    assert t.rhs_cubes == d.rhs_cubes
    assert t.rhs_integral == d.rhs_integral
    assert t.checks == d.checks


def test_report_round_trip(tmp_path):
    r = hz.verify_equivalence("segment", 3, gen_depth=6)
    p = tmp_path / "rep.json"
    hz.save_report(r, p)
    back = hz.load_report(p)
    assert back == r
    doc = json.loads(p.read_text())
    assert doc["schema"] == hz.REPORT_SCHEMA

    csvp = tmp_path / "rep.csv"
    hz.reports_to_csv([r], csvp)
    lines = csvp.read_text().strip().splitlines()
    assert lines[0].split(",") == hz.CSV_COLUMNS
    row = lines[1].split(",")
    assert row[0] == r.name
    assert float(row[6]) == r.lhs


def test_suite_default_passes(tmp_path):
    status, bundle = hz.run_suite()
    assert status == 0
    assert bundle["all_pass"] is True
    assert bundle["schema"] == hz.SUITE_SCHEMA
    names = [e["name"] for e in bundle["experiments"]]
    assert names == sorted(names)
    assert bundle["failures"] == []


def test_suite_empty_config():
    status, bundle = hz.run_suite(config={"experiments": []})
    assert status == 0
    assert bundle["experiments"] == []
    assert bundle["all_pass"] is True


def test_suite_malformed_configs(tmp_path):
    with pytest.raises(ValueError):
        hz.run_suite(config={"experiments": "nope"})
    with pytest.raises(ValueError):
        hz.run_suite(config={"experiments": [{"kind": "segment"}]})
    with pytest.raises(ValueError):
        hz.run_suite(config=[1, 2])
    bad = tmp_path / "cfg.json"
    bad.write_text("{not json")
    with pytest.raises(ValueError):
        hz.run_suite(bad)


def test_suite_strict_constants_failure_listed():
    cfg = {"experiments": [
        {"name": "strict-desk", "kind": "segment", "depth": 3,
         "gen_depth": 6, "strict_paper_constants": True},
        {"name": "ok", "kind": "segment", "depth": 3, "gen_depth": 6},
    ]}
    status, bundle = hz.run_suite(config=cfg)
    assert status == 1
    assert [f["name"] for f in bundle["failures"]] == ["strict-desk"]
    assert "A0" in bundle["failures"][0]["error"]
    assert [e["name"] for e in bundle["experiments"]] == ["ok"]
    assert bundle["all_pass"] is False
