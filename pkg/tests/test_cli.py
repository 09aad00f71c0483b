import csv
import json

import numpy as np
import pytest

from gmtriesz.cli import main, parse_params_file, COEFF_COLUMNS
from gmtriesz.measure import load_measure
from gmtriesz.riesz import load_field
import gmtriesz.harness as hz


def test_parse_params_file(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("# lattice knobs\nA0 = 8\nC0=2.5\nn=2\n"
                 "strict_paper_constants = false\nK = 12.5  # cap\n")
    got = parse_params_file(p)
    assert got == {"A0": 8, "C0": 2.5, "n": 2,
                   "strict_paper_constants": False, "K": 12.5}
    bad = tmp_path / "bad.txt"
    bad.write_text("A0 8\n")
    with pytest.raises(ValueError):
        parse_params_file(bad)


def test_generate_and_lattice(tmp_path):
    m = tmp_path / "m.json"
    assert main(["generate", "--kind", "segment", "--depth", "6",
                 "--output", str(m)]) == 0
    mu = load_measure(m)
    assert len(mu) == 64

    out = tmp_path / "lat.json"
    assert main(["lattice", "--input", str(m), "--depth", "3",
                 "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == "gmtriesz.lattice/1"
    assert doc["depth"] == 3
    assert doc["generations"][0]["cells"] == 1
    assert sum(g["cells"] for g in doc["generations"]) > 1


def test_lattice_params_file(tmp_path):
    m = tmp_path / "m.json"
    main(["generate", "--kind", "segment", "--depth", "6",
          "--output", str(m)])
    pf = tmp_path / "p.txt"
    pf.write_text("A0 = 4\n")
    out = tmp_path / "lat.json"
    assert main(["lattice", "--input", str(m), "--depth", "3",
                 "--params", str(pf), "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["params"]["A0"] == 4.0


def test_coeffs_csv(tmp_path):
    m = tmp_path / "m.json"
    main(["generate", "--kind", "segment", "--depth", "6",
          "--output", str(m)])
    out = tmp_path / "c.csv"
    assert main(["coeffs", "--input", str(m), "--depth", "3",
                 "--output", str(out)]) == 0
    with open(out) as f:
        rows = list(csv.reader(f))
    assert rows[0] == COEFF_COLUMNS
    root = rows[1]
    assert root[0] == "0" and root[1] == "0"
    assert float(root[3]) == pytest.approx(1.0)


def test_riesz_field(tmp_path):
    m = tmp_path / "m.json"
    main(["generate", "--kind", "segment", "--depth", "5",
          "--output", str(m)])
    out = tmp_path / "f.json"
    assert main(["riesz", "--input", str(m), "--output", str(out)]) == 0
    fld = load_field(out)
    assert len(fld) == 32


def test_corona_report(tmp_path):
    m = tmp_path / "m.json"
    main(["generate", "--kind", "segment", "--depth", "6",
          "--output", str(m)])
    out = tmp_path / "forest.json"
    assert main(["corona", "--input", str(m), "--depth", "3",
                 "--spread", "--output", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == "gmtriesz.forest/1"
    assert doc["roots"][0]["id"] == [0, 0]


def test_verify_cmd(tmp_path):
    out = tmp_path / "rep.json"
    csvp = tmp_path / "rep.csv"
    assert main(["verify", "--kind", "segment", "--depth", "3",
                 "--gen-depth", "6", "--output", str(out),
                 "--csv", str(csvp)]) == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == hz.REPORT_SCHEMA
    assert all(doc["checks"].values())
    assert csvp.read_text().splitlines()[0].split(",") == hz.CSV_COLUMNS


def test_suite_cmd_default_and_config(tmp_path):
    out = tmp_path / "bundle.json"
    csvp = tmp_path / "bundle.csv"
    assert main(["suite", "--output", str(out), "--csv", str(csvp)]) == 0
    doc = json.loads(out.read_text())
    assert doc["all_pass"] is True
    assert len(csvp.read_text().splitlines()) == 1 + len(doc["experiments"])

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"experiments": [
        {"name": "bad", "kind": "segment", "depth": 3, "gen_depth": 6,
         "strict_paper_constants": True}]}))
    out2 = tmp_path / "b2.json"
    assert main(["suite", "--input", str(cfg),
                 "--output", str(out2)]) == 1
    doc2 = json.loads(out2.read_text())
    assert doc2["failures"][0]["name"] == "bad"


def test_cli_error_paths(tmp_path):
    # unreadable measure input surfaces as exit code 2
    assert main(["lattice", "--input", str(tmp_path / "missing.json"),
                 "--depth", "2", "--output",
                 str(tmp_path / "x.json")]) == 2
