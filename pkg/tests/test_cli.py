import csv
import json

import pytest

from cuepflow import cli
from cuepflow.io import fmt, sha256

from conftest import DATA


def run(args, capsys=None):
    rc = cli.main(args)
    out = capsys.readouterr() if capsys else None
    return rc, out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def check_manifest(root):
    man = json.loads((root / "manifest.json").read_text())
    listed = {o["path"] for o in man["outputs"]}
    on_disk = {str(p.relative_to(root)) for p in root.rglob("*") if p.is_file()} - {"manifest.json"}
    assert listed == on_disk
    for o in man["outputs"]:
        assert sha256(root / o["path"]) == o["sha256"]
        assert (root / o["path"]).stat().st_size == o["bytes"]
    return man


def test_full_precision_format():
    x = 0.1 + 0.2
    assert float(fmt(x)) == x and len(fmt(x).replace(".", "").lstrip("0")) == 17
    assert fmt(True) == "1" and fmt(None) == ""


def test_snapshot_success(tmp_path, capsys):
    out = tmp_path / "o"
    rc, cap = run(["snapshot", "--lambda", "0", "--grid-res", "12", "--out-dir", str(out),
                   "--dump-trajectories"], capsys)
    assert rc == cli.EXIT_OK
    for f in ("snapshot.csv", "equilibria.csv", "region.csv", "region.svg", "manifest.json"):
        assert (out / f).is_file()
    row, = read_csv(out / "snapshot.csv")
    assert row["closest"] == "UEP1" and row["ok"] == "1"
    eq = read_csv(out / "equilibria.csv")
    assert [r["point"] for r in eq] == ["SEP", "UEP1", "UEP2"]
    assert len(read_csv(out / "region.csv")) == 144
    assert any((out / "trajectories").glob("UEP1_*_converged.csv"))
    man = check_manifest(out)
    assert man["config"]["grid"]["resolution"] == 12
    assert man["config"]["integrator"]["horizon"] == 60.0
    assert "UEP1" in cap.out


def test_snapshot_beyond_nose_is_pipeline_failure(tmp_path):
    out = tmp_path / "o"
    rc, _ = run(["snapshot", "--scenario", str(DATA / "two_bus_scenario.json"), "--lambda", "5",
                 "--out-dir", str(out)])
    assert rc == cli.EXIT_PIPELINE
    row, = read_csv(out / "snapshot.csv")
    assert row["failed_stage"] == "power-flow" and row["ok"] == "0"
    man = check_manifest(out)
    assert man["failed_stage"] == "power-flow"


def test_malformed_config_writes_nothing(tmp_path, capsys):
    out = tmp_path / "o"
    rc, cap = run(["snapshot", "--scenario", str(DATA / "bad_key.json"), "--lambda", "0",
                   "--out-dir", str(out)], capsys)
    assert rc == cli.EXIT_CONFIG
    assert "lambda_stepp" in cap.err
    assert not out.exists()


@pytest.mark.parametrize("extra", [["--scenario", "no_such_scenario"], ["--grid-res", "0"],
                                   ["--epsilon", "-1"], ["--lambda", "-0.5"]])
def test_config_errors(tmp_path, extra):
    out = tmp_path / "o"
    args = ["snapshot", "--out-dir", str(out)] + extra
    if "--lambda" not in extra:
        args += ["--lambda", "0"]
    assert run(args)[0] == cli.EXIT_CONFIG
    assert not out.exists()


def test_unreadable_scenario(tmp_path):
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    assert run(["snapshot", "--scenario", str(bad), "--lambda", "0", "--out-dir", str(tmp_path / "o")])[0] \
        == cli.EXIT_CONFIG


def test_validate_pristine(capsys):
    rc, cap = run(["validate"], capsys)
    assert rc == cli.EXIT_OK, cap.out
    for name in ("coi", "jacobian", "order", "energy", "eps", "rerun"):
        assert f"[PASS] {name}" in cap.out


def test_validate_corrupted_inertia(capsys):
    rc, cap = run(["validate", "--scenario", str(DATA / "corrupt_scenario.json"), "--suite", "coi"], capsys)
    assert rc == cli.EXIT_VALIDATION
    assert "[FAIL] coi" in cap.out


def test_validate_single_suite(capsys):
    rc, cap = run(["validate", "--suite", "energy"], capsys)
    assert rc == cli.EXIT_OK
    heads = [l for l in cap.out.splitlines() if l.startswith("[")]
    assert len(heads) == 1 and heads[0].startswith("[PASS] energy")


def test_sweep_single_point(tmp_path, capsys):
    out = tmp_path / "o"
    rc, cap = run(["sweep", "--lambda-range", "0:0", "--grid-res", "8", "--out-dir", str(out)], capsys)
    assert rc == cli.EXIT_OK
    assert "events: none" in cap.out
    rows = read_csv(out / "snapshot_summary.csv")
    assert len(rows) == 1 and rows[0]["closest"] == "UEP1"
    assert (out / "regions" / "lambda_0_region.svg").is_file()
    check_manifest(out)


def test_sweep_base_case_failure(tmp_path):
    sc = json.loads((DATA / "two_bus_scenario.json").read_text())
    sc["network"] = str(DATA / "two_bus_overloaded.json")
    p = tmp_path / "sc.json"
    p.write_text(json.dumps(sc))
    out = tmp_path / "o"
    assert run(["sweep", "--scenario", str(p), "--out-dir", str(out)])[0] == cli.EXIT_PIPELINE
    check_manifest(out)


def test_bad_lambda_range(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["sweep", "--lambda-range", "a:b", "--out-dir", str(tmp_path / "o")])
    assert info.value.code == cli.EXIT_CONFIG


def _events(root):
    return [(r["kind"], r["lambda_lo"], r["lambda_hi"]) for r in read_csv(root / "events.csv")]


def test_grid_resolution_does_not_change_events(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    common = ["sweep", "--lambda-range", "0:0.4:0.4", "--no-refine"]
    assert run(common + ["--grid-res", "20", "--out-dir", str(a)])[0] == cli.EXIT_OK
    assert run(common + ["--grid-res", "10", "--out-dir", str(b)])[0] == cli.EXIT_OK
    assert _events(a) == _events(b) == [("closest-uep-switch", "0", "0.40000000000000002")]
    assert len(read_csv(a / "regions" / "lambda_0_region.csv")) == 400
    assert len(read_csv(b / "regions" / "lambda_0_region.csv")) == 100


def test_full_sweep_summary(tmp_path, capsys):
    out = tmp_path / "o"
    rc, cap = run(["sweep", "--no-region", "--out-dir", str(out)], capsys)
    assert rc == cli.EXIT_OK
    text = (out / "summary.txt").read_text()
    assert text.count("closest-uep-switch:") == 1
    assert text.count("(terminal)") == 1
    assert "sweep terminated by structure-induced" in text
    pv = read_csv(out / "pv_pre.csv")
    assert float(pv[0]["lambda"]) == 0.0 and len(pv) >= 14
    check_manifest(out)
