import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from consensus_fuse.cli import main
from consensus_fuse.core import load_dataset, load_mask

FAST = ["--trees", "3", "--depth", "8"]
SYNTH = ["--n", "4", "--size", "64", "--disp-min", "3", "--disp-max", "6", "--sigma", "0.05"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "bench"
    assert run("synth", *SYNTH, "--missing", "0.5", "--seed", "5", "--out", out) == 0
    return out


def test_synth_writes_manifest_and_withheld(bench, capsys):
    ann = load_dataset(bench / "manifest.json")
    assert len(ann.slices) == 4
    assert int(ann.missing_flags().sum()) == len(list(bench.glob("case_*/withheld_*.pgm")))
    snap = json.loads((bench / "config.json").read_text())
    assert snap["command"] == "synth" and snap["seed"] == 5 and "threads" not in snap


def test_synth_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run("synth", *SYNTH, "--seed", "3", "--out", tmp_path / d) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.pgm"))
    assert files and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)


def test_env_seed_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("CONSENSUS_FUSE_SEED", "11")
    assert run("synth", *SYNTH, "--n", "1", "--out", tmp_path / "e") == 0
    assert json.loads((tmp_path / "e" / "config.json").read_text())["seed"] == 11
    assert run("synth", *SYNTH, "--n", "1", "--seed", "2", "--out", tmp_path / "f") == 0
    assert json.loads((tmp_path / "f" / "config.json").read_text())["seed"] == 2


def test_mv_on_unanimous_masks(tmp_path):
    assert run("synth", *SYNTH, "--disp-min", "0", "--disp-max", "0", "--out", tmp_path / "u") == 0
    assert run("fuse", "--manifest", tmp_path / "u" / "manifest.json", "--method", "mv",
               "--out", tmp_path / "mv") == 0
    ann = load_dataset(tmp_path / "u" / "manifest.json")
    for s in ann.slices:
        np.testing.assert_array_equal(load_mask(tmp_path / "mv" / "consensus" / f"{s.name}.pgm"), s.masks[0])
    assert json.loads((tmp_path / "mv" / "report.json").read_text())["method"] == "mv"


def test_fuse_snapshot_and_reports(bench, tmp_path):
    out = tmp_path / "g"
    assert run("fuse", "--manifest", bench / "manifest.json", "--lambda", "0.1", *FAST, "--out", out) == 0
    snap = json.loads((out / "config.json").read_text())
    assert snap["lam"] == 0.1 and snap["trees"] == 3 and snap["depth"] == 8 and snap["method"] == "gcme"
    rep = json.loads((out / "report.json").read_text())
    assert rep["lambda"] == 0.1 and len(rep["energy_per_slice"]) == 4 and len(rep["sc"]) == 3
    sc = json.loads((out / "sc.json").read_text())
    assert [e["id"] for e in sc["experts"]] == ["expert_1", "expert_2", "expert_3"]
    # the snapshot alone reproduces the run
    again = tmp_path / "g2"
    assert run("fuse", "--config", out / "config.json", "--out", again) == 0
    for f in ["report.json", "sc.json", *(f"consensus/{p.name}" for p in (out / "consensus").iterdir())]:
        assert (out / f).read_bytes() == (again / f).read_bytes()


def test_gcme_all_equals_gcme_without_missing(tmp_path):
    assert run("synth", *SYNTH, "--seed", "8", "--out", tmp_path / "full") == 0
    m = tmp_path / "full" / "manifest.json"
    for method in ("gcme", "gcme-all"):
        assert run("fuse", "--manifest", m, "--method", method, *FAST, "--out", tmp_path / method) == 0
    for p in (tmp_path / "gcme" / "consensus").iterdir():
        assert p.read_bytes() == (tmp_path / "gcme-all" / "consensus" / p.name).read_bytes()


def test_eval_against_itself_and_validate(bench, tmp_path):
    m = bench / "manifest.json"
    assert run("fuse", "--manifest", m, "--method", "mv", "--out", tmp_path / "mv") == 0
    assert run("fuse", "--manifest", m, "--method", "gcme-wssl", *FAST, "--out", tmp_path / "w") == 0
    assert run("eval", "--manifest", m, "--consensus", tmp_path / "mv", tmp_path / "w",
               "--gt", tmp_path / "mv", "--out", tmp_path / "ev") == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "metrics.csv")))
    assert list(rows[0]) == ["case_id", "method", "dice", "hd", "f", "s", "b"]
    assert all(float(r["dice"]) == 1.0 for r in rows if r["method"] == "mv")
    summary = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert set(summary["methods"]) == {"mv", "gcme-wssl"}
    assert {p["metric"] for p in summary["pairwise"]} == {"dice", "hd"}

    assert run("validate", "--manifest", m, "--consensus", tmp_path / "mv", "--folds", "2", *FAST,
               "--out", tmp_path / "va") == 0
    folds = list(csv.DictReader(open(tmp_path / "va" / "folds.csv")))
    assert len(folds) == 4 and {r["fold"] for r in folds} == {"0", "1"}


def test_sc_and_impute(bench, tmp_path):
    m = bench / "manifest.json"
    assert run("sc", "--manifest", m, *FAST, "--out", tmp_path / "sc") == 0
    sc = json.loads((tmp_path / "sc" / "sc.json").read_text())
    assert all(0 <= e["sc"] <= 1 for e in sc["experts"]) and sc["n_trees"] == 3
    assert run("impute", "--manifest", m, *FAST, "--out", tmp_path / "im") == 0
    filled = load_dataset(tmp_path / "im" / "manifest.json")
    assert not filled.missing_flags().any()
    assert len(list((tmp_path / "im" / "imputed").rglob("*.pgm"))) == int(load_dataset(m).missing_flags().sum())


@pytest.mark.parametrize("argv,category", [
    (["fuse", "--manifest", "nope.json"], "missing-file"),
    (["fuse", "--manifest", "{stripped}", "--method", "gcme-all"], "missing-annotations"),
    (["fuse", "--manifest", "{bench}/manifest.json", "--lambda", "0"], "invalid-config"),
    (["synth", "--missing", "1.5"], "invalid-spec"),
])
def test_errors_exit_nonzero_with_category(bench, tmp_path, capsys, argv, category):
    # a copy of the manifest without withheld sidecars, so gcme-all has nothing to restore
    doc = json.loads((bench / "manifest.json").read_text())
    for entry in doc["slices"]:
        entry.pop("withheld", None)
    stripped = bench / "stripped.json"
    stripped.write_text(json.dumps(doc))
    argv = [a.format(bench=bench, stripped=stripped) for a in argv]
    assert run(*argv, "--out", tmp_path / "x") == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"error: {category}:")


def test_missing_out_and_bad_flag(capsys):
    assert run("synth") == 2
    assert "error: invalid-config:" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        run("fuse", "--bogus")
    assert exc.value.code == 2


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "consensus_fuse.cli", "synth", *SYNTH, "--n", "1",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0 and "wrote 1 cases" in r.stdout
