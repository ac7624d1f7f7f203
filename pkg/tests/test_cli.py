import json
import shutil

import numpy as np
import pytest

from cpodkrig.archive import load_json
from cpodkrig.cli import main, verify_bundle
from cpodkrig.synthgen import reference_spec


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = reference_spec(seed=4, n_runs=6, n_steps=3)
    spec.save(root / "spec.json")
    assert main(["synth", "--spec", str(root / "spec.json"), "--holdout", "1", "--out", str(root / "ens")]) == 0
    assert main(["extract", "--manifest", str(root / "ens/manifest.json"), "--energy-target", "0.9999",
                 "--out", str(root / "basis")]) == 0
    assert main(["fit", "--basis", str(root / "basis"), "--starts", "2", "--threads", "1",
                 "--out", str(root / "model")]) == 0
    return root


def test_bundles_have_provenance(pipeline):
    prov = load_json(pipeline / "basis/provenance.json")
    assert prov["stage"] == "extract" and "coeffs.bin" in prov["files"] and prov["upstream"]
    assert "timestamp" not in json.dumps(prov)
    fit = load_json(pipeline / "model/fit.json")
    assert fit["basis"] == "../basis" and fit["n_steps"] == 3
    assert (pipeline / "model/t0002/precision.bin").is_file()


def test_empty_manifest_exit_2(tmp_path, capsys):
    (tmp_path / "m.json").write_text('{"runs": []}')
    assert main(["extract", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "b")]) == 2
    assert "runs" in capsys.readouterr().err


def test_bad_design_range_exit_2(pipeline, tmp_path, capsys):
    m = load_json(pipeline / "ens/manifest.json")
    m["design_ranges"]["L"] = [5.0, 5.0]
    m["runs"] = [str(pipeline / "ens" / r) for r in m["runs"]]
    (tmp_path / "m.json").write_text(json.dumps(m))
    assert main(["extract", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "b")]) == 2
    assert "design_ranges" in capsys.readouterr().err


def test_fit_on_one_run_exit_2(pipeline, tmp_path, capsys):
    m = load_json(pipeline / "ens/manifest.json")
    m["runs"] = [str(pipeline / "ens" / m["runs"][0])]
    (tmp_path / "m.json").write_text(json.dumps(m))
    assert main(["extract", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "b")]) == 0
    assert main(["fit", "--basis", str(tmp_path / "b"), "--out", str(tmp_path / "f")]) == 2
    assert "n >= 2 required" in capsys.readouterr().err


def test_energy_target_monotone(pipeline, tmp_path):
    ks = []
    for e in ("0.9", "0.99", "1.0"):
        assert main(["extract", "--manifest", str(pipeline / "ens/manifest.json"), "--energy-target", e,
                     "--out", str(tmp_path / e)]) == 0
        ks.append(sum(load_json(tmp_path / e / "basis.json")["K_r"].values()))
    assert ks == sorted(ks)


def test_extract_rerun_is_byte_identical(pipeline, tmp_path):
    assert main(["extract", "--manifest", str(pipeline / "ens/manifest.json"), "--energy-target", "0.9999",
                 "--out", str(tmp_path / "b")]) == 0
    for p in (pipeline / "basis").iterdir():
        assert (tmp_path / "b" / p.name).read_bytes() == p.read_bytes(), p.name


def test_stale_upstream_exit_4(pipeline, tmp_path, capsys):
    shutil.copytree(pipeline / "basis", tmp_path / "basis")
    with open(tmp_path / "basis/coeffs.bin", "ab") as fh:
        fh.write(b"\0")
    assert main(["fit", "--basis", str(tmp_path / "basis"), "--out", str(tmp_path / "f")]) == 4
    assert "checksum" in capsys.readouterr().err


def test_model_with_changed_basis_exit_4(pipeline, tmp_path):
    shutil.copytree(pipeline / "basis", tmp_path / "basis")
    shutil.copytree(pipeline / "model", tmp_path / "model")
    # rebuild the basis with a different target: still a valid bundle, but not the fitted one
    assert main(["extract", "--manifest", str(pipeline / "ens/manifest.json"), "--energy-target", "0.5",
                 "--out", str(tmp_path / "basis")]) == 0
    assert main(["couplings", "--model", str(tmp_path / "model"), "--out", str(tmp_path / "c")]) == 4


def test_predict_at_training_geometry(pipeline, tmp_path):
    assert main(["predict", "--model", str(pipeline / "model"), "--run", str(pipeline / "ens/run002"),
                 "--out", str(tmp_path / "p")]) == 0
    s = load_json(tmp_path / "p/summary.json")
    assert max(s["mre_full_grid_max"].values()) < 1e-6
    assert (tmp_path / "p/mean_u.bin").is_file() and (tmp_path / "p/mre.csv").is_file()


def test_predict_uq_tke_couplings(pipeline, tmp_path):
    holdout = str(pipeline / "ens/holdout000")
    (tmp_path / "probes.json").write_text("[[10.0, 1.0], [70.0, 2.0]]")
    assert main(["predict", "--model", str(pipeline / "model"), "--run", holdout,
                 "--probes", str(tmp_path / "probes.json"), "--out", str(tmp_path / "p")]) == 0
    assert main(["uq", "--model", str(pipeline / "model"), "--run", holdout, "--out", str(tmp_path / "q")]) == 0
    assert "coverage" in load_json(tmp_path / "q/summary.json")
    assert main(["tke", "--model", str(pipeline / "model"), "--run", holdout, "--velocity", "u,p",
                 "--probes", str(tmp_path / "probes.json"), "--window", "0", "3",
                 "--out", str(tmp_path / "k")]) == 0
    rows = (tmp_path / "k/probe001.csv").read_text().splitlines()
    assert rows[0] == "t,kappa_hat,band,kappa_sim,covered" and len(rows) == 4
    assert main(["couplings", "--model", str(pipeline / "model"), "--top-k", "1",
                 "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c/graph.dot").is_file()
    assert (tmp_path / "c/edges.csv").read_text().startswith("node_a,node_b")


def test_deleting_downstream_leaves_upstream_valid(pipeline, tmp_path):
    shutil.copytree(pipeline / "basis", tmp_path / "basis")
    shutil.copytree(pipeline / "model", tmp_path / "model")
    shutil.rmtree(tmp_path / "model")
    verify_bundle(tmp_path / "basis", "extract")


def test_missing_target_exit_2(pipeline, tmp_path, capsys):
    assert main(["predict", "--model", str(pipeline / "model"), "--out", str(tmp_path / "p")]) == 2
    assert "--run" in capsys.readouterr().err


def test_global_flags_before_or_after(pipeline, tmp_path):
    assert main(["--seed", "3", "extract", "--manifest", str(pipeline / "ens/manifest.json"),
                 "--out", str(tmp_path / "a")]) == 0
    assert main(["extract", "--manifest", str(pipeline / "ens/manifest.json"), "--seed", "3",
                 "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/provenance.json").read_bytes() == (tmp_path / "b/provenance.json").read_bytes()


def test_pooled_couplings_cli(pipeline, tmp_path, capsys):
    assert main(["couplings", "--model", str(pipeline / "model"), "--pool", "0", "3",
                 "--out", str(tmp_path / "c")]) == 0
    assert load_json(tmp_path / "c/provenance.json")["pool"] == [0, 3]
    assert main(["couplings", "--model", str(pipeline / "model"), "--pool", "2", "9",
                 "--out", str(tmp_path / "d")]) == 2
    assert "--pool" in capsys.readouterr().err
