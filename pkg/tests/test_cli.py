import json
import logging
import os

import pytest

from edgefed.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    p = str(tmp_path_factory.mktemp("data") / "d.csv")
    assert main(["gen-synthetic", "--out", p, "--rows", "300", "--hosts", "2", "--n-per-host", "5",
                 "--fraction", "0.1", "--seed", "3"]) == EXIT_OK
    return p


def test_unknown_command_is_usage_error(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_missing_required_flag_is_usage_error():
    assert main(["train", "--data", "x.csv"]) == EXIT_USAGE


def test_malformed_csv_is_data_error(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("timestamp,a,label\n0,0.1,0\n1,zz,0\n")
    rc = main(["train", "--data", str(p), "--out", str(tmp_path / "m.npz")])
    assert rc == EXIT_DATA
    assert "line 3" in capsys.readouterr().err


def test_missing_file_is_data_error(tmp_path):
    assert main(["evaluate", str(tmp_path / "nowhere")]) == EXIT_DATA


def test_missing_config_file_is_usage_error(tmp_path, dataset):
    assert main(["--config", str(tmp_path / "no.json"), "gen-synthetic", "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE


def test_unknown_config_key_is_usage_error(tmp_path, dataset):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"detector": {"no_such_field": 1}}))
    rc = main(["--config", str(cfg), "train", "--data", dataset, "--out", str(tmp_path / "m.npz")])
    assert rc == EXIT_USAGE


def test_gen_synthetic_deterministic(tmp_path):
    a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    for p in (a, b):
        assert main(["gen-synthetic", "--preset", "FTSAD-1", "--rows", "500", "--seed", "4", "--out", p]) == EXIT_OK
    assert _read(a) == _read(b)


def test_precedence_flag_over_config_over_default(tmp_path, caplog, monkeypatch):
    caplog.set_level(logging.INFO, logger="edgefed")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synthetic": {"rows": 120, "seed": 5}}))
    monkeypatch.setenv("EDGEFED_CONFIG", str(cfg))
    out = str(tmp_path / "s.csv")
    assert main(["-v", "gen-synthetic", "--out", out, "--seed", "9", "--hosts", "2"]) == EXIT_OK
    text = caplog.text
    assert "setting seed = 9 (flag)" in text
    assert "setting rows = 120 (config)" in text
    assert "setting fraction = " in text and "(default)" in text
    with open(out) as fh:
        assert sum(1 for _ in fh) == 121


def test_train_detect_resume(tmp_path, dataset, capsys):
    ck = str(tmp_path / "m.npz")
    assert main(["train", "--data", dataset, "--out", ck, "--epochs", "1", "--k", "5"]) == EXIT_OK
    curve = tmp_path / "m.curve.csv"
    assert curve.exists() and len(curve.read_text().splitlines()) == 2
    ck2 = str(tmp_path / "m2.npz")
    assert main(["train", "--data", dataset, "--out", ck2, "--epochs", "1", "--resume", ck]) == EXIT_OK
    lines = (tmp_path / "m2.curve.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "1"]
    capsys.readouterr()
    met = str(tmp_path / "met.json")
    assert main(["detect", "--checkpoint", ck2, "--data", dataset, "--out", met]) == EXIT_OK
    out = json.loads(open(met).read())
    assert 0.0 <= out["f1"] <= 1.0 and "threshold" in out


def test_detect_label_free_data(tmp_path, dataset):
    ck = str(tmp_path / "m.npz")
    assert main(["train", "--data", dataset, "--out", ck, "--epochs", "1", "--k", "5"]) == EXIT_OK
    nolab = tmp_path / "nolab.csv"
    lines = open(dataset).read().splitlines()
    nolab.write_text("\n".join(",".join(ln.split(",")[:-1]) for ln in lines) + "\n")
    assert main(["detect", "--checkpoint", ck, "--data", str(nolab), "--require-labels"]) == EXIT_DATA
    met = str(tmp_path / "met.json")
    assert main(["detect", "--checkpoint", ck, "--data", str(nolab), "--out", met]) == EXIT_OK
    out = json.loads(open(met).read())
    assert "f1" not in out and "threshold" in out


def test_detect_all_normal_test_split_flagged(tmp_path):
    data = str(tmp_path / "clean.csv")
    assert main(["gen-synthetic", "--out", data, "--rows", "200", "--hosts", "2", "--n-per-host", "5",
                 "--fraction", "0"]) == EXIT_OK
    ck = str(tmp_path / "m.npz")
    assert main(["train", "--data", data, "--out", ck, "--epochs", "1", "--k", "5"]) == EXIT_OK
    met = str(tmp_path / "met.json")
    assert main(["detect", "--checkpoint", ck, "--data", data, "--out", met]) == EXIT_OK
    out = json.loads(open(met).read())
    assert "degenerate" in out and out["recall"] == 0.0


def _simulate(out, calib_dir, *extra):
    return main(["simulate", "--out", out, "--intervals", "8", "--seed", "7", "--cache-dir", calib_dir, *extra])


def test_simulate_same_seed_byte_identical(tmp_path, calib_dir):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert _simulate(a, calib_dir) == EXIT_OK
    assert _simulate(b, calib_dir) == EXIT_OK
    assert _read(os.path.join(a, "trace.csv")) == _read(os.path.join(b, "trace.csv"))
    assert main(["evaluate", a]) == EXIT_OK


def test_dragon_plus_n1_matches_dragon(tmp_path, calib_dir):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert _simulate(a, calib_dir, "--mode", "dragon") == EXIT_OK
    assert _simulate(b, calib_dir, "--mode", "dragon_plus", "--N", "1") == EXIT_OK
    assert _read(os.path.join(a, "trace.csv")) == _read(os.path.join(b, "trace.csv"))


@pytest.mark.slow
def test_topology_three_logs_lei_sizes(tmp_path, calib_dir, caplog):
    caplog.set_level(logging.INFO, logger="edgefed")
    out = str(tmp_path / "t3")
    assert main(["-v", "simulate", "--topology", "3", "--mode", "none", "--intervals", "3", "--out", out,
                 "--cache-dir", calib_dir]) == EXIT_OK
    assert "LEI sizes [2, 4, 4, 8]" in caplog.text
    meta = json.loads(open(os.path.join(out, "meta.json")).read())
    assert meta["lei_sizes"] == [2, 4, 4, 8]


def test_compare_writes_tables(tmp_path, calib_dir):
    out = str(tmp_path / "cmp")
    rc = main(["compare", "--modes", "none,dragon", "--seeds", "1", "--intervals", "5", "--out", out,
               "--cache-dir", calib_dir])
    assert rc == EXIT_OK
    rows = open(os.path.join(out, "compare.csv")).read().splitlines()
    assert len(rows) == 3
    agg = json.loads(open(os.path.join(out, "compare.json")).read())
    assert set(agg["modes"]) == {"none:1", "dragon:1"}
