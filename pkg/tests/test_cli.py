import csv
import json

import jsonschema
import pytest

from normalscreen import cli, dataset, pipeline

TINY = ["input_size=16", "stem_channels=2,3", "stem_out_channels=4", "num_blocks=1",
        "epochs=1", "batch_size=8", "k=3", "clahe_tiles=4"]


def sets(*extra):
    out = []
    for item in TINY + list(extra):
        out += ["--set", item]
    return out


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    assert cli.main(["synth", "--out", str(root), "--patients", "12", "--size", "32",
                     "--seed", "3", "--images-per-patient", "1,2"]) == 0
    return root / "manifest.csv"


@pytest.fixture(scope="module")
def tiny_run(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "xval"
    rc = cli.main(["xval", "--manifest", str(tiny_data), "--out-dir", str(out), *sets()])
    assert rc == 0
    return out


def write_scores(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["score", "label"])
        w.writerows(rows)
    return path


def test_synth_patients_and_determinism(tmp_path, capsys):
    for name in ("a", "b"):
        assert cli.main(["synth", "--out", str(tmp_path / name), "--patients", "50",
                         "--size", "32", "--seed", "1"]) == 0
    samples = dataset.load_manifest(tmp_path / "a" / "manifest.csv")
    assert len({s.patient_id for s in samples}) == 50
    assert {s.label for s in samples} == {0, 1}
    a = (tmp_path / "a" / "manifest.csv").read_text()
    assert a == (tmp_path / "b" / "manifest.csv").read_text()
    first = sorted((tmp_path / "a").rglob("*.png"))[0]
    twin = tmp_path / "b" / first.relative_to(tmp_path / "a")
    assert first.read_bytes() == twin.read_bytes()


def test_split_writes_json(tiny_data, tmp_path, capsys):
    out = tmp_path / "folds.json"
    assert cli.main(["split", "--manifest", str(tiny_data), "--k", "3", "--out", str(out)]) == 0
    folds = dataset.load_folds(out)
    assert len(folds) == 3
    assert "fold 0:" in capsys.readouterr().out


def test_split_too_few_patients(tmp_path, capsys):
    manifest = dataset.write_manifest(tmp_path / "m.csv", [("a.png", "p1", 1), ("b.png", "p2", 0),
                                                          ("c.png", "p3", 1)])
    rc = cli.main(["split", "--manifest", str(manifest), "--k", "5",
                   "--out", str(tmp_path / "f.json")])
    assert rc != 0
    err = capsys.readouterr().err
    assert "3" in err and "5" in err


def test_threshold_command(tmp_path, capsys):
    path = write_scores(tmp_path / "s.csv", [(0.9, 1), (0.8, 1), (0.3, 0), (0.2, 0)])
    assert cli.main(["threshold", "--scores", str(path)]) == 0
    sweep = json.loads(capsys.readouterr().out)
    assert sweep["threshold"] == pytest.approx(0.55)
    assert (sweep["precision"], sweep["recall"], sweep["fp"]) == (1.0, 1.0, 0)
    out = tmp_path / "t.json"
    assert cli.main(["threshold", "--scores", str(path), "--method", "direct",
                     "--json", str(out)]) == 0
    direct = json.loads(capsys.readouterr().out)
    assert json.loads(out.read_text()) == direct
    keys = ("tp", "fp", "tn", "fn", "precision", "recall")
    assert [direct[k] for k in keys] == [sweep[k] for k in keys]
    assert direct["method"] == "direct" and direct["evals"] <= 200


def test_threshold_single_class(tmp_path, capsys):
    path = write_scores(tmp_path / "s.csv", [(0.9, 1), (0.8, 1)])
    assert cli.main(["threshold", "--scores", str(path)]) != 0
    assert "both classes required" in capsys.readouterr().err


def test_threshold_bad_file(tmp_path, capsys):
    assert cli.main(["threshold", "--scores", str(tmp_path / "none.csv")]) == 1
    assert "stage load" in capsys.readouterr().err


def test_xval_outputs_and_schema(tiny_run):
    report = json.loads((tiny_run / "report.json").read_text())
    jsonschema.validate(report, pipeline.REPORT_SCHEMA)
    assert report["k"] == 3 and len(report["folds"]) == 3
    for i in range(3):
        fold = tiny_run / f"fold_{i}"
        for name in ("weights.nsw", "loss.csv", "scores.csv", "roc.csv", "pr.csv", "roc.svg",
                     "pr.svg", "report.json"):
            assert (fold / name).is_file(), name
    assert (tiny_run / "table.txt").read_text().startswith("   Test")
    assert (tiny_run / "folds.json").is_file() and (tiny_run / "config.txt").is_file()


def test_report_rebuilds_identically(tiny_run, tmp_path, capsys):
    assert cli.main(["report", "--run", str(tiny_run), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "report.json").read_text() != ""
    a = json.loads((tmp_path / "report.json").read_text())
    b = json.loads((tiny_run / "report.json").read_text())
    assert a["folds"] == b["folds"] and a["summary"] == b["summary"]
    paths = [str(tiny_run / f"fold_{i}" / "scores.csv") for i in range(3)]
    assert cli.main(["report", "--scores", *paths, "--out", str(tmp_path / "s")]) == 0
    c = json.loads((tmp_path / "s" / "report.json").read_text())
    assert [r["tp"] for r in c["folds"]] == [r["tp"] for r in b["folds"]]


def test_train_and_eval_match_xval(tiny_data, tiny_run, tmp_path, capsys):
    common = ["--manifest", str(tiny_data), "--folds", str(tiny_run / "folds.json"),
              "--fold", "1", *sets()]
    assert cli.main(["train", *common, "--out", str(tmp_path / "t")]) == 0
    weights = tmp_path / "t" / "weights.nsw"
    assert weights.read_bytes() == (tiny_run / "fold_1" / "weights.nsw").read_bytes()
    assert cli.main(["eval", *common, "--weights", str(weights), "--out", str(tmp_path / "e")]) == 0
    assert ((tmp_path / "e" / "scores.csv").read_text()
            == (tiny_run / "fold_1" / "scores.csv").read_text())


def test_parallel_matches_sequential(tiny_data, tiny_run, tmp_path, capsys):
    out = tmp_path / "par"
    assert cli.main(["xval", "--manifest", str(tiny_data), "--out-dir", str(out),
                     "--parallel-folds", *sets()]) == 0
    assert (out / "report.json").read_bytes() == (tiny_run / "report.json").read_bytes()


def test_validation_thresholds(tiny_data, tmp_path, capsys):
    out = tmp_path / "val"
    assert cli.main(["xval", "--manifest", str(tiny_data), "--out-dir", str(out),
                     "--threshold-on", "validation", "--threshold-method", "direct",
                     *sets()]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["threshold_on"] == "validation" and report["threshold_method"] == "direct"
    assert (out / "fold_0" / "validation_scores.csv").is_file()


def test_stage_failure_names_stage(tiny_data, tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("loss is nan")

    monkeypatch.setattr(pipeline, "train_model", boom)
    rc = cli.main(["xval", "--manifest", str(tiny_data), "--out-dir", str(tmp_path / "x"),
                   *sets()])
    assert rc == 1
    assert "stage train (fold 0): loss is nan" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["xval", "--manifest", str(tmp_path / "no.csv")]) == 2
    assert "does not exist" in capsys.readouterr().err
    assert cli.main(["xval", "--set", "bogus=1"]) == 2


def test_config_file_and_env(tiny_data, tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"manifest = {tiny_data}\nout_dir = rel\n" + "\n".join(
        s.replace("=", " = ") for s in TINY) + "\n")
    monkeypatch.setenv("NORMALSCREEN_OUTPUT_ROOT", str(tmp_path / "root"))
    assert cli.main(["xval", "--config", str(cfg), "--set", "epochs=1"]) == 0
    assert (tmp_path / "root" / "rel" / "report.json").is_file()
    assert "written to" in capsys.readouterr().out
