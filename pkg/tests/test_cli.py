import json
import subprocess
import sys

import pytest

from kpgaze.cli import main, split_records, verify_manifest
from kpgaze.dataset import file_digest, read_records, record_from_dict, write_records
from kpgaze.network import load_model, model_to_dict, param_count


def run(*argv):
    return main(list(argv))


@pytest.fixture
def small_data(tmp_path):
    tr, va = tmp_path / "train.jsonl", tmp_path / "val.jsonl"
    assert run("synth", "--n", "200", "--seed", "1", "--out", str(tr), "--quiet") == 0
    assert run("synth", "--n", "80", "--seed", "2", "--out", str(va), "--quiet") == 0
    return tr, va


def test_synth_minimal(tmp_path):
    cfg = tmp_path / "synth.yaml"
    cfg.write_text("n_samples: 10\nseed: 1\n")
    out = tmp_path / "d.jsonl"
    assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(read_records(out)) == 10
    manifest = json.loads((tmp_path / "d.jsonl.manifest.json").read_text())
    assert manifest["n_samples"] == 10 and manifest["seed"] == 1
    run_doc = json.loads((tmp_path / "d.jsonl.run.json").read_text())
    assert run_doc["status"] == "ok" and run_doc["seed"] == 1 and run_doc["config"]["n_samples"] == 10
    assert all(verify_manifest(tmp_path / "d.jsonl.run.json").values())


def test_synth_invalid_range(tmp_path, caplog):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("yaw_range: [30, -30]\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d.jsonl")]) == 2
    assert "yaw_range" in caplog.text
    run_doc = json.loads((tmp_path / "d.jsonl.run.json").read_text())
    assert run_doc["status"] == "error" and "yaw_range" in run_doc["error"]


def test_synth_rerun_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--n", "50", "--seed", "4", "--out", str(tmp_path / f"{name}.jsonl"), "--quiet"]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_artifact_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("KPGAZE_ARTIFACT_DIR", str(tmp_path / "art"))
    assert main(["synth", "--n", "5", "--quiet"]) == 0
    assert (tmp_path / "art" / "synth.jsonl").exists()


def test_train_predict_eval(tmp_path, small_data):
    tr, va = small_data
    before = file_digest(tr), file_digest(va)
    model = tmp_path / "m.json"
    assert main(["train", "--train", str(tr), "--val", str(va), "--out", str(model), "--quiet"]) == 0
    assert (file_digest(tr), file_digest(va)) == before
    report = json.loads((tmp_path / "m.json.report.json").read_text())
    assert report["final_val_error"] < report["history"][0]["val_error"]
    config = json.loads((tmp_path / "m.json.config.json").read_text())
    assert config["learning_rate"] == 5e-3
    assert all(verify_manifest(tmp_path / "m.json.run.json").values())

    preds = tmp_path / "p.jsonl"
    assert main(["predict", "--model", str(model), "--data", str(va), "--out", str(preds), "--quiet"]) == 0
    again = tmp_path / "p2.jsonl"
    assert main(["predict", "--model", str(model), "--data", str(va), "--out", str(again), "--quiet"]) == 0
    assert preds.read_bytes() == again.read_bytes()

    rep = tmp_path / "r.json"
    csv = tmp_path / "r.csv"
    assert main(["eval", "--predictions", str(preds), "--data", str(va), "--out", str(rep), "--csv", str(csv), "--quiet"]) == 0
    doc = json.loads(rep.read_text())
    assert doc["n_estimable"] == 80 and doc["dataset_digest"] == file_digest(va)
    assert len(csv.read_text().splitlines()) == 81


def test_train_net0_variant(tmp_path, small_data):
    tr, va = small_data
    out = tmp_path / "n0.json"
    assert main(["train", "--train", str(tr), "--val", str(va), "--variant", "net0", "--epochs", "3",
                 "--out", str(out), "--quiet"]) == 0
    model = load_model(out)
    assert model.variant == "net0" and param_count(model) == 273


def test_finetune_arch_mismatch(tmp_path, small_data):
    tr, va = small_data
    base = tmp_path / "n0.json"
    assert main(["train", "--train", str(tr), "--val", str(va), "--variant", "net0", "--epochs", "1",
                 "--out", str(base), "--quiet"]) == 0
    code = main(["train", "--train", str(tr), "--val", str(va), "--finetune", str(base),
                 "--out", str(tmp_path / "ft.json"), "--quiet"])
    assert code == 2

    foreign = model_to_dict(load_model(base))
    foreign["arch_tag"] = "someone-else-10-64-64-3"
    (tmp_path / "foreign.json").write_text(json.dumps(foreign))
    code = main(["train", "--train", str(tr), "--val", str(va), "--finetune", str(tmp_path / "foreign.json"),
                 "--out", str(tmp_path / "ft.json"), "--quiet"])
    assert code == 2
    assert "ArchMismatch" in json.loads((tmp_path / "ft.json.run.json").read_text())["error"]


def test_finetune_default_lr(tmp_path, small_data):
    tr, va = small_data
    base = tmp_path / "m.json"
    assert main(["train", "--train", str(tr), "--val", str(va), "--epochs", "2", "--out", str(base), "--quiet"]) == 0
    assert main(["train", "--train", str(tr), "--val", str(va), "--finetune", str(base), "--epochs", "2",
                 "--out", str(tmp_path / "ft.json"), "--quiet"]) == 0
    assert json.loads((tmp_path / "ft.json.config.json").read_text())["learning_rate"] == 1e-5


def _record(frame, keypoints, gaze=(1.0, 0.0)):
    return record_from_dict({"frame": frame, "camera": "c", "person": "0", "keypoints": keypoints,
                             "gaze": None if gaze is None else list(gaze)})


def test_predict_skips_single_keypoint(tmp_path, small_data):
    tr, va = small_data
    model = tmp_path / "m.json"
    assert main(["train", "--train", str(tr), "--val", str(va), "--epochs", "1", "--out", str(model), "--quiet"]) == 0
    data = tmp_path / "one.jsonl"
    write_records([_record("1", [[5, 5, 0.7]] + [[0, 0, 0]] * 4)], data)
    out = tmp_path / "p.jsonl"
    assert main(["predict", "--model", str(model), "--data", str(data), "--out", str(out), "--quiet"]) == 0
    pred = json.loads(out.read_text())
    assert pred["skip"] == "TooFewKeypoints" and pred["gaze"] is None


def test_baseline_routes_to_geom(tmp_path, small_data):
    _, va = small_data
    for argv in (["baseline", "--data", str(va)], ["predict", "--baseline", "geom", "--data", str(va)]):
        out = tmp_path / f"{argv[0]}.jsonl"
        assert main([*argv, "--out", str(out), "--quiet"]) == 0
        preds = [json.loads(line) for line in out.read_text().splitlines()]
        assert all(p["sigma"] is None for p in preds)
        assert any(p["gaze"] is not None for p in preds)
    assert (tmp_path / "baseline.jsonl").read_bytes() == (tmp_path / "predict.jsonl").read_bytes()


def test_eval_hardwired_and_unlabeled(tmp_path):
    kp = [[100, 100, 0.9], [90, 90, 0.8], [110, 90, 0.8], [0, 0, 0], [0, 0, 0]]
    records = [_record("1", kp, (0.6, 0.8)), _record("2", kp, (-1.0, 0.0)), _record("3", kp, None)]
    data = tmp_path / "d.jsonl"
    write_records(records, data)
    preds = tmp_path / "p.jsonl"
    preds.write_text("".join(json.dumps({"camera": "c", "frame": r.frame, "person": "0", "k": 3,
                                         "gaze": [1.0, 0.0] if r.gaze is None else r.gaze.g.tolist(),
                                         "sigma": 0.5, "skip": None}) + "\n" for r in records))
    out = tmp_path / "r.json"
    assert main(["eval", "--predictions", str(preds), "--data", str(data), "--out", str(out), "--quiet"]) == 0
    doc = json.loads(out.read_text())
    assert doc["mean_error"] == 0.0
    assert doc["rho_defined"] is False and doc["pearson_rho"] is None
    assert doc["unlabeled_keys"] == [["c", "3", "0"]]


def test_compare_three_reports(tmp_path, small_data, capsys):
    tr, va = small_data
    reports = []
    for seed in (1, 2, 3):
        m, p, r = (tmp_path / f"{n}{seed}.json" for n in ("m", "p", "r"))
        assert main(["train", "--train", str(tr), "--val", str(va), "--epochs", "3", "--seed", str(seed),
                     "--out", str(m), "--quiet"]) == 0
        assert main(["predict", "--model", str(m), "--data", str(va), "--out", str(p), "--quiet"]) == 0
        assert main(["eval", "--predictions", str(p), "--data", str(va), "--out", str(r), "--quiet"]) == 0
        reports.append(str(r))
    capsys.readouterr()
    out = tmp_path / "cmp.json"
    assert main(["compare", *reports, "--out", str(out), "--quiet"]) == 0
    table = json.loads(out.read_text())
    assert table["aggregate"]["n_reports"] == 3 and table["warnings"] == []
    assert "mean ± spread" in capsys.readouterr().out
    assert main(["compare", *reports, "--no-aggregate", "--out", str(out), "--quiet"]) == 0
    assert "aggregate" not in json.loads(out.read_text())


def test_split_keeps_sequences_together(tmp_path):
    data = tmp_path / "d.jsonl"
    cfg = tmp_path / "c.yaml"
    cfg.write_text("n_samples: 200\nframes_per_sequence: 5\n")
    assert main(["synth", "--config", str(cfg), "--out", str(data), "--quiet"]) == 0
    assert main(["split", "--data", str(data), "--seed", "3", "--out", str(tmp_path / "sp"), "--quiet"]) == 0
    parts = {n: read_records(tmp_path / "sp" / f"{n}.jsonl") for n in ("train", "val", "test")}
    assert [len(p) for p in parts.values()] == [100, 40, 60]
    seqs = [{r.sequence for r in p} for p in parts.values()]
    assert not (seqs[0] & seqs[1] or seqs[0] & seqs[2] or seqs[1] & seqs[2])


def test_split_invalid_fractions():
    with pytest.raises(Exception, match="fractions"):
        split_records([], (0.5, 0.5, 0.5))


def test_exit_codes(tmp_path):
    assert main(["predict", "--model", str(tmp_path / "nope.json"), "--data", str(tmp_path / "nope.jsonl"),
                 "--out", str(tmp_path / "p.jsonl"), "--quiet"]) == 4
    (tmp_path / "bad.json").write_text("[]")
    (tmp_path / "d.jsonl").write_text("")
    assert main(["predict", "--model", str(tmp_path / "bad.json"), "--data", str(tmp_path / "d.jsonl"),
                 "--out", str(tmp_path / "p.jsonl"), "--quiet"]) == 2
    cfg = tmp_path / "c.yaml"
    cfg.write_text("batch_size: many\n")
    assert main(["train", "--config", str(cfg), "--train", "x", "--val", "y",
                 "--out", str(tmp_path / "m.json"), "--quiet"]) == 2


def test_empty_eval_is_runtime_error(tmp_path):
    (tmp_path / "d.jsonl").write_text("")
    (tmp_path / "p.jsonl").write_text("")
    assert main(["eval", "--predictions", str(tmp_path / "p.jsonl"), "--data", str(tmp_path / "d.jsonl"),
                 "--out", str(tmp_path / "r.json"), "--quiet"]) == 3


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "kpgaze.cli", "synth", "--n", "3", "--out", str(tmp_path / "d.jsonl")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(read_records(tmp_path / "d.jsonl")) == 3
