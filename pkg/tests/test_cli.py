import csv
import json

import pytest

from tghoa.cli import main
from tghoa.sequence import load_checkpoint

TINY = {
    "synthetic": {"n_patients": 40, "n_codes": 12, "n_indicators": 2, "max_visits": 3,
                  "n_u_max": 3, "wave_len_min": 4, "wave_len_max": 12},
    "model": {"d": 6, "d_u": 4, "d_v": 2, "c1": 2},
    "epochs": 2,
    "batch_size": 16,
}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    assert main(["gen", "--config", str(tmp_path / "cfg.json"), "--seed", "3",
                 "--out", str(tmp_path / "data.jsonl")]) == 0
    return tmp_path


def _train(w, out="m.json", *extra):
    return main(["train", "--data", str(w / "data.jsonl"), "--config", str(w / "cfg.json"),
                 "--seed", "1", "--out", str(w / out), "--curve", str(w / (out + ".csv")),
                 *extra])


def test_pipeline(workdir):
    assert _train(workdir) == 0
    assert main(["eval", "--data", str(workdir / "data.jsonl"), "--model",
                 str(workdir / "m.json"), "--report", str(workdir / "r.json")]) == 0
    report = json.loads((workdir / "r.json").read_text())
    assert {"accuracy", "auc_roc", "auc_pr"} <= set(report)
    assert report["n"] == 8  # held-out fifth of 40
    rows = list(csv.reader((workdir / "m.json.csv").open()))
    assert rows[0] == ["epoch", "mean_loss"] and len(rows) == 3

    pid = json.loads((workdir / "data.jsonl").read_text().splitlines()[0])["patient_id"]
    assert main(["explain", "--data", str(workdir / "data.jsonl"), "--model",
                 str(workdir / "m.json"), "--patient", pid, "--out", str(workdir / "t.json")]) == 0
    trace = json.loads((workdir / "t.json").read_text())
    assert trace["patient_id"] == pid
    assert {i["name"] for i in trace["visits"][0]["indicators"]} == {"ind0", "ind1"}


def test_lstm_checkpoint_has_no_active_attention(workdir):
    assert _train(workdir, "l.json", "--ablation", "lstm") == 0
    _, _, abl, _, _, doc = load_checkpoint(workdir / "l.json")
    assert not abl.any_unit
    for name in ("theta_d", "theta_u1", "theta_u2", "theta_q", "eta", "epsilon"):
        assert name not in doc["active"]


def test_reruns_are_byte_identical(workdir, tmp_path_factory):
    other = tmp_path_factory.mktemp("again")
    (other / "cfg.json").write_text(json.dumps(TINY))
    main(["gen", "--config", str(other / "cfg.json"), "--seed", "3",
          "--out", str(other / "data.jsonl")])
    for w in (workdir, other):
        assert _train(w) == 0
        assert main(["eval", "--data", str(w / "data.jsonl"), "--model", str(w / "m.json"),
                     "--report", str(w / "r.json")]) == 0
    for name in ("data.jsonl", "m.json", "m.json.csv", "r.json"):
        assert (workdir / name).read_bytes() == (other / name).read_bytes(), name


def test_flags_override_config(workdir):
    assert _train(workdir, "o.json", "--epochs", "1", "--decay", "g4") == 0
    _, _, abl, _, _, doc = load_checkpoint(workdir / "o.json")
    assert abl.decay == "g4" and len(doc["extra"]["curve"]) == 1


def test_sweep_row_count(workdir):
    out = workdir / "table.csv"
    assert main(["sweep", "--data", str(workdir / "data.jsonl"), "--config",
                 str(workdir / "cfg.json"), "--seeds", "0,1,2", "--epochs", "1",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 72
    assert len({(r["ablation"], r["decay"], r["seed"]) for r in rows}) == 72


def test_sweep_workers_match_serial(workdir):
    args = ["sweep", "--data", str(workdir / "data.jsonl"), "--config", str(workdir / "cfg.json"),
            "--seeds", "0,1", "--ablations", "tghoa,lstm", "--decays", "g2", "--epochs", "1"]
    assert main(args + ["--out", str(workdir / "a.csv")]) == 0
    assert main(args + ["--workers", "2", "--out", str(workdir / "b.csv")]) == 0
    assert (workdir / "a.csv").read_bytes() == (workdir / "b.csv").read_bytes()


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def test_unknown_flag_is_usage_error(workdir, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--out", str(workdir / "x.jsonl"), "--frobnicate"])
    assert exc.value.code == 2
    assert _error(capsys)["error"] == "usage"


def test_missing_file_is_io_error(workdir, capsys):
    code = main(["train", "--data", str(workdir / "nope.jsonl"), "--out", str(workdir / "m.json")])
    assert code == 3 and _error(capsys)["error"] == "io"


def test_schema_errors(workdir, capsys):
    (workdir / "bad.jsonl").write_text('{"patient_id": "x", "label": 0, "visits": []}\n')
    code = main(["train", "--data", str(workdir / "bad.jsonl"), "--config",
                 str(workdir / "cfg.json"), "--out", str(workdir / "m.json")])
    assert code == 4 and "x" in _error(capsys)["message"]
    (workdir / "typo.json").write_text(json.dumps({"epoch": 3}))
    code = main(["gen", "--config", str(workdir / "typo.json"), "--out", str(workdir / "y.jsonl")])
    assert code == 4


def test_divergence_exit_code(workdir, capsys):
    code = _train(workdir, "d.json", "--learning-rate", "1e6", "--epochs", "30")
    assert code == 5 and _error(capsys)["error"] == "divergence"


def test_help_lists_every_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--data", "--config", "--seed", "--ablation", "--decay", "--epochs",
                 "--learning-rate", "--batch-size", "--ratio", "--patience", "--out", "--curve"):
        assert flag in text
