import json
import os

import pytest

from emotrack.cli import main, parse_seeds

GEN = "n_clients = 10\nclient_turns = 3\ncounselor_turns = 2\nd_e = 6\nF = 4\n"
TRAIN = "d = 8\nh = 2\nd_ff = 16\nL_enc = 1\nL_dec = 1\nS = 4\nN_max = 6\nd_e = 6\nF = 4\n" \
        "score_mlp_hidden = 4\nmax_epochs = 2\nbatch_size = 8\n"


def _files(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def fixtures(tmp_path):
    (tmp_path / "gen.cfg").write_text(GEN)
    (tmp_path / "train.cfg").write_text(TRAIN)
    assert main(["gen-fixtures", "--config", str(tmp_path / "gen.cfg"), "--out", str(tmp_path / "fx")]) == 0
    return tmp_path


def _train(root, out="run", seeds="0"):
    return main(["train", "--config", str(root / "train.cfg"), "--data", str(root / "fx/corpus.jsonl"),
                 "--manifest", str(root / "fx/manifest.json"), "--out", str(root / out), "--seeds", seeds])


def _eval(root, ck, out="ev", data="fx/corpus.jsonl", manifest="fx/manifest.json", extra=()):
    return main(["eval", "--checkpoint", str(root / ck), "--data", str(root / data),
                 "--manifest", str(root / manifest), "--out", str(root / out), *extra])


def test_parse_seeds():
    assert parse_seeds("0..4") == [0, 1, 2, 3, 4]
    assert parse_seeds("0,2") == [0, 2]


def test_gen_fixtures_outputs(fixtures):
    fx = fixtures / "fx"
    lines = (fx / "corpus.jsonl").read_text().splitlines()
    assert len(lines) == 1 + 5 * 10
    assert (fx / "manifest.json").exists() and (fx / "run_gen-fixtures.json").exists()


def test_gen_fixtures_byte_identical(fixtures):
    assert main(["gen-fixtures", "--config", str(fixtures / "gen.cfg"), "--out", str(fixtures / "fx2")]) == 0
    a, b = _files(fixtures / "fx"), _files(fixtures / "fx2")
    a.pop("run_gen-fixtures.json")
    b.pop("run_gen-fixtures.json")
    assert a == b


def test_gen_fixtures_bad_ratios(tmp_path, capsys):
    (tmp_path / "g.cfg").write_text("ratios = 0.5, 0.5, 0.5\n")
    assert main(["gen-fixtures", "--config", str(tmp_path / "g.cfg"), "--out", str(tmp_path / "o")]) == 1
    assert "ratios" in capsys.readouterr().err


def test_unwritable_output(tmp_path):
    (tmp_path / "file").write_text("x")
    assert main(["gen-fixtures", "--out", str(tmp_path / "file" / "sub")]) == 1


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1


def test_train_and_eval(fixtures):
    assert _train(fixtures, seeds="0,1") == 0
    run = fixtures / "run"
    for s in (0, 1):
        assert (run / f"checkpoint_seed{s}.emck").exists()
        assert len((run / f"train_log_seed{s}.jsonl").read_text().splitlines()) == 2
    manifest = json.loads((run / "run_train.json").read_text())
    assert manifest["seeds"] == [0, 1] and manifest["config"]["model"]["d"] == 8

    assert _eval(fixtures, "run", extra=["--seeds", "0..1"]) == 0
    rep = json.loads((fixtures / "ev/report.json").read_text())
    assert len(rep["per_seed"]) == 2 and rep["std"] is not None
    for k in ("overall_mae", "per_session_mae", "mean", "std", "config_fingerprint"):
        assert k in rep

    assert _eval(fixtures, "run/checkpoint_seed0.emck", out="ev1") == 0
    assert json.loads((fixtures / "ev1/report.json").read_text())["std"] is None


def test_same_seed_same_checkpoint(fixtures):
    assert _train(fixtures, "a") == 0 and _train(fixtures, "b") == 0
    assert (fixtures / "a/checkpoint_seed0.emck").read_bytes() == (fixtures / "b/checkpoint_seed0.emck").read_bytes()


def test_train_without_labels_is_data_error(fixtures, capsys):
    path = fixtures / "fx/corpus.jsonl"
    lines = path.read_text().splitlines()
    out = [lines[0]]
    for line in lines[1:]:
        obj = json.loads(line)
        obj["labels"] = None
        out.append(json.dumps(obj))
    path.write_text("\n".join(out) + "\n")
    assert _train(fixtures) == 2
    assert "labels" in capsys.readouterr().err


def test_eval_dimension_mismatch_names_both(fixtures, capsys):
    assert _train(fixtures) == 0
    (fixtures / "wide.cfg").write_text(GEN.replace("d_e = 6", "d_e = 9"))
    assert main(["gen-fixtures", "--config", str(fixtures / "wide.cfg"), "--out", str(fixtures / "wide")]) == 0
    assert _eval(fixtures, "run/checkpoint_seed0.emck", data="wide/corpus.jsonl",
                 manifest="wide/manifest.json") == 2
    err = capsys.readouterr().err
    assert "d_e=6" in err and "d_e=9" in err


def test_eval_empty_test_split(fixtures, capsys):
    assert _train(fixtures) == 0
    (fixtures / "nt.cfg").write_text(GEN + "ratios = 0.8, 0.2, 0.0\n")
    assert main(["gen-fixtures", "--config", str(fixtures / "nt.cfg"), "--out", str(fixtures / "nt")]) == 0
    assert _eval(fixtures, "run/checkpoint_seed0.emck", data="nt/corpus.jsonl", manifest="nt/manifest.json") == 2
    assert "empty" in capsys.readouterr().err


def test_missing_checkpoint_is_data_error(fixtures):
    assert _eval(fixtures, "nothing.emck") == 2


def test_gradcheck_exit_codes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    assert "PASS" in (tmp_path / "gradcheck.txt").read_text()
    assert main(["gradcheck", "--corrupt", "head.w"]) == 3
    assert "head.w" in capsys.readouterr().err
    assert main(["gradcheck", "--corrupt", "no.such"]) == 1


def test_ablate_outputs(fixtures):
    args = ["ablate", "--config", str(fixtures / "train.cfg"), "--data", str(fixtures / "fx/corpus.jsonl"),
            "--manifest", str(fixtures / "fx/manifest.json"), "--out", str(fixtures / "ab"),
            "--axis", "speaker-view", "--grid", "client,counselor,both", "--seeds", "0"]
    assert main(args) == 0
    rows = (fixtures / "ab/ablation_speaker-view.csv").read_text().splitlines()
    assert len(rows) == 4
    header = rows[0].split(",")
    assert all(r.split(",")[header.index("std_mae")] == "" for r in rows[1:])
    assert json.loads((fixtures / "ab/ablation_speaker-view.json").read_text())["axis"] == "speaker-view"
    bad = list(args)
    bad[bad.index("speaker-view")] = "colour"
    assert main(bad) == 1


def test_replay_reproduces_outputs(fixtures):
    assert _train(fixtures) == 0
    before = _files(fixtures / "run")
    assert main(["replay", str(fixtures / "run/run_train.json")]) == 0
    after = _files(fixtures / "run")
    for name in before:
        if name.endswith(".jsonl"):
            strip = lambda b: [{k: v for k, v in json.loads(l).items() if k != "seconds"}
                               for l in b.decode().splitlines()]
            assert strip(before[name]) == strip(after[name])
        else:
            assert before[name] == after[name], name


def test_nothing_written_outside_out(fixtures, monkeypatch):
    monkeypatch.chdir(fixtures)
    before = set(os.listdir(fixtures))
    assert _train(fixtures, "only") == 0
    assert set(os.listdir(fixtures)) - before == {"only"}


def test_out_dir_from_environment(fixtures, monkeypatch):
    monkeypatch.setenv("EMOTRACK_OUT", str(fixtures / "envout"))
    monkeypatch.setenv("EMOTRACK_THREADS", "1")
    assert main(["gen-fixtures", "--config", str(fixtures / "gen.cfg")]) == 0
    assert (fixtures / "envout/corpus.jsonl").exists()
