import csv
import json

import pytest

from omnimask.checkpoint import load_checkpoint
from omnimask.cli import main, monotone_summary

TINY_MODEL = {"dim": 16, "layers": 1, "heads": 2, "max_len": 96, "seed": 0,
              "vocab": {"text_size": 64, "vision_size": 16, "speech_size": 8}}


@pytest.fixture
def model_json(tmp_path):
    p = tmp_path / "tiny_model.json"
    p.write_text(json.dumps(TINY_MODEL))
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_data_deterministic_and_filtered(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("gen-data", "--seed", 3, "--families", "t2i,asr", "--count", 5, "--out", a) == 0
    assert run("gen-data", "--seed", 3, "--families", "t2i,asr", "--count", 5, "--out", b) == 0
    assert (a / "records.jsonl").read_bytes() == (b / "records.jsonl").read_bytes()
    fams = {json.loads(l)["family"] for l in (a / "records.jsonl").read_text().splitlines()}
    assert fams == {"t2i", "asr"}
    assert json.loads((a / "run_config.json").read_text())["seed"] == 3
    # Refuses to overwrite without --force.
    with pytest.raises(SystemExit) as exc:
        run("gen-data", "--seed", 3, "--out", a)
    assert exc.value.code == 2
    assert run("gen-data", "--seed", 4, "--out", a, "--force", "--count", 2) == 0


def test_gen_data_unknown_family(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("gen-data", "--seed", 1, "--families", "t2i,smell", "--out", tmp_path / "x")
    assert exc.value.code == 2
    assert "valid:" in capsys.readouterr().err


def test_grid_side_option(tmp_path):
    run("gen-data", "--seed", 1, "--families", "t2i", "--count", 2, "--grid-side", 4,
        "--out", tmp_path)
    rec = json.loads((tmp_path / "records.jsonl").read_text().splitlines()[0])
    assert len(rec["image"]) == 4


@pytest.fixture
def lifecycle(tmp_path, model_json):
    """Tiny backbone -> stage 1 -> merge, each for a couple of steps."""
    bb, s1, mg = tmp_path / "bb", tmp_path / "s1", tmp_path / "mg"
    assert run("train", "--stage", 0, "--model", model_json, "--steps", 2, "--batch-size", 4,
               "--out", bb) == 0
    assert run("train", "--stage", 1, "--init", bb / "checkpoint.omdf", "--steps", 2,
               "--batch-size", 4, "--out", s1) == 0
    assert run("merge", "--backbone", bb / "checkpoint.omdf", "--stage1",
               s1 / "checkpoint.omdf", "--out", mg) == 0
    return tmp_path


def test_train_writes_outputs(lifecycle):
    bb = lifecycle / "bb"
    with open(bb / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "lr"] and len(rows) == 3
    cfg = json.loads((bb / "run_config.json").read_text())
    assert cfg["stage_config"]["steps"] == 2 and cfg["model"]["dim"] == 16
    s1 = load_checkpoint(lifecycle / "s1" / "checkpoint.omdf")
    assert s1.layout.speech_size == 8
    assert load_checkpoint(bb / "checkpoint.omdf").layout.speech_size == 0


def test_stage2_refuses_v0_checkpoint(lifecycle, capsys):
    code = run("train", "--stage", 2, "--init", lifecycle / "bb" / "checkpoint.omdf",
               "--steps", 1, "--out", lifecycle / "s2")
    assert code == 1
    assert "speech" in capsys.readouterr().err


def test_merge_endpoints(lifecycle):
    bb = load_checkpoint(lifecycle / "bb" / "checkpoint.omdf")
    s1 = load_checkpoint(lifecycle / "s1" / "checkpoint.omdf")
    run("merge", "--backbone", lifecycle / "bb" / "checkpoint.omdf", "--stage1",
        lifecycle / "s1" / "checkpoint.omdf", "--alpha", 1, "--out", lifecycle / "m1")
    m1 = load_checkpoint(lifecycle / "m1" / "checkpoint.omdf")
    v0 = bb.layout.total_size
    assert (m1.params["embed"][:v0] == bb.params["embed"]).all()
    assert (m1.params["layer0.W1"] == bb.params["layer0.W1"]).all()
    run("merge", "--backbone", lifecycle / "bb" / "checkpoint.omdf", "--stage1",
        lifecycle / "s1" / "checkpoint.omdf", "--alpha", 0, "--strategy", "shared",
        "--out", lifecycle / "m0")
    assert load_checkpoint(lifecycle / "m0" / "checkpoint.omdf").params.equal(s1.params)
    with pytest.raises(SystemExit):
        run("merge", "--backbone", "x", "--stage1", "y", "--alpha", 1.5)


def test_eval_report_and_errors(lifecycle, capsys):
    ck = lifecycle / "mg" / "checkpoint.omdf"
    args = ["eval", "--ckpt", ck, "--tasks", "asr,t2i", "--count", 3]
    assert run(*args, "--out", lifecycle / "e1") == 0
    assert run(*args, "--out", lifecycle / "e2") == 0
    r1 = (lifecycle / "e1" / "report.jsonl").read_text()
    assert r1 == (lifecycle / "e2" / "report.jsonl").read_text()
    assert {json.loads(l)["task"] for l in r1.splitlines()} == {"asr", "t2i"}
    with pytest.raises(SystemExit):
        run("eval", "--ckpt", ck, "--tasks", "asr", "--cfg-scale", 2, "--out", lifecycle / "e3")
    assert run("eval", "--ckpt", ck, "--tasks", "t2i", "--cfg-scale", 2, "--count", 2,
               "--out", lifecycle / "e4") == 0
    assert run("eval", "--ckpt", lifecycle / "missing.omdf", "--out", lifecycle / "e5") == 1
    assert "not found" in capsys.readouterr().err


def test_sweep(lifecycle, capsys):
    ck = lifecycle / "mg" / "checkpoint.omdf"
    assert run("sweep", "--ckpt", ck, "--task", "t2i", "--steps", "4,1,2,2", "--count", 3,
               "--out", lifecycle / "sw") == 0
    with open(lifecycle / "sw" / "sweep.csv") as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows[1:]] == ["1", "2", "4"]
    assert "plateau" in capsys.readouterr().err


def test_generate(lifecycle, capsys):
    ck = lifecycle / "mg" / "checkpoint.omdf"
    assert run("generate", "--ckpt", ck, "--family", "t2i", "--prompt", "color1 shape2",
               "--steps", 3) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 4 and all(len(l.split()) == 3 for l in out[:3])
    assert run("generate", "--ckpt", ck, "--family", "tts", "--prompt", "abc") == 0
    out = capsys.readouterr().out
    assert out.startswith("units:") and "text:" in out
    assert run("generate", "--ckpt", ck, "--family", "i2t", "--prompt", "describe",
               "--image", "0,1,0;0,0,0;0,0,7") == 0
    with pytest.raises(SystemExit):
        run("generate", "--ckpt", ck, "--family", "poem", "--prompt", "x")


def test_monotone_summary():
    assert monotone_summary([(1, 0.1), (2, 0.5), (4, 0.9), (8, 0.9)], 0.02).startswith("monotone")
    s = monotone_summary([(1, 0.1), (2, 0.6), (4, 0.3)], 0.02)
    assert s.startswith("non-monotone") and "drops at steps [4]" in s


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("OMNIMASK_OUT", str(tmp_path / "root"))
    assert run("gen-data", "--seed", 1, "--families", "chat", "--count", 1) == 0
    assert (tmp_path / "root" / "data" / "records.jsonl").exists()
