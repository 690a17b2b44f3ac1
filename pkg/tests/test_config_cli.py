import json

import numpy as np
import pytest

from nvc import cli, fileio
from nvc.config import ConfigError, DEFAULTS, dump_config, load_config, parse_config
from nvc.nn import load_checkpoint


# -- config ---------------------------------------------------------------------------

def test_defaults_and_types():
    cfg = parse_config("[encoder]\nsteps = 7\nlr = 0.01\n[clone]\nstop_threshold = 0.5\n")
    assert cfg["encoder"]["steps"] == 7 and isinstance(cfg["encoder"]["lr"], float)
    assert cfg["clone"]["stop_threshold"] == 0.5
    assert cfg["synth"]["batch_size"] == DEFAULTS["synth"]["batch_size"]


@pytest.mark.parametrize("text", ["[encoder]\nsteps = many\n", "[encoder]\nstepz = 3\n", "[nope]\na = 1\n",
                                  "steps = 3\n"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dump_round_trip(tmp_path):
    cfg = load_config()
    cfg.set("synth.freeze", "encoder.,embed")
    cfg.set("run.seed", "9")
    path = tmp_path / "c.ini"
    path.write_text(dump_config(cfg), encoding="utf-8")
    back = load_config(path)
    assert back.values == cfg.values
    assert back.freeze_patterns("synth") == ["encoder.", "embed"]


def test_workdir_resolution(tmp_path, monkeypatch):
    monkeypatch.setenv("NVC_WORKDIR", str(tmp_path / "w"))
    cfg = load_config().resolve_paths()
    assert cfg.workdir == tmp_path / "w" and cfg.corpus == tmp_path / "w" / "corpus"
    monkeypatch.delenv("NVC_WORKDIR")
    cfg = load_config().resolve_paths(tmp_path)
    assert cfg.workdir == tmp_path / "work"


def test_set_rejects_unknown():
    with pytest.raises(ConfigError):
        load_config().set("encoder.bogus", "1")
    with pytest.raises(ConfigError):
        load_config().set("encoder", "1")


# -- exit codes -----------------------------------------------------------------------

def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.main([]) == 1
    assert cli.main(["train", "nothing"]) == 1
    assert cli.main(["--set", "encoder.bogus=1", "gradcheck"]) == 1
    assert cli.main(["--config", str(tmp_path / "missing.ini"), "gradcheck"]) == 1
    assert cli.main(["eval", "mos", "--workdir", str(tmp_path)]) == 1


def test_data_errors_exit_2(tmp_path, capsys):
    wd = ["--workdir", str(tmp_path)]
    assert cli.main(wd + ["preprocess", "encoder"]) == 2
    assert cli.main(wd + ["train", "encoder"]) == 2
    bad = tmp_path / "p.csv"
    bad.write_text("a,test,4.6\n", encoding="utf-8")
    assert cli.main(wd + ["eval", "pesq", "--file", str(bad)]) == 2
    assert "row 1: score out of PESQ range" in capsys.readouterr().err


def test_eval_eer_from_score_files(tmp_path, capsys):
    (tmp_path / "g").write_text("0.9 0.8\n", encoding="utf-8")
    (tmp_path / "i").write_text("0.1\n0.2\n", encoding="utf-8")
    assert cli.main(["eval", "eer", "--genuine", str(tmp_path / "g"), "--impostor", str(tmp_path / "i")]) == 0
    assert capsys.readouterr().out.strip() == "EER 0.0000"
    assert cli.main(["eval", "eer", "--genuine", str(tmp_path / "g")]) == 1


def test_eval_mos_and_pesq(tmp_path, capsys):
    sheet = tmp_path / "m.csv"
    sheet.write_text("n1,s1\n3,4\n4,\n", encoding="utf-8")
    assert cli.main(["eval", "mos", "--sheet", str(sheet)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["naturalness"] == 3.5 and rep["similarity"] == 4.0 and rep["raters"] == 2
    pesq = tmp_path / "p.csv"
    pesq.write_text("utt_id,split,score\na,validation,2.8\nb,test,2.3\n", encoding="utf-8")
    assert cli.main(["eval", "pesq", "--file", str(pesq)]) == 0
    assert json.loads(capsys.readouterr().out)["means"] == {"validation": 2.8, "test": 2.3}


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert {r["check"] for r in rows} == {"dense", "gru_cell", "gru_sequence", "causal_conv1d", "ge2e_loss",
                                         "synthesizer_loss", "vocoder_nll"}
    assert all(r["passed"] for r in rows)


# -- whole pipeline through the command line ---------------------------------------------

TINY = [
    "toy.speakers=3", "toy.utterances=4",
    "encoder.steps=4", "encoder.speakers_per_batch=2", "encoder.utterances_per_speaker=2",
    "encoder.hidden=8", "encoder.embed_dim=6", "encoder.train_utts=3", "encoder.enroll_utts=2",
    "synth.steps=2", "synth.batch_size=2", "synth.speakers=2", "synth.utts_per_speaker=2",
    "synth.embed_dim=4", "synth.enc_hidden=4", "synth.attn_dim=4", "synth.prenet=4",
    "synth.att_rnn=6", "synth.dec_rnn=6",
    "vocoder.steps=2", "vocoder.segment=100", "vocoder.channels=4", "vocoder.hidden=8",
    "clone.max_frames=6", "dsp.griffin_lim_iterations=2",
]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    wd = tmp_path_factory.mktemp("run")
    base = ["--workdir", str(wd)] + [a for s in TINY for a in ("--set", s)]
    steps = [["toy-corpus"], ["preprocess", "encoder"], ["train", "encoder"], ["preprocess", "synth"],
             ["train", "synth"], ["preprocess", "vocoder"], ["train", "vocoder"]]
    for s in steps:
        assert cli.main(base + s) == 0, s
    return wd, base


def test_pipeline_artifacts(workdir):
    wd, _ = workdir
    for kind in ("encoder", "synthesizer", "vocoder"):
        model, step, _ = load_checkpoint(wd / "checkpoints" / f"{kind}.nvc", expected_kind=kind)
        assert step > 0
    assert len((wd / "synth" / "train.txt").read_text(encoding="utf-8").splitlines()) == 4
    assert len(cli.read_vocoder_manifest(wd / "vocoder" / "vocoder.txt")) == 4


def test_eval_eer_from_checkpoint(workdir, capsys):
    _, base = workdir
    assert cli.main(base + ["eval", "eer"]) == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith("EER ") and 0 <= float(out.split()[1]) <= 1


@pytest.mark.parametrize("vocoder", ["griffinlim", "neural"])
def test_clone_writes_wav(workdir, vocoder, capsys):
    wd, base = workdir
    ref = sorted((wd / "corpus").glob("*/*.wav"))[0]
    out = wd / f"clone_{vocoder}.wav"
    assert cli.main(base + ["clone", "--text", "नमस्ते", "--ref", str(ref), "--out", str(out),
                            "--vocoder", vocoder]) == 0
    ev = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert ev["event"] == "clone" and 1 <= ev["frames"] <= 6
    wav = fileio.read_wav(out)
    assert len(wav) == ev["samples"] and np.all(np.abs(wav) <= 1)


def test_clone_rejects_latin_text(workdir):
    wd, base = workdir
    ref = sorted((wd / "corpus").glob("*/*.wav"))[0]
    assert cli.main(base + ["clone", "--text", "hello", "--ref", str(ref), "--out", str(wd / "x.wav")]) == 2


def test_resume_with_freeze_keeps_frozen_tensors(workdir, capsys):
    wd, base = workdir
    ckpt = wd / "checkpoints" / "encoder.nvc"
    out = wd / "ft.nvc"
    assert cli.main(base + ["train", "encoder", "--resume", str(ckpt), "--freeze", "gru0.",
                            "--out", str(out)]) == 0
    before, s0, _ = load_checkpoint(ckpt)
    after, s1, _ = load_checkpoint(out)
    assert s1 == s0 + 4
    for name, p in before.params.items():
        if name.startswith("gru0."):
            np.testing.assert_array_equal(after[name], p.value)
    assert any(not np.array_equal(after[n], p.value) for n, p in before.params.items() if not n.startswith("gru0."))
    ev = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert ev["event"] == "checkpoint" and len(ev["sha256"]) == 64


def test_eval_umap(workdir, capsys):
    wd, base = workdir
    clones = wd / "clones"
    clones.mkdir(exist_ok=True)
    ref = sorted((wd / "corpus").glob("spk00/*.wav"))[0]
    fileio.write_wav(clones / "spk00_c0.wav", fileio.read_wav(ref))
    assert cli.main(base + ["eval", "umap", "--clones", str(clones), "--neighbors", "4", "--epochs", "20"]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["points"] == 13 and -1 <= ev["silhouette"] <= 1
