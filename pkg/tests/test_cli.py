import json

import numpy as np
import pytest

from mtfa.cli import main, resolve_class_defaults
from mtfa.features import AudioClip, load_spectrogram, write_wav
from mtfa.model import ModelConfig, MtfaModel, read_checkpoint, save_checkpoint
from mtfa.training import TrainingConfigError

SYNTH = ["--count", "1", "--background-only", "1", "--clip-seconds", "3", "--sample-rate", "16000"]


def tree_bytes(root, skip=("run_manifest.json",)):
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synthesize", "--out", str(root), *SYNTH, "--seed", "7", "--presence", "1"]) == 0
    return root


def test_synthesize_deterministic(tmp_path, dataset):
    assert main(["synthesize", "--out", str(tmp_path), *SYNTH, "--seed", "7", "--presence", "1"]) == 0
    assert tree_bytes(tmp_path) == tree_bytes(dataset)
    a = json.loads((tmp_path / "run_manifest.json").read_text())
    b = json.loads((dataset / "run_manifest.json").read_text())
    for m in (a, b):
        m.pop("wall_clock_seconds")
        m.pop("outputs")
    assert a == b and a["seed"] == 7 and a["config"]["presence_prob"] == 1.0


def test_synthesize_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synthesize", "--count", "1"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_synthesize_bad_presence_names_flag(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synthesize", "--out", str(tmp_path), "--presence", "1.5"])
    assert exc.value.code == 2
    assert "--presence" in capsys.readouterr().err


def test_synthesize_missing_events_dir_is_io_error(tmp_path):
    rc = main(["synthesize", "--out", str(tmp_path / "o"), "--events-dir", str(tmp_path / "nope"),
               "--backgrounds-dir", str(tmp_path)])
    assert rc == 3


def test_synthesize_from_directories(tmp_path):
    rng = np.random.default_rng(0)
    for label in ("knock", "ring"):
        (tmp_path / "ev" / label).mkdir(parents=True)
        write_wav(tmp_path / "ev" / label / "a.wav", AudioClip(0.3 * rng.standard_normal(4000), 8000))
    (tmp_path / "bg").mkdir()
    write_wav(tmp_path / "bg" / "b.wav", AudioClip(0.05 * rng.standard_normal(40000), 8000))
    rc = main(["synthesize", "--events-dir", str(tmp_path / "ev"), "--backgrounds-dir", str(tmp_path / "bg"),
               "--out", str(tmp_path / "out"), "--count", "2", "--clip-seconds", "2", "--presence", "1"])
    assert rc == 0
    assert len(list((tmp_path / "out" / "audio").glob("*.wav"))) == 4
    labels = {line.split("\t")[3].strip() for line in (tmp_path / "out" / "annotations.tsv").read_text().splitlines()}
    assert labels == {"knock", "ring"}


def test_featurize_idempotent_and_reports_corrupt(tmp_path, dataset):
    wavs = tmp_path / "wavs"
    wavs.mkdir()
    for p in (dataset / "audio").glob("*.wav"):
        (wavs / p.name).write_bytes(p.read_bytes())
    (wavs / "broken.wav").write_bytes(b"RIFF\x10\x00\x00\x00WAVEjunk")
    assert main(["featurize", "--wav-dir", str(wavs), "--out", str(tmp_path / "f1")]) == 3
    assert main(["featurize", "--wav-dir", str(wavs), "--out", str(tmp_path / "f2")]) == 3
    assert tree_bytes(tmp_path / "f1") == tree_bytes(tmp_path / "f2")
    specs = sorted((tmp_path / "f1").glob("*.mtfaspec"))
    assert len(specs) == 4 and not (tmp_path / "f1" / "broken.mtfaspec").exists()
    manifest = json.loads((tmp_path / "f1" / "run_manifest.json").read_text())
    assert manifest["config"]["failed"] == ["broken.wav"]
    assert load_spectrogram(specs[0]).frames.shape == (151, 128)


def test_class_defaults_resolution():
    assert resolve_class_defaults("gunshot", None, None) == (0.4, 0.4)
    assert resolve_class_defaults("babycry", None, None) == (0.3, 0.4)
    assert resolve_class_defaults("glassbreak", None, None) == (0.3, 0.2)
    assert resolve_class_defaults("custom", 0.1, 0.5) == (0.1, 0.5)
    with pytest.raises(TrainingConfigError):
        resolve_class_defaults("custom", 0.1, None)


def test_train_unknown_class_exit_4(tmp_path, dataset):
    assert main(["train", "--data", str(dataset), "--class", "custom", "--out", str(tmp_path)]) == 4


def test_train_bad_patience_exit_4(tmp_path, dataset):
    rc = main(["train", "--data", str(dataset), "--class", "beep", "--out", str(tmp_path), "--patience", "0"])
    assert rc == 4


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--data", str(dataset), "--class", "babycry", "--out", str(out), "--channels", "2",
               "--units", "2", "--max-epochs", "2", "--validation-fraction", "0.25"])
    assert rc == 0
    return out


def test_train_outputs(trained):
    assert (trained / "loss.png").stat().st_size > 0
    cfg, _ = read_checkpoint(trained / "model.ckpt")
    assert cfg.threshold == 0.4 and cfg.dropout_rate == 0.3 and cfg.class_name == "babycry"
    manifest = json.loads((trained / "run_manifest.json").read_text())
    assert manifest["config"]["model"]["threshold"] == 0.4
    assert manifest["config"]["training"]["learning_rate"] == 0.001
    assert len((trained / "train_log.jsonl").read_text().splitlines()) == 2


def test_infer_and_dump_attention(tmp_path, dataset, trained):
    det = tmp_path / "det.tsv"
    rc = main(["infer", "--ckpt", str(trained / "model.ckpt"), "--wav-dir", str(dataset / "audio"),
               "--out", str(det), "--dump-attention", str(tmp_path / "att"), "--threshold", "0.5"])
    assert rc == 0
    names = {line.split("\t")[0].strip() for line in det.read_text().splitlines()}
    assert names == {p.name for p in (dataset / "audio").glob("*.wav")}
    manifest = json.loads(det.with_suffix(".manifest.json").read_text())
    assert manifest["config"]["median_frames"] == 27 and manifest["config"]["threshold"] == 0.5
    stem = "beep_0000"
    assert len(list((tmp_path / "att").glob(f"{stem}_mask_scale*.pgm"))) == 4
    head = (tmp_path / "att" / f"{stem}_mask_scale1.pgm").read_bytes()[:20]
    # time runs horizontally, frequency vertically
    assert head.startswith(b"P5\n76 64\n255\n")
    assert np.load(tmp_path / "att" / f"{stem}_spectrogram.npy").shape == (151, 128)
    assert (tmp_path / "att" / f"{stem}_attention.png").exists()


def test_infer_checkpoint_mismatch_exit_5(tmp_path, dataset):
    cfg = ModelConfig(channels=2, units=2)
    records = MtfaModel(cfg).snapshot()
    records["rnn.forward_dirs.0.w_ih"] = np.zeros((3, 3), np.float32)
    save_checkpoint(tmp_path / "bad.ckpt", cfg, records)
    rc = main(["infer", "--ckpt", str(tmp_path / "bad.ckpt"), "--wav-dir", str(dataset / "audio"),
               "--out", str(tmp_path / "d.tsv")])
    assert rc == 5


def test_evaluate_identity_and_empty(tmp_path, dataset, capsys):
    ref = dataset / "annotations.tsv"
    assert main(["evaluate", "--ref", str(ref), "--det", str(ref), "--out", str(tmp_path / "r.tsv")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "class\tNref\tNpred\tTP\tFP\tFN\tER\tF1\tER|F1"
    assert out.splitlines()[-1].endswith("0.00|100.0")
    assert (tmp_path / "r.png").stat().st_size > 0
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    assert main(["evaluate", "--ref", str(ref), "--det", str(empty)]) == 0
    assert capsys.readouterr().out.splitlines()[-1].endswith("1.00|0.0")


def test_evaluate_missing_file_exit_3(tmp_path):
    assert main(["evaluate", "--ref", str(tmp_path / "a.tsv"), "--det", str(tmp_path / "b.tsv")]) == 3


def test_subcommand_help(capsys):
    for cmd in ("synthesize", "featurize", "train", "infer", "evaluate"):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
    assert "--median-ms" in capsys.readouterr().out
