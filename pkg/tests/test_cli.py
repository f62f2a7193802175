import csv

import numpy as np
import pytest

from passt import frontend, net, tensorbin, train
from passt.cli import run

SMALL = ["--embed-dim", "16", "--heads", "2", "--depth", "1", "--n-classes", "3",
         "--stride", "16", "--n-frames", "101"]


@pytest.fixture
def short_wav(tmp_path):
    t = np.arange(32000) / frontend.SAMPLE_RATE
    path = tmp_path / "short.wav"
    frontend.save_pcm(path, frontend.Waveform((0.3 * np.sin(2 * np.pi * 440 * t)).astype(np.float32)))
    return path


@pytest.fixture
def small_weights(tmp_path):
    path = tmp_path / "w.tbin"
    assert run(["init-weights", *SMALL, "--out", str(path)]) == 0
    return path


def test_tokenize_structured(tone_wav, capsys):
    rc = run(["tokenize", "--stride", "10", "--patchout", "structured:4,40", "--seed", "7", str(tone_wav)])
    out = capsys.readouterr()
    assert rc == 0
    assert out.out.strip() == "patches=1188 kept=472 seq=474"
    assert out.err.startswith("# passt tokenize ") and "seed=7" in out.err


@pytest.mark.parametrize("args, line", [
    (["--stride", "16", "--patchout", "none"], "patches=496 seq=498"),
    (["--stride", "10"], "patches=1188 seq=1190"),
    (["--stride", "10", "--patchout", "unstructured:400"], "patches=1188 kept=788 seq=790"),
    (["--stride", "16", "--patchout", "structured:2,20"], "patches=496 kept=252 seq=254"),
    (["--stride", "10", "--patchout", "structured:4,40", "--eval"], "patches=1188 seq=1190"),
])
def test_tokenize_lengths(tone_wav, capsys, args, line):
    assert run(["tokenize", *args, str(tone_wav)]) == 0
    assert capsys.readouterr().out.strip() == line


def test_tokenize_dump(tone_wav, tmp_path):
    dump = tmp_path / "tok.tbin"
    assert run(["tokenize", "--stride", "16", "--patchout", "structured:2,20", "--dump", str(dump),
                str(tone_wav)]) == 0
    t = tensorbin.load(dump)
    assert t["spectrogram"].shape == (128, 1001)
    assert t["patches"].shape == (252, 256)
    assert t["provenance"].shape == (252, 2)


def test_usage_errors(capsys, tone_wav):
    assert run(["frobnicate"]) == 1
    assert run(["tokenize", "--bogus", str(tone_wav)]) == 1
    assert run([]) == 1
    assert run(["tokenize", "--stride", "abc", str(tone_wav)]) == 1
    assert "usage" in capsys.readouterr().err


def test_runtime_errors(tmp_path, capsys):
    assert run(["tokenize", str(tmp_path / "missing.wav")]) == 2
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not audio")
    assert run(["tokenize", str(bad)]) == 2
    assert run(["tokenize", "--patchout", "structured:20,0", str(tmp_path / "missing.wav")]) == 2


def test_forward_deterministic(tmp_path, small_weights, short_wav, capsys):
    a, b = tmp_path / "a.tbin", tmp_path / "b.tbin"
    assert run(["forward", "--heads", "2", "--stride", "16", "--weights", str(small_weights),
                "--out", str(a), str(short_wav)]) == 0
    assert run(["forward", "--heads", "2", "--stride", "16", "--weights", str(small_weights),
                "--out", str(b), str(short_wav)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert tensorbin.load(a)["logits"].shape == (1, 3)


def test_forward_wrong_weights(tmp_path, short_wav):
    path = tmp_path / "w.tbin"
    params = net.init_params(net.ModelConfig(embed_dim=16, heads=2, depth=1, n_classes=3))
    del params["blocks.0.mlp.fc1.weight"]
    tensorbin.save(path, params)
    assert run(["forward", "--heads", "2", "--weights", str(path), str(short_wav)]) == 2


def test_config_file_precedence(tmp_path, tone_wav, capsys, monkeypatch):
    conf = tmp_path / "run.conf"
    conf.write_text("# toy\nstride = 16\npatchout = structured:2,20\nseed=3\n")
    assert run(["tokenize", "--config", str(conf), str(tone_wav)]) == 0
    out = capsys.readouterr()
    assert out.out.strip() == "patches=496 kept=252 seq=254"
    assert "seed=3" in out.err
    assert run(["tokenize", "--config", str(conf), "--stride", "10", "--patchout", "none", str(tone_wav)]) == 0
    assert capsys.readouterr().out.strip() == "patches=1188 seq=1190"

    monkeypatch.setenv("PASST_SEED", "11")
    assert run(["tokenize", str(tone_wav)]) == 0
    assert "seed=11" in capsys.readouterr().err
    assert run(["tokenize", "--config", str(conf), str(tone_wav)]) == 0
    assert "seed=3" in capsys.readouterr().err

    conf.write_text("unknown_key = 1\n")
    assert run(["tokenize", "--config", str(conf), str(tone_wav)]) == 1


def test_ensemble_and_eval(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    y = np.eye(3)[[0, 1, 2, 0, 1, 2]]
    for name, arr in (("a", a), ("b", b)):
        tensorbin.save(tmp_path / f"{name}.tbin", {"logits": arr})
    tensorbin.save(tmp_path / "y.tbin", {"targets": y})
    out = tmp_path / "avg.tbin"
    assert run(["ensemble", str(tmp_path / "a.tbin"), str(tmp_path / "b.tbin"),
                "--out", str(out), "--targets", str(tmp_path / "y.tbin")]) == 0
    np.testing.assert_allclose(tensorbin.load(out)["logits"], (a + b) / 2)
    assert capsys.readouterr().out.startswith("mAP=")

    perfect = y * 5
    tensorbin.save(tmp_path / "p.tbin", {"logits": perfect})
    assert run(["eval", "--logits", str(tmp_path / "p.tbin"), "--targets", str(tmp_path / "y.tbin")]) == 0
    lines = capsys.readouterr().out.split()
    assert lines == ["mAP=1.000000", "accuracy=1.000000"]

    tensorbin.save(tmp_path / "c.tbin", {"logits": a[:4]})
    assert run(["ensemble", str(tmp_path / "a.tbin"), str(tmp_path / "c.tbin"), "--out", str(out)]) == 2


def test_crop_time_pos(tmp_path, small_weights):
    out = tmp_path / "crop.tbin"
    assert run(["crop-time-pos", "--heads", "2", "--stride", "16", "--weights", str(small_weights),
                "--length", "3", "--out", str(out)]) == 0
    before, after = tensorbin.load(small_weights), tensorbin.load(out)
    assert after["time_pos"].tobytes() == before["time_pos"][:3].tobytes()
    assert run(["crop-time-pos", "--heads", "2", "--stride", "16", "--weights", str(small_weights),
                "--length", "99", "--out", str(out)]) == 2


def test_train_toy(tmp_path, capsys):
    w, m = tmp_path / "w.tbin", tmp_path / "m.csv"
    rc = run(["train-toy", "--synthetic", "4", *SMALL, "--clip-seconds", "1", "--batch-size", "2",
              "--max-steps", "2", "--lr-max", "1e-3", "--lr-min", "1e-5", "--warm-hold-epochs", "1",
              "--decay-end-epoch", "2", "--finetune-epochs", "1", "--patchout", "structured:1,1",
              "--out", str(w), "--metrics", str(m)])
    assert rc == 0
    assert capsys.readouterr().out.startswith("steps=2 ")
    assert set(tensorbin.load(w)) == set(net.param_shapes(net.infer_config(tensorbin.load(w), 2, 16, 16)))
    rows = list(csv.reader(open(m)))
    assert rows[0] == ["epoch", "step", "loss", "lr", "train_map"]


def test_train_toy_manifest(tmp_path, capsys):
    manifest = train.write_dataset(tmp_path / "ds", train.synthetic_dataset(3, 3, seconds=1.0))
    rc = run(["train-toy", "--manifest", manifest, *SMALL, "--clip-seconds", "1", "--batch-size", "3",
              "--max-steps", "1", "--lr-max", "1e-3", "--lr-min", "1e-5", "--warm-hold-epochs", "1",
              "--decay-end-epoch", "2", "--finetune-epochs", "1", "--out", str(tmp_path / "w.tbin")])
    assert rc == 0


def test_bench(tmp_path, capsys):
    out, fig = tmp_path / "b.csv", tmp_path / "f.csv"
    rc = run(["bench", "--embed-dim", "16", "--heads", "2", "--depth", "1", "--n", "32,16",
              "--batch", "1", "--repeats", "1", "--out", str(out), "--figure", str(fig)])
    assert rc == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["n"] for r in rows] == ["16", "32"]
    assert list(csv.DictReader(open(fig)))[0].keys() == {"n", "speed", "mem", "map"}
    assert run(["bench", "--n", "16", "--batch", "0", "--depth", "1", "--embed-dim", "16", "--heads", "2"]) == 2
