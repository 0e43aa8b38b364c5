import json
import os
import subprocess
import sys

import numpy as np
import pytest

from stacklab.checkpoint import load_checkpoint
from stacklab.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, main

SMALL = {
    "arch": {"n_g": 4, "n_z": 4, "n_d": 4, "base_channels": 4},
    "train": {"stage1_epochs": 1, "stage2_epochs": 1, "batch_size": 8, "seed": 1},
    "n_classes": 4,
    "per_class": 6,
    "samples": 16,
}


def run(argv, capsys):
    code = main(argv)
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines() if x.strip()]
    return code, lines


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    return root, str(cfg)


@pytest.fixture(scope="module")
def trained(workdir):
    root, cfg = workdir
    data, out = str(root / "data"), str(root / "run")
    assert main(["gen-data", "--config", cfg, "--out", data]) == EXIT_OK
    assert main(["train", "--config", cfg, "--data", data, "--out", out]) == EXIT_OK
    s1 = os.path.join(out, "stage1.sgck")
    assert main(["train", "--config", cfg, "--data", data, "--out", out, "--stage", "2",
                 "--stage1-checkpoint", s1]) == EXIT_OK
    return cfg, data, out


def test_gen_data_defaults(tmp_path, capsys):
    code, lines = run(["gen-data", "--out", str(tmp_path / "d")], capsys)
    assert code == EXIT_OK
    exit_line = lines[-1]
    assert exit_line["event"] == "exit" and exit_line["command"] == "gen-data"
    assert exit_line["metrics"]["records"] == 512
    assert len(exit_line["metrics"]["train_classes"]) == 6
    assert len(exit_line["metrics"]["test_classes"]) == 2
    assert os.path.exists(tmp_path / "d" / "contact_sheet.png")


def test_gen_data_byte_identical_and_refuses_overwrite(workdir, tmp_path, capsys):
    _, cfg = workdir
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["gen-data", "--config", cfg, "--out", a]) == EXIT_OK
    assert main(["gen-data", "--config", cfg, "--out", b]) == EXIT_OK
    for name in ("hi.f32", "lo.f32", "manifest.json"):
        assert open(os.path.join(a, name), "rb").read() == open(os.path.join(b, name), "rb").read()
    assert main(["gen-data", "--config", cfg, "--out", a]) == EXIT_USAGE
    assert main(["gen-data", "--config", cfg, "--out", a, "--force"]) == EXIT_OK


def test_train_artifacts(trained):
    _, _, out = trained
    for name in ("stage1.sgck", "stage2.sgck", "stage1_log.jsonl", "stage1_curves.png",
                 "run_config.train1.json", "run_config.train2.json"):
        assert os.path.exists(os.path.join(out, name)), name
    with open(os.path.join(out, "stage1.sgck"), "rb") as fh:
        assert fh.read(4) == b"SGCK"
    assert load_checkpoint(os.path.join(out, "stage2.sgck")).stage == 2


def test_train_emits_epoch_lines(workdir, trained, tmp_path, capsys):
    _, cfg = workdir
    code, lines = run(["train", "--config", cfg, "--data", trained[1], "--out", str(tmp_path), "--no-ca"], capsys)
    assert code == EXIT_OK
    epochs = [x for x in lines if x["event"] == "epoch"]
    assert len(epochs) == 1 and epochs[0]["kl_term"] == 0.0
    assert lines[-1]["metrics"]["kl_term"] == 0.0


def test_stage2_without_stage1_checkpoint(trained, tmp_path):
    cfg, data, _ = trained
    assert main(["train", "--config", cfg, "--data", data, "--out", str(tmp_path), "--stage", "2"]) == EXIT_USAGE


def test_train_refuses_existing_output(trained):
    cfg, data, out = trained
    assert main(["train", "--config", cfg, "--data", data, "--out", out]) == EXIT_USAGE


def test_sample_and_interpolate_agree(trained, tmp_path):
    cfg, data, out = trained
    ck = os.path.join(out, "stage2.sgck")
    s_dir, i_dir = str(tmp_path / "s"), str(tmp_path / "i")
    assert main(["sample", "--config", cfg, "--data", data, "--out", s_dir, "--checkpoint", ck,
                 "--zero-noise", "--samples", "2"]) == EXIT_OK
    assert main(["interpolate", "--config", cfg, "--data", data, "--out", i_dir, "--checkpoint", ck]) == EXIT_OK

    def raw(d, name):
        meta = json.load(open(os.path.join(d, name + ".json")))
        return np.fromfile(os.path.join(d, name + ".f32"), dtype="<f4").reshape(meta["shape"]), meta

    for stage in (1, 2):
        direct, _ = raw(s_dir, f"samples_stage{stage}")
        sweep, meta = raw(i_dir, f"interpolation_stage{stage}")
        assert sweep.shape[0] == 11 and meta["t"][0] == 0.0 and meta["t"][-1] == 1.0
        assert np.array_equal(sweep[0], direct[0])
        assert np.array_equal(sweep[-1], direct[-1])
        assert np.all(np.abs(sweep) <= 1)
    assert os.path.exists(os.path.join(s_dir, "samples.png"))
    assert os.path.exists(os.path.join(i_dir, "interpolation.png"))


def test_evaluate_writes_score(trained, tmp_path, capsys):
    cfg, data, out = trained
    code, lines = run(["evaluate", "--config", cfg, "--data", data, "--out", str(tmp_path),
                       "--checkpoint", os.path.join(out, "stage2.sgck")], capsys)
    assert code == EXIT_OK
    score = json.load(open(tmp_path / "score.json"))
    assert score["score"]["n_samples"] == 16
    assert 1.0 - 1e-9 <= score["score"]["mean"] <= 4 + 1e-9
    assert lines[-1]["metrics"]["inception_score"] == score["score"]["mean"]


def test_retrieve(trained, tmp_path, capsys):
    cfg, data, out = trained
    code, lines = run(["retrieve", "--config", cfg, "--data", data, "--out", str(tmp_path),
                       "--checkpoint", os.path.join(out, "stage2.sgck"), "--samples", "2"], capsys)
    assert code == EXIT_OK
    hits = [x for x in lines if x["event"] == "retrieval"]
    assert len(hits) == 2 and all(len(h["ranked"]) == 5 for h in hits)
    dists = [d for _, d in hits[0]["ranked"]]
    assert dists == sorted(dists)


def test_retrieve_needs_stage2(trained, tmp_path):
    cfg, data, out = trained
    assert main(["retrieve", "--config", cfg, "--data", data, "--out", str(tmp_path),
                 "--checkpoint", os.path.join(out, "stage1.sgck")]) == EXIT_USAGE


def test_checkpoint_config_mismatch(trained, tmp_path):
    cfg, data, out = trained
    assert main(["sample", "--config", cfg, "--data", data, "--out", str(tmp_path), "--no-ca",
                 "--checkpoint", os.path.join(out, "stage2.sgck")]) == EXIT_USAGE


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["bogus"]) == EXIT_USAGE
    assert main(["gen-data"]) == EXIT_USAGE
    assert main(["gen-data", "--out", str(tmp_path), "--resolution", "8x8"]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"batch_size": 1}}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    bad.write_text('{"nope": 1}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_io_errors(trained, tmp_path):
    cfg, _, out = trained
    missing = str(tmp_path / "nothing")
    assert main(["sample", "--config", cfg, "--data", missing, "--out", str(tmp_path / "o"),
                 "--checkpoint", os.path.join(out, "stage2.sgck")]) == EXIT_IO
    junk = tmp_path / "junk.sgck"
    junk.write_bytes(b"not a checkpoint")
    assert main(["sample", "--config", cfg, "--data", trained[1], "--out", str(tmp_path / "o"),
                 "--checkpoint", str(junk)]) == EXIT_IO


def test_thread_variable_validated(monkeypatch, tmp_path):
    monkeypatch.setenv("STACKLAB_THREADS", "zero")
    assert main(["gen-data", "--out", str(tmp_path / "d")]) == EXIT_USAGE


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stacklab", "train", "--out", str(tmp_path), "--stage", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    assert "stage1-checkpoint" in proc.stderr
