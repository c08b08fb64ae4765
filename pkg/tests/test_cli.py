import csv
import json

import pytest

from gml_lt import TemperaturePair, ensemble_predict, forward, load_checkpoint, per_class_recall, read_features, summarize
from gml_lt.cli import main

CONFIG = """\
[run]
seed = 3

[synth]
num_classes = 6
head_count = 120
imbalance_ratio = 40
dim = 6
separation = 3.0
test_per_class = 20

[model]
hidden_dim = 12

[pretrain]
epochs = 15
lr_decay_epoch = 10

[finetune]
epochs = 8
lr_decay_epoch = 5
"""


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text(CONFIG)
    return p


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture
def trained(tmp_path, config_file):
    out = tmp_path / "run"
    for cmd in ("synth", "pretrain", "finetune"):
        assert run(cmd, "--config", config_file, "--out", out) == 0
    return out


def test_synth_profile_and_balanced_test(tmp_path, capsys):
    ini = tmp_path / "s.ini"
    ini.write_text("[synth]\nnum_classes = 20\nhead_count = 200\nimbalance_ratio = 100\n")
    assert run("synth", "--config", ini, "--out", tmp_path / "o") == 0
    train = read_features(tmp_path / "o" / "train.ltfs")
    test = read_features(tmp_path / "o" / "test.ltfs")
    import numpy as np

    counts = np.bincount(train.labels)
    assert counts[0] == 200 and counts[-1] == 2
    assert set(np.bincount(test.labels).tolist()) == {50}
    meta = json.loads((tmp_path / "o" / "synth_meta.json").read_text())
    assert meta["profile"] == counts.tolist() and len(meta["means"]) == 20


def test_synth_deterministic(tmp_path, config_file):
    for name in ("a", "b"):
        assert run("synth", "--config", config_file, "--out", tmp_path / name) == 0
    for f in ("train.ltfs", "test.ltfs", "synth_meta.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_bad_ratio(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[synth]\nimbalance_ratio = 0.5\n")
    assert run("synth", "--config", ini, "--out", tmp_path / "o") == 2
    assert "imbalance_ratio" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[pretrain]\nepochz = 3\n")
    assert run("pretrain", "--config", ini, "--out", tmp_path) == 2
    assert "unknown key" in capsys.readouterr().err


def test_unknown_section_rejected(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[training]\nepochs = 3\n")
    assert run("synth", "--config", ini, "--out", tmp_path) == 2


def test_pipeline_logs_and_two_heads(trained, capsys, tmp_path, config_file):
    ck = load_checkpoint(trained / "finetuned.ckpt")
    assert ck.stage == "finetuned" and ck.bundle.old_head is not None
    pre = load_checkpoint(trained / "pretrained.ckpt")
    assert ck.bundle.backbone.w1.tobytes() == pre.bundle.backbone.w1.tobytes()
    # rerun to capture the log lines
    capsys.readouterr()
    run("finetune", "--config", config_file, "--out", trained)
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("epoch=")]
    assert len(lines) == 8
    fields = dict(kv.split("=") for kv in lines[-1].split())
    assert fields["epoch"] == "7" and float(fields["lr"]) == pytest.approx(0.01)
    float(fields["loss"])


def test_reruns_byte_identical(trained, tmp_path, config_file):
    other = tmp_path / "again"
    for cmd in ("synth", "pretrain", "finetune"):
        run(cmd, "--config", config_file, "--out", other)
    for f in ("pretrained.ckpt", "finetuned.ckpt"):
        assert (trained / f).read_bytes() == (other / f).read_bytes()


def test_seed_flag_overrides_file(trained, tmp_path, config_file):
    other = tmp_path / "seed9"
    run("synth", "--config", config_file, "--out", other, "--seed", 9)
    assert (other / "train.ltfs").read_bytes() != (trained / "train.ltfs").read_bytes()


def test_finetune_on_finetuned_is_stage_error(trained, capsys, config_file):
    code = run("finetune", "--config", config_file, "--out", trained, "--checkpoint", trained / "finetuned.ckpt")
    assert code == 4
    assert "stage mismatch" in capsys.readouterr().err


def test_finetune_missing_checkpoint(tmp_path, config_file, capsys):
    run("synth", "--config", config_file, "--out", tmp_path / "x")
    assert run("finetune", "--config", config_file, "--out", tmp_path / "x") == 3
    assert "pretrained checkpoint not found" in capsys.readouterr().err


def test_evaluate_outputs(trained, config_file):
    assert run("evaluate", "--config", config_file, "--out", trained, "--head", "new") == 0
    with open(trained / "recalls.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and list(rows[0]) == ["class_index", "train_count", "recall"]
    metrics = json.loads((trained / "metrics.json").read_text())
    header, row = (trained / "metrics.csv").read_text().splitlines()
    assert header == "accuracy,gmean,hmean,lowest,epsilon,substituted,many,medium,few"
    assert float(row.split(",")[2]) == metrics["hmean"]


def test_old_head_equals_pretrained(trained, config_file, tmp_path):
    run("evaluate", "--config", config_file, "--out", trained, "--head", "old")
    old = (trained / "metrics.json").read_bytes()
    run("evaluate", "--config", config_file, "--out", trained, "--head", "new",
        "--checkpoint", trained / "pretrained.ckpt")
    assert (trained / "metrics.json").read_bytes() == old


def test_ensemble_matches_library(trained, config_file):
    assert run("evaluate", "--config", config_file, "--out", trained, "--head", "ensemble",
               "--t-old", 1, "--t-new", 1) == 0
    cli = json.loads((trained / "metrics.json").read_text())
    b = load_checkpoint(trained / "finetuned.ckpt").bundle
    test = read_features(trained / "test.ltfs")
    _, pred = ensemble_predict(forward(b, "old", test.features), forward(b, "new", test.features), TemperaturePair(1, 1))
    lib = summarize(per_class_recall(pred, test.labels, test.num_classes))
    assert cli["hmean"] == lib.harmonic_mean and cli["accuracy"] == lib.arithmetic_mean
    assert cli["lowest"] == lib.lowest_recall


def test_ensemble_on_pretrained_fails(trained, config_file):
    code = run("evaluate", "--config", config_file, "--out", trained, "--head", "ensemble",
               "--checkpoint", trained / "pretrained.ckpt")
    assert code == 4


def test_sweep(trained, config_file):
    assert run("sweep", "--config", config_file, "--out", trained, "--grid", "1,2,3x1,2,3") == 0
    lines = (trained / "sweep.csv").read_text().splitlines()
    assert lines[0] == "t_old,t_new,accuracy,gmean,hmean,lowest" and len(lines) == 10

    assert run("sweep", "--config", config_file, "--out", trained, "--grid", "1x1") == 0
    (row,) = list(csv.DictReader(open(trained / "sweep.csv")))
    run("evaluate", "--config", config_file, "--out", trained, "--head", "ensemble")
    metrics = json.loads((trained / "metrics.json").read_text())
    assert float(row["hmean"]) == metrics["hmean"] and float(row["gmean"]) == metrics["gmean"]


def test_sweep_malformed_grid(trained, config_file):
    assert run("sweep", "--config", config_file, "--out", trained, "--grid", "1;2") == 2
