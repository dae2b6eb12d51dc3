import json
import os
import subprocess
import sys

import numpy as np
import pytest

from spmae import cli
from spmae import mae
from spmae.imageio import write_pnm

TINY = ["--size", "16", "--patch", "4", "--dim", "16", "--depth", "1", "--heads", "2",
        "--decoder-dim", "8", "--decoder-heads", "2", "--batch-size", "4"]


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out if capsys else ""
    return code, out


def tree_bytes(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            if n == "run.json":
                continue
            p = os.path.join(dirpath, n)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    assert cli.main(["gen", "--family", "dead-leaves", "--count", "8", "--size", "16", "--seed", "7",
                     "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, dataset):
    d = tmp_path_factory.mktemp("pre")
    assert cli.main(["pretrain", "--manifest", str(dataset / "manifest.json"), "--steps", "3",
                     "--out", str(d)] + TINY) == 0
    return d / "checkpoint.spma"


@pytest.fixture(scope="module")
def task(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    files = [f["path"] for f in manifest["files"]]
    doc = {"classes": ["a", "b"], "label_kind": "single",
           "train": [{"path": p, "label": i % 2} for i, p in enumerate(files[:6])],
           "test": [{"path": p, "label": i % 2} for i, p in enumerate(files[6:])]}
    path = dataset / "task.json"
    path.write_text(json.dumps(doc))
    return path


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def test_gen_writes_images_and_manifest(dataset):
    assert sorted(p for p in os.listdir(dataset) if p.endswith(".ppm")) == [f"{i:06d}.ppm" for i in range(8)]
    assert json.loads((dataset / "manifest.json").read_text())["count"] == 8
    run_doc = json.loads((dataset / "run.json").read_text())
    assert run_doc["subcommand"] == "gen" and run_doc["args"]["seed"] == 7


def test_gen_unknown_family(tmp_path, capsys):
    code = cli.main(["gen", "--family", "plaid", "--count", "2", "--out", str(tmp_path)])
    assert code == 2
    assert "unknown family 'plaid'" in capsys.readouterr().err


def test_gen_bad_param(tmp_path):
    assert run(["gen", "--family", "dead-leaves", "--count", "2", "--size", "16",
                "--param", "sigma_blur=-1", "--out", tmp_path])[0] == 2


def test_gen_repeat_is_byte_identical(tmp_path):
    args = ["gen", "--family", "spectral-noise", "--count", "3", "--size", "16", "--seed", "4"]
    assert run(args + ["--out", tmp_path / "a"])[0] == 0
    assert run(args + ["--out", tmp_path / "b"])[0] == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_missing_subcommand_is_usage_error():
    assert cli.main([]) == 2


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


def test_stats_one_manifest(dataset, tmp_path, capsys):
    code, out = run(["stats", "--manifest", dataset / "manifest.json", "--out", tmp_path], capsys)
    assert code == 0
    lines = (tmp_path / "stats.csv").read_text().splitlines()
    assert lines[0].startswith("dataset,") and len(lines) == 2


def test_stats_correlation_report(tmp_path, capsys):
    manifests = []
    for i, fam in enumerate(["dead-leaves", "spectral-noise", "shader-like"]):
        d = tmp_path / fam
        assert run(["gen", "--family", fam, "--count", "2", "--size", "16", "--out", d])[0] == 0
        manifests += ["--manifest", d / "manifest.json"]
    scores = tmp_path / "scores.csv"
    scores.write_text("dataset,score\ndead-leaves-0,0.5\nspectral-noise-0,0.2\nshader-like-0,0.9\n")
    capsys.readouterr()
    code, out = run(["stats", *manifests, "--scores", scores, "--out", tmp_path / "o"], capsys)
    assert code == 0
    r_lines = [l for l in out.splitlines() if l.startswith("r_")]
    assert len(r_lines) == 4
    assert (tmp_path / "o" / "correlation.csv").read_text().splitlines()[-1].startswith("r,")


def test_stats_constant_datasets_exit_3(tmp_path):
    manifests = []
    for i, level in enumerate([0.2, 0.5, 0.8]):
        d = tmp_path / f"c{i}"
        d.mkdir()
        write_pnm(str(d / "0.ppm"), np.full((3, 8, 8), level))
        doc = {"name": f"c{i}", "family": "constant", "width": 8, "height": 8, "channels": 3, "seed": 0,
               "count": 1, "files": [{"path": "0.ppm", "seed": 0}]}
        (d / "manifest.json").write_text(json.dumps(doc))
        manifests += ["--manifest", d / "manifest.json"]
    scores = tmp_path / "s.csv"
    scores.write_text("dataset,score\nc0,1\nc1,2\nc2,3\n")
    assert run(["stats", *manifests, "--scores", scores, "--out", tmp_path / "o"])[0] == 3


def test_stats_missing_manifest(tmp_path):
    assert run(["stats", "--manifest", tmp_path / "nope.json", "--out", tmp_path])[0] == 2


# ---------------------------------------------------------------------------
# pretrain / probe / finetune / eval
# ---------------------------------------------------------------------------


def test_pretrain_writes_spma_checkpoint(checkpoint):
    assert checkpoint.read_bytes()[:4] == b"SPMA"
    losses = (checkpoint.parent / "loss.csv").read_text().splitlines()
    assert len(losses) == 4
    assert mae.load_checkpoint(str(checkpoint)).extra["dataset"] == "dead-leaves-7"


def test_pretrain_shape_mismatch_exits_2_before_training(dataset, tmp_path):
    argv = ["pretrain", "--manifest", dataset / "manifest.json", "--steps", "3", "--out", tmp_path] + TINY
    argv[argv.index("--size") + 1] = "32"
    assert run(argv)[0] == 2
    assert not (tmp_path / "checkpoint.spma").exists()


def test_probe_leaves_encoder_untouched(checkpoint, task, tmp_path, capsys):
    code, out = run(["probe", "--checkpoint", checkpoint, "--task", task, "--epochs", "2",
                     "--batch-size", "3", "--lr", "0.1", "--out", tmp_path], capsys)
    assert code == 0
    assert out.splitlines()[-1].startswith("accuracy=")
    before = mae.load_checkpoint(str(checkpoint)).params
    after = mae.load_checkpoint(str(tmp_path / "classifier.spma")).params
    enc = [k for k in after if k.startswith("enc.")]
    assert enc and all(np.array_equal(after[k], before[k]) for k in enc)
    assert not np.all(after["head.w"] == 0)


def test_finetune_then_eval(checkpoint, task, tmp_path, capsys):
    assert run(["finetune", "--checkpoint", checkpoint, "--task", task, "--epochs", "1",
                "--batch-size", "3", "--out", tmp_path])[0] == 0
    capsys.readouterr()
    code, out = run(["eval", "--checkpoint", tmp_path / "classifier.spma", "--task", task], capsys)
    assert code == 0
    value = float(out.strip().split("=")[1])
    assert out.startswith("accuracy=") and 0.0 <= value <= 1.0


def test_eval_perfect_predictions(task, tmp_path, capsys):
    labels = [e["label"] for e in json.loads(task.read_text())["test"]]
    preds = tmp_path / "p.csv"
    preds.write_text("".join(f"{1 - l},{l}\n" for l in labels))
    code, out = run(["eval", "--predictions", preds, "--task", task], capsys)
    assert code == 0 and out.strip() == "accuracy=1.0000"


def test_eval_rejects_mae_checkpoint(checkpoint, task):
    assert run(["eval", "--checkpoint", checkpoint, "--task", task])[0] == 2


def test_adapt_collapses_channels(checkpoint, tmp_path, capsys):
    code, out = run(["adapt", "--checkpoint", checkpoint, "--height", "64", "--width", "64",
                     "--out", tmp_path], capsys)
    assert code == 0 and "channels=3->1" in out
    enc = mae.load_checkpoint(str(tmp_path / "encoder.spma"))
    assert enc.kind == "encoder" and enc.config.channels == 1 and enc.config.height == 64


def test_adapt_bad_patch_multiple(checkpoint, tmp_path):
    assert run(["adapt", "--checkpoint", checkpoint, "--height", "30", "--width", "64", "--out", tmp_path])[0] == 2


def test_corrupt_checkpoint_is_runtime_error(task, tmp_path):
    bad = tmp_path / "bad.spma"
    bad.write_bytes(b"SPMA\x01\x00garbage")
    assert run(["probe", "--checkpoint", bad, "--task", task, "--out", tmp_path / "o"])[0] == 3


# ---------------------------------------------------------------------------
# run.json / replay
# ---------------------------------------------------------------------------


def test_replay_reproduces_run(tmp_path):
    args = ["gen", "--family", "visual-atoms", "--count", "2", "--size", "16", "--seed", "3", "--out", tmp_path / "a"]
    assert run(args)[0] == 0
    first = tree_bytes(tmp_path / "a")
    for f in os.listdir(tmp_path / "a"):
        if f != "run.json":
            os.remove(tmp_path / "a" / f)
    assert run(["replay", tmp_path / "a" / "run.json"])[0] == 0
    assert tree_bytes(tmp_path / "a") == first


def test_make_tones_small(tmp_path, capsys):
    code, out = run(["make-tones", "--train", "3", "--test", "3", "--frames", "16", "--out", tmp_path], capsys)
    assert code == 0 and out.strip().endswith("task.json")
    assert json.loads((tmp_path / "run.json").read_text())["subcommand"] == "make-tones"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "spmae", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
