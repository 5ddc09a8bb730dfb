import subprocess
import sys

import numpy as np
import pytest
import yaml

from errnet import cli
from errnet.imaging import load_image, read_manifest, save_image

from conftest import backbone_spec

TINY = [
    "--set", "generator.width=16", "--set", "generator.num_blocks=2", "--set", "generator.cwc_reduction=4",
    "--set", "train.epochs=1", "--set", "train.lr_milestones=[]", "--set", "train.crop_size=32",
    "--set", "train.steps_per_epoch=2", "--set", f"backbone.weights={backbone_spec()}",
]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    assert run("--set", "synthesis.crop_size=48", "synthesize", "--out", out, "--procedural", 4, "--count", 6,
               "--misaligned-fraction", 0.5, "--seed", 3) == 0
    return out


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run(*TINY, "train", "--manifest", corpus / "manifest.txt", "--out", out) == 0
    return out


def test_help_lists_commands():
    res = subprocess.run([sys.executable, "-m", "errnet.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synthesize", "train", "finetune-unaligned", "infer", "evaluate", "ablate", "sensitivity-study"):
        assert cmd in res.stdout


def test_synthesize_layout(corpus):
    entries = read_manifest(corpus / "manifest.txt")
    assert len(entries) == 6
    assert {e.aligned for e in entries} == {True, False}
    img = load_image(entries[0].input_path)
    assert img.shape == (48, 48, 3)
    assert len(list((corpus / "reflection").iterdir())) == 6
    assert not (corpus / "FAILED").exists() and not (corpus / ".lock").exists()


def test_train_outputs(trained):
    for name in ("final.pt", "losses.csv", "config.yaml"):
        assert (trained / name).exists()
    cfg = yaml.safe_load((trained / "config.yaml").read_text())
    assert cfg["generator"]["width"] == 16 and cfg["command"]["name"] == "train"
    assert (trained / "checkpoints" / "epoch_001.pt").exists()


def test_finetune_and_zero_epochs(corpus, trained, tmp_path):
    assert run(*TINY, "finetune-unaligned", "--checkpoint", trained / "final.pt", "--manifest",
               corpus / "manifest.txt", "--epochs", 1, "--out", tmp_path / "ft") == 0
    assert (tmp_path / "ft" / "final.pt").exists()
    assert run(*TINY, "finetune-unaligned", "--checkpoint", trained / "final.pt", "--manifest",
               corpus / "manifest.txt", "--epochs", 0, "--out", tmp_path / "ft0") == 0
    import torch
    a = torch.load(trained / "final.pt", weights_only=False)["generator"]
    b = torch.load(tmp_path / "ft0" / "final.pt", weights_only=False)["generator"]
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_infer_order_dims_determinism(trained, tmp_path, rng):
    inputs = []
    for i, (h, w) in enumerate([(40, 50), (33, 64), (64, 36)]):
        p = tmp_path / f"img{i}.png"
        save_image(p, rng.random((h, w, 3)))
        inputs.append(p)
    for out in ("o1", "o2"):
        assert run(*TINY, "infer", "--checkpoint", trained / "final.pt", "--out", tmp_path / out, *inputs) == 0
    names = (tmp_path / "o1" / "outputs.txt").read_text().split()
    assert names == ["0000_img0.png", "0001_img1.png", "0002_img2.png"]
    for name, src in zip(names, inputs):
        a, b = load_image(tmp_path / "o1" / name), load_image(tmp_path / "o2" / name)
        assert a.shape == load_image(src).shape
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1


def test_infer_rejects_small_and_corrupt(trained, tmp_path, rng):
    small = tmp_path / "small.png"
    save_image(small, rng.random((16, 16, 3)))
    assert run(*TINY, "infer", "--checkpoint", trained / "final.pt", "--out", tmp_path / "a", small) == 3
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    img = tmp_path / "ok.png"
    save_image(img, rng.random((32, 32, 3)))
    assert run(*TINY, "infer", "--checkpoint", bad, "--out", tmp_path / "b", img) == 3
    assert (tmp_path / "b" / "FAILED").exists()


def test_evaluate_identity(corpus, tmp_path):
    out = tmp_path / "ev"
    assert run("evaluate", "--checkpoint", "identity", "--manifest", corpus / "manifest.txt", "--dataset", "syn",
               "--out", out) == 0
    for name in ("metrics.csv", "input_metrics.csv", "table.txt", "skipped.txt"):
        assert (out / name).exists()
    def values(name):
        return [r.split(",")[2:] for r in (out / name).read_text().splitlines()[1:]]
    assert values("metrics.csv") == values("input_metrics.csv")
    n_aligned = sum(e.aligned for e in read_manifest(corpus / "manifest.txt"))
    assert len(values("metrics.csv")) == n_aligned + 1  # plus the mean row
    assert len((out / "skipped.txt").read_text().split()) == 6 - n_aligned


def test_evaluate_trained(corpus, trained, tmp_path):
    assert run(*TINY, "evaluate", "--checkpoint", trained / "final.pt", "--manifest", corpus / "manifest.txt",
               "--out", tmp_path) == 0
    assert "PSNR" in (tmp_path / "table.txt").read_text()


def test_ablate(corpus, tmp_path):
    out = tmp_path / "abl"
    assert run(*TINY, "ablate", "--manifest", corpus / "manifest.txt", "--eval-manifest", corpus / "manifest.txt",
               "--arms", "BaseNet", "ERRNet", "--out", out) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0].startswith("arm,psnr") and len(rows) == 3
    assert (out / "BaseNet" / "checkpoints").exists()


def test_sensitivity_study(tmp_path):
    out = tmp_path / "sens"
    assert run("--set", f"backbone.weights={backbone_spec()}", "sensitivity-study", "--procedural", 10, "--size", 64,
               "--out", out) == 0
    rows = [r.split(",") for r in (out / "sensitivity.csv").read_text().splitlines()]
    assert rows[0][:2] == ["shift", "pixel"] and "conv5_2" in rows[0]
    assert [r[0] for r in rows[1:]] == ["0", "5", "10", "20"]
    assert all(float(v) == 0 for v in rows[1][1:])
    assert (out / "sensitivity_pairs.csv").exists()


def test_sensitivity_small_corpus(tmp_path):
    assert run("--set", "backbone.weights=random", "sensitivity-study", "--procedural", 5, "--out", tmp_path) == 2


def test_exit_codes(corpus, tmp_path, monkeypatch):
    # config errors
    assert run("--set", "generator.nope=1", "train", "--manifest", "x", "--out", tmp_path / "a") == 2
    assert run("--set", "train.base_lr=0", "train", "--manifest", "x", "--out", tmp_path / "a") == 2
    monkeypatch.delenv("ERRNET_VGG19_WEIGHTS", raising=False)
    assert run("--set", "backbone.weights=/no/such/vgg.pth", "train", "--manifest", corpus / "manifest.txt",
               "--out", tmp_path / "b") == 2
    # data errors
    assert run(*TINY, "train", "--manifest", tmp_path / "missing.txt", "--out", tmp_path / "c") == 3
    assert (tmp_path / "c" / "FAILED").exists()
    assert (tmp_path / "c" / "config.yaml").exists()


def test_numeric_failure_exit(corpus, tmp_path):
    out = tmp_path / "nan"
    assert run(*TINY, "--set", "train.base_lr=1e30", "--set", "train.steps_per_epoch=20", "train",
               "--manifest", corpus / "manifest.txt", "--out", out) == 4
    assert (out / "FAILED").exists()
    assert list(out.glob("nonfinite_step*.pt"))


def test_lock_prevents_concurrent_runs(corpus, tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("123")
    assert run(*TINY, "train", "--manifest", corpus / "manifest.txt", "--out", out) == 2
    assert (out / ".lock").exists() and not (out / "final.pt").exists()


def test_config_file_and_override_precedence(corpus, tmp_path):
    cfgfile = tmp_path / "c.yaml"
    cfgfile.write_text("generator:\n  width: 24\n  num_blocks: 1\n")
    out = tmp_path / "run"
    assert run("--config", cfgfile, *TINY, "train", "--manifest", corpus / "manifest.txt", "--out", out) == 0
    cfg = yaml.safe_load((out / "config.yaml").read_text())
    assert cfg["generator"]["width"] == 16 and cfg["generator"]["num_blocks"] == 2
    cfgfile.write_text("generator:\n  width: 24\n")
    assert run("--config", cfgfile, "--set", f"backbone.weights={backbone_spec()}", "--set", "train.epochs=1",
               "--set", "train.lr_milestones=[]", "--set", "train.steps_per_epoch=1", "--set",
               "train.crop_size=32", "--set", "generator.num_blocks=1", "--set", "generator.cwc_reduction=4",
               "train", "--manifest", corpus / "manifest.txt", "--out", tmp_path / "run2") == 0
    assert yaml.safe_load((tmp_path / "run2" / "config.yaml").read_text())["generator"]["width"] == 24
