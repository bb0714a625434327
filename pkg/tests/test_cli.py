import os

import pytest

from cli import main
from persistence import load_model
from report_formatter import read_csv

SMOKE = """\
dataset=blobs
blobs_train=120
blobs_test=30
blobs_side=6
projection=pca
r=4
head=linear
epochs=5
learning_rate=0.05
batch_size=32
attack=fgsm
norm=inf
epsilon=0.05,0.1
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "smoke.cfg"
    path.write_text(SMOKE, encoding="utf-8")
    return str(path)


def run(cfg, out, *args):
    return main(["--config", cfg, "--out", str(out), *args])


class TestCommands:

    def test_fit_train_attack_certify(self, cfg, tmp_path, capsys):
        out = tmp_path / "out"
        assert run(cfg, out, "fit", "--kind", "spca", "-r", "3", "--density", "0.25") == 0
        projection_file = out / "models" / "blobs_spca_r3.spcr"
        projection, head = load_model(str(projection_file))
        assert head is None and projection.r == 3

        assert run(cfg, out, "train", "--projection", str(projection_file)) == 0
        model_file = out / "models" / "blobs_spca_r3_linear.spcr"
        assert load_model(str(model_file))[1] is not None

        capsys.readouterr()
        assert run(cfg, out, "attack", "--model", str(model_file)) == 0
        lines = [line for line in capsys.readouterr().out.splitlines() if line.startswith("fgsm")]
        assert len(lines) == 2

        assert run(cfg, out, "certify", "--model", str(model_file), "--norm", "2") == 0
        assert os.path.exists(out / "certificates" / "blobs_spca_r3_linear_l2.csv")

        assert run(cfg, out, "dump-advex", "--model", str(model_file), "--count", "2", "--epsilon", "0.1") == 0
        assert os.path.exists(out / "advex" / "grid.pgm")

    def test_sweep_then_plot(self, cfg, tmp_path):
        out = tmp_path / "out"
        assert run(cfg, out, "sweep") == 0
        rows = read_csv(str(out / "results.csv"))
        assert {row.attack for row in rows} == {"clean", "certified", "fgsm"}
        assert run(cfg, out, "plot") == 0
        assert (out / "curves.svg").read_text(encoding="utf-8").startswith("<?xml")

    def test_projection_only_model_cannot_attack(self, cfg, tmp_path):
        out = tmp_path / "out"
        assert run(cfg, out, "fit", "--kind", "pca") == 0
        assert run(cfg, out, "attack", "--model", str(out / "models" / "blobs_pca_r4.spcr")) == 1

    def test_errors_return_one(self, cfg, tmp_path):
        assert run(cfg, tmp_path, "fit", "--density", "2") == 1
        assert run(cfg, tmp_path, "plot", "--results", str(tmp_path / "missing.csv")) == 1
        assert main(["--config", str(tmp_path / "absent.cfg"), "sweep"]) == 1


@pytest.mark.skipif(bool(os.getenv("MNIST_DIR")), reason="MNIST_DIR is set")
def test_warns_when_dataset_dir_unset(tmp_path, monkeypatch, caplog):
    monkeypatch.setattr("config.Config.MNIST_DIR", None)
    path = tmp_path / "mnist.cfg"
    path.write_text("dataset=mnist\n", encoding="utf-8")
    with caplog.at_level("WARNING"):
        assert main(["--config", str(path), "plot", "--results", str(tmp_path / "missing.csv")]) == 1
    assert "MNIST_DIR not set" in caplog.text
