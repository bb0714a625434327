import os

import pytest

from attacks import robust_accuracy
from config import ExperimentConfig
from datasets import center, make_blobs
from heads import TrainConfig, train_mlp
from projection import fit_pca, project
from report_formatter import read_csv
from sweep_graph import RESULTS_FILE, attack_cells, attack_config, run_sweep

EPSILONS = [0.05, 0.1, 0.2]


def small_config(out, **update):
    values = dict(
        dataset="blobs",
        projections=["pca"],
        components=[4],
        head="mlp",
        train=TrainConfig(epochs=5, learning_rate=0.01, batch_size=32, hidden=(16,), seed=0),
        attacks=["fgsm"],
        norms=["inf"],
        epsilons=EPSILONS,
        seed=0,
        output_dir=str(out),
        blobs_train=120,
        blobs_test=40,
        blobs_side=6,
    )
    values.update(update)
    return ExperimentConfig(**values)


class TestSweep:

    def test_row_count_and_order(self, tmp_path):
        table = run_sweep(small_config(tmp_path))
        assert len(table) == 1 + len(EPSILONS)
        assert [row.attack for row in table] == ["clean", "fgsm", "fgsm", "fgsm"]
        assert [row.epsilon for row in table[1:]] == EPSILONS
        assert all(row.n == 40 for row in table)
        written = read_csv(str(tmp_path / RESULTS_FILE))
        assert [row.sort_key() for row in written] == [row.sort_key() for row in table]
        assert [row.accuracy for row in written] == pytest.approx([row.accuracy for row in table], abs=1e-6)

    def test_deterministic(self, tmp_path):
        run_sweep(small_config(tmp_path / "a"))
        run_sweep(small_config(tmp_path / "b"))
        assert (tmp_path / "a" / RESULTS_FILE).read_bytes() == (tmp_path / "b" / RESULTS_FILE).read_bytes()

    def test_matches_direct_pipeline(self, tmp_path):
        config = small_config(tmp_path)
        table = run_sweep(config)
        train, test = make_blobs(120, 40, side=6, classes=2, seed=0)
        Xc, info = center(train.X)
        projection = fit_pca(Xc, 4, centering=info)
        head, _ = train_mlp(project(projection, train.X), train.y, config.train, num_classes=2)
        for row in table[1:]:
            expected = robust_accuracy(projection, head, test, attack_config(config, "fgsm", "inf", row.epsilon))
            assert row.accuracy == pytest.approx(expected)

    def test_failed_cell_keeps_going(self, tmp_path):
        # D = 36, so r = 40 cannot be fitted
        table = run_sweep(small_config(tmp_path, components=[4, 40]))
        failed = [row for row in table if row.r == 40]
        ok = [row for row in table if row.r == 4]
        assert len(failed) == len(ok) == 1 + len(EPSILONS)
        assert all(row.accuracy is None for row in failed)
        assert all(row.accuracy is not None for row in ok)
        assert "error" in (tmp_path / RESULTS_FILE).read_text()

    def test_square_has_no_l2_cell(self, tmp_path):
        config = small_config(tmp_path, attacks=["fgsm", "square"], norms=["inf", "2"])
        assert attack_cells(config) == [("fgsm", "inf"), ("fgsm", "2"), ("square", "inf")]


class TestLinearSweep:

    @pytest.fixture(scope="class")
    def linear_run(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("linear")
        config = small_config(
            out,
            head="linear",
            projections=["pca", "spca"],
            density=0.25,
            attacks=["fgsm", "pgd"],
            norms=["inf", "2"],
            train=TrainConfig(epochs=20, learning_rate=0.05, batch_size=32, seed=0),
        )
        return out, run_sweep(config)

    def test_certified_below_attacked(self, linear_run):
        _, table = linear_run
        certified = {(r.projection, r.norm, r.epsilon): r.accuracy for r in table if r.attack == "certified"}
        assert len(certified) == 2 * 2 * len(EPSILONS)
        for r in table:
            if r.attack in ("fgsm", "pgd"):
                assert certified[(r.projection, r.norm, r.epsilon)] <= r.accuracy

    def test_artifacts(self, linear_run):
        out, _ = linear_run
        for kind in ("pca", "spca"):
            stem = f"blobs_{kind}_r4_linear"
            assert os.path.exists(out / "models" / f"{stem}.spcr")
            assert os.path.exists(out / "models" / f"{stem}.json")
            for label in ("linf", "l2"):
                lines = (out / "certificates" / f"{stem}_{label}.csv").read_text().splitlines()
                assert len(lines) == 1 + 40
