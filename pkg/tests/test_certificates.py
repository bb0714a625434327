import itertools

import numpy as np
import pytest

from certificates import (
    ThreatModel,
    certified_accuracy_curve,
    certified_radius_binary,
    certified_radius_multiclass,
    certify_dataset,
    dual_norm_bound_report,
    dual_norms,
    exact_inf_to_2,
    margin_report,
    operator_norm_diagnostics,
    sensitivity_bound,
)
from datasets import center
from errors import ParameterError, SizeError, UnsupportedHeadError
from heads import Classifier, LinearHead, lipschitz_upper_bound
from numerics import spectral_norm
from projection import fit_pca, fit_spca, linear_projection


def worst_case(W, u, y, eps, p):
    g = W.T @ u
    if p == "inf":
        return -y * eps * np.sign(g)
    return -y * eps * g / np.linalg.norm(g)


class TestBinary:

    def test_closed_form_example(self):
        W = np.eye(2)
        u = np.array([1.0, -2.0])
        x = np.array([3.0, 0.5])
        # margin 3 - 1 = 2; dual norms 3 (l1) and sqrt(5) (l2)
        assert certified_radius_binary(W, u, 0.0, x, 1, "inf") == pytest.approx(2.0 / 3.0)
        assert certified_radius_binary(W, u, 0.0, x, 1, "2") == pytest.approx(2.0 / np.sqrt(5))

    def test_misclassified_has_zero_radius(self):
        assert certified_radius_binary(np.eye(2), np.array([1.0, 0.0]), 0.0, np.array([1.0, 0.0]), -1, "inf") == 0.0

    def test_zero_dual_norm(self):
        r = certified_radius_binary(np.zeros((2, 3)), np.ones(2), 1.0, np.ones(3), 1, "2")
        assert r == float("inf")

    def test_rejects_bad_label(self):
        with pytest.raises(ParameterError):
            certified_radius_binary(np.eye(2), np.ones(2), 0.0, np.ones(2), 0, "inf")

    @pytest.mark.parametrize("p", ["inf", "2"])
    def test_tight(self, p):
        rng = np.random.default_rng(7 if p == "inf" else 8)
        for _ in range(100):
            D = int(rng.integers(2, 13))
            r = int(rng.integers(1, D + 1))
            W = rng.standard_normal((r, D))
            u = rng.standard_normal(r)
            b_proj, b_head = rng.standard_normal(r), float(rng.standard_normal())
            x = rng.standard_normal(D)
            score = u @ (W @ x + b_proj) + b_head
            y = 1 if score > 0 else -1
            radius = certified_radius_binary(W, u, b_head, x, y, p, b_proj=b_proj)
            margin = y * score
            assert radius == pytest.approx(margin / (np.abs(W.T @ u).sum() if p == "inf" else np.linalg.norm(W.T @ u)),
                                           rel=1e-10)

            def perturbed(factor):
                x_adv = x + worst_case(W, u, y, factor * radius, p)
                return y * (u @ (W @ x_adv + b_proj) + b_head)

            assert perturbed(0.99) > 0
            assert perturbed(1.01) < 0


class TestMulticlass:

    def test_two_classes_match_binary(self, rng):
        W = rng.standard_normal((3, 5))
        U = rng.standard_normal((3, 2))
        biases = rng.standard_normal(2)
        x = rng.standard_normal(5)
        pred, radius = certified_radius_multiclass(W, U, biases, x, "inf")
        y = 1 if pred == 1 else -1
        binary = certified_radius_binary(W, U[:, 1] - U[:, 0], float(biases[1] - biases[0]), x, y, "inf")
        assert radius == pytest.approx(binary, rel=1e-12)

    def test_sound_on_linf_ball_vertices(self):
        rng = np.random.default_rng(31)
        D = 4
        vertices = np.array(list(itertools.product([-1.0, 1.0], repeat=D)))
        for _ in range(200):
            W = rng.standard_normal((3, D))
            U = rng.standard_normal((3, 3))
            biases = rng.standard_normal(3)
            x = rng.standard_normal(D)
            pred, radius = certified_radius_multiclass(W, U, biases, x, "inf")
            if radius == 0.0:
                continue
            surface = np.vstack([vertices, np.sign(rng.standard_normal((50, D)))])
            X_adv = x + 0.99 * radius * surface
            logits = (X_adv @ W.T) @ U + biases
            assert np.all(np.argmax(logits, axis=1) == pred)

    def test_l2_worst_direction_flips_just_past_radius(self, rng):
        for _ in range(50):
            W = rng.standard_normal((3, 6))
            U = rng.standard_normal((3, 3))
            biases = rng.standard_normal(3)
            x = rng.standard_normal(6)
            pred, radius = certified_radius_multiclass(W, U, biases, x, "2")
            z = W @ x
            logits = z @ U + biases
            ratios = [(logits[pred] - logits[k]) / np.linalg.norm(W.T @ (U[:, pred] - U[:, k]))
                      for k in range(3) if k != pred]
            k = [k for k in range(3) if k != pred][int(np.argmin(ratios))]
            g = W.T @ (U[:, pred] - U[:, k])
            x_adv = x - 1.01 * radius * g / np.linalg.norm(g)
            adv = (W @ x_adv) @ U + biases
            assert adv[k] > adv[pred]


class TestDataset:

    def test_records(self, blobs, pca_linear):
        _, test = blobs
        projection, head = pca_linear
        records = certify_dataset(projection, head, test, "inf")
        assert len(records) == test.N
        for rec in records:
            assert rec.radius >= 0
            if not rec.correct:
                assert rec.radius == 0.0
            elif rec.radius > 0:
                assert rec.radius == pytest.approx(rec.margin / rec.dual_norm)

    def test_curve_is_monotone(self, blobs, pca_linear):
        _, test = blobs
        projection, head = pca_linear
        curve = certified_accuracy_curve(projection, head, test, "2", [0.0, 0.01, 0.05, 0.1, 0.5])
        accs = [a for _, a in curve]
        assert all(a >= b for a, b in zip(accs, accs[1:]))

    def test_curve_rejects_unsorted(self, blobs, pca_linear):
        _, test = blobs
        projection, head = pca_linear
        with pytest.raises(ParameterError):
            certified_accuracy_curve(projection, head, test, "inf", [0.1, 0.05])

    def test_mlp_unsupported(self, blobs3, spca_mlp):
        _, test = blobs3
        projection, head = spca_mlp
        with pytest.raises(UnsupportedHeadError):
            certify_dataset(projection, head, test, "inf")
        with pytest.raises(TypeError):
            dual_norm_bound_report(projection, head)

    def test_margin_report(self, blobs, pca_linear):
        _, test = blobs
        projection, head = pca_linear
        summary = margin_report(projection, head, test, "inf")
        radii = [r.radius for r in certify_dataset(projection, head, test, "inf") if r.correct]
        assert summary.n_correct == len(radii)
        assert summary.median_radius == pytest.approx(float(np.median(radii)))


class TestNormBounds:

    @pytest.fixture(params=["pca", "spca"])
    def fitted(self, request, rng):
        X = rng.standard_normal((120, 10)) @ rng.standard_normal((10, 10))
        Xc, _ = center(X)
        if request.param == "pca":
            return fit_pca(Xc, 4)
        return fit_spca(Xc, 4, 0.3)

    def test_column_norm_dual_bounds(self, fitted, rng):
        W = fitted.W
        col_sum = np.linalg.norm(W, axis=0).sum()
        spec = spectral_norm(W)
        for _ in range(1000):
            u = rng.standard_normal(W.shape[0])
            l1, l2 = dual_norms(W, u)
            nu = np.linalg.norm(u)
            assert l1 <= nu * col_sum * (1 + 1e-9)
            assert l2 <= nu * spec * (1 + 1e-9)

    def test_operator_norm_sandwich(self, fitted):
        report = operator_norm_diagnostics(fitted.W)
        exact = report.exact_inf_to_2
        assert exact is not None
        assert report.col_norm_max <= exact * (1 + 1e-9)
        assert exact <= min(report.col_norm_sum, report.sqrt_d_spectral) * (1 + 1e-9)

    def test_dual_norm_bound_report_holds(self, fitted, rng):
        head = LinearHead(U=rng.standard_normal((4, 3)), biases=np.zeros(3))
        check = dual_norm_bound_report(fitted, head)
        assert check.pairs == 3
        assert check.holds

    def test_exact_inf_to_2_examples(self):
        assert exact_inf_to_2(np.eye(3)) == pytest.approx(np.sqrt(3))
        assert exact_inf_to_2(np.array([[1.0, 1.0]])) == pytest.approx(2.0)
        assert exact_inf_to_2(np.array([[1.0, -1.0], [2.0, 0.0]])) == pytest.approx(np.sqrt(8))

    def test_exact_inf_to_2_size_limit(self):
        with pytest.raises(SizeError):
            exact_inf_to_2(np.ones((1, 21)))
        assert operator_norm_diagnostics(np.ones((1, 21))).exact_inf_to_2 is None

    def test_sensitivity_bound(self, rng):
        W = rng.standard_normal((3, 6))
        head = LinearHead(U=rng.standard_normal((3, 2)), biases=np.zeros(2))
        bound = sensitivity_bound(linear_projection(W), head)
        L = lipschitz_upper_bound(head)
        assert bound.lipschitz_head == pytest.approx(L)
        assert bound.l2 == pytest.approx(L * spectral_norm(W))
        assert bound.for_norm("inf") == pytest.approx(L * np.linalg.norm(W, axis=0).sum())

    def test_sensitivity_bound_on_random_pairs(self, rng):
        W = rng.standard_normal((3, 6))
        head = LinearHead(U=rng.standard_normal((3, 2)), biases=rng.standard_normal(2))
        projection = linear_projection(W, rng.standard_normal(3))
        bound = sensitivity_bound(projection, head)
        model = Classifier(projection=projection, head=head)
        X1, X2 = rng.uniform(size=(10000, 6)), rng.uniform(size=(10000, 6))
        diff = np.linalg.norm(model.logits(X1) - model.logits(X2), axis=1)
        assert np.all(diff <= bound.l2 * np.linalg.norm(X1 - X2, axis=1) * (1 + 1e-12))
        assert np.all(diff <= bound.for_norm("inf") * np.abs(X1 - X2).max(axis=1) * (1 + 1e-12))


class TestThreatModel:

    def test_label(self):
        assert ThreatModel(p="inf", epsilon=0.1).label == "linf"
        assert ThreatModel(p="2", epsilon=0.1).label == "l2"

    def test_negative_epsilon(self):
        with pytest.raises(ValueError):
            ThreatModel(p="inf", epsilon=-0.1)
