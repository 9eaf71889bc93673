import math

import numpy as np
import pytest

from mudal.bounds import (BoundParams, BoundReport, bound_ordering_diag,
                          complexity_ratio, empirical_bound, hoeffding_term,
                          verify_optimal_beta)
from mudal.data import MultiDomainDataset, init_pool
from mudal.models import ModelBundle
from mudal.nn import DenseNet, Layer
from mudal.simplex import project_simplex


def onehot_dataset(n_domains=2, per=12, n_classes=2):
    """Features are scaled one-hot labels, identical across domains."""
    feats, labels = [], []
    for _ in range(n_domains):
        y = np.arange(per) % n_classes
        x = np.zeros((per, n_classes))
        x[np.arange(per), y] = 10.0
        feats.append(x)
        labels.append(y.astype(np.int64))
    return MultiDomainDataset([f.copy() for f in feats], [l.copy() for l in labels],
                              [f.copy() for f in feats], [l.copy() for l in labels],
                              n_classes)


def passthrough_bundle(c=2, n_domains=2, disc_zero=True):
    eye = lambda: Layer(np.eye(c), np.zeros(c), "identity")
    encoder = DenseNet([eye()])
    classifier = DenseNet([eye(), eye()])
    heads = [Layer(np.eye(c), np.zeros(c), "identity") for _ in range(n_domains)]
    rng = np.random.default_rng(0)
    disc = DenseNet.create([c + n_domains, 4, 1], ["leaky_relu", "identity"], rng)
    if disc_zero:
        for layer in disc.layers:
            layer.W[...] = 0.0
            layer.b[...] = 0.0
    return ModelBundle(encoder, classifier, heads, disc, n_domains)


class TestHoeffdingTerm:
    def test_beta_equals_alpha_closed_form(self):
        params = BoundParams(d=1.0, delta=0.05, total_labeled=100)
        alpha = np.array([0.3, 0.45, 0.25])
        term = hoeffding_term(alpha, alpha, params)
        expected = 2.0 * math.sqrt((2.0 * math.log(202.0) + math.log(80.0)) / 100.0)
        np.testing.assert_allclose(term, expected, atol=1e-12)

    def test_uniform_alpha_uniform_beta_same_value(self):
        params = BoundParams(d=1.0, delta=0.05, total_labeled=100)
        uni = np.full(4, 0.25)
        a = hoeffding_term(uni, uni, params)
        alpha = np.array([0.1, 0.2, 0.3, 0.4])
        b = hoeffding_term(alpha, alpha, params)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_spot_value_hand_evaluation(self):
        # ratio = 0.64/0.5 + 0.04/0.5 = 1.36
        params = BoundParams(d=1.0, delta=0.05, total_labeled=100)
        alpha = np.array([0.8, 0.2])
        beta = np.array([0.5, 0.5])
        np.testing.assert_allclose(complexity_ratio(alpha, beta), 1.36, atol=1e-12)
        expected = 2.0 * math.sqrt(1.36 * (2.0 * math.log(202.0) + math.log(80.0)) / 100.0)
        np.testing.assert_allclose(hoeffding_term(alpha, beta, params), expected, atol=1e-12)

    def test_zero_beta_with_mass_rejected(self):
        params = BoundParams(total_labeled=10)
        with pytest.raises(ValueError, match="diverges"):
            hoeffding_term(np.array([0.5, 0.5]), np.array([1.0, 0.0]), params)

    def test_zero_alpha_zero_beta_allowed(self):
        params = BoundParams(total_labeled=10)
        value = hoeffding_term(np.array([1.0, 0.0]), np.array([1.0, 0.0]), params)
        assert np.isfinite(value)

    def test_permutation_symmetry(self):
        params = BoundParams(total_labeled=50)
        rng = np.random.default_rng(1)
        alpha = project_simplex(rng.random(5))
        beta = project_simplex(rng.random(5))
        perm = rng.permutation(5)
        np.testing.assert_allclose(hoeffding_term(alpha, beta, params),
                                   hoeffding_term(alpha[perm], beta[perm], params),
                                   atol=1e-12)

    def test_bad_params_rejected(self):
        with pytest.raises(ValueError):
            BoundParams(delta=1.5)
        with pytest.raises(ValueError):
            BoundParams(d=0.0)


class TestVerifyOptimalBeta:
    def test_reference_alpha(self):
        alpha = np.array([0.5, 0.3, 0.2])
        beta_star, gap, value = verify_optimal_beta(alpha, 0.01)
        assert gap <= 0.01 + 1e-12
        np.testing.assert_allclose(value, 1.0, atol=1e-3)
        np.testing.assert_allclose(complexity_ratio(alpha, alpha), 1.0, atol=1e-12)

    def test_uniform_exact_when_grid_contains_it(self):
        beta_star, gap, value = verify_optimal_beta(np.full(4, 0.25), 0.25)
        np.testing.assert_array_equal(beta_star, np.full(4, 0.25))
        assert gap == 0.0
        np.testing.assert_allclose(value, 1.0, atol=1e-12)

    def test_degenerate_direction_handled(self):
        beta_star, gap, value = verify_optimal_beta(np.array([1.0, 0.0]), 0.01)
        np.testing.assert_allclose(beta_star, [1.0, 0.0], atol=1e-12)
        assert gap <= 1e-12
        np.testing.assert_allclose(value, 1.0, atol=1e-12)

    def test_value_never_below_one(self):
        rng = np.random.default_rng(2)
        for n in (2, 3):
            alpha = project_simplex(rng.random(n) + 0.1)
            _, _, value = verify_optimal_beta(alpha, 0.02)
            assert value >= 1.0 - 1e-12

    def test_large_n_projected_gradient_path(self):
        rng = np.random.default_rng(3)
        alpha = project_simplex(rng.random(6) + 0.5)
        beta_star, gap, value = verify_optimal_beta(alpha, 0.01)
        assert gap <= 0.02
        assert value >= 1.0 - 1e-9

    def test_bad_grid_step_rejected(self):
        with pytest.raises(ValueError, match="grid_step"):
            verify_optimal_beta(np.array([0.5, 0.5]), 0.7)


class TestEmpiricalBound:
    def test_perfect_classifier_identical_domains_chance_discriminator(self):
        ds = onehot_dataset()
        bundle = passthrough_bundle()
        pool = init_pool(ds, 8, seed=0)
        alpha = np.full((2, 2), 0.5)
        report = empirical_bound(bundle, ds, pool, alpha)
        assert report.weighted_err == 0.0
        assert report.vlambda_proxy == 0.0
        assert report.mean_hdist == 0.0  # zero-logit discriminator is at chance
        params = BoundParams(total_labeled=8)
        np.testing.assert_allclose(report.total,
                                   hoeffding_term(np.array([0.5, 0.5]),
                                                  pool.counts() / 8, params),
                                   atol=1e-12)

    def test_constant_classifier_balanced_labels(self):
        ds = onehot_dataset(n_domains=3, per=16, n_classes=4)
        bundle = passthrough_bundle(c=4, n_domains=3)
        final = bundle.classifier.layers[-1]
        final.W[...] = 0.0
        final.b[...] = 0.0
        final.b[0] = 5.0  # constant prediction: class 0
        pool = init_pool(ds, 48, seed=0)  # everything labeled, balanced
        rng = np.random.default_rng(4)
        alpha = np.stack([project_simplex(rng.random(3)) for _ in range(3)])
        report = empirical_bound(bundle, ds, pool, alpha)
        np.testing.assert_allclose(report.weighted_err, 0.75, atol=1e-12)

    def test_components_recountable_and_total_exact(self):
        ds = onehot_dataset(n_domains=2, per=10, n_classes=2)
        bundle = passthrough_bundle(disc_zero=False)
        pool = init_pool(ds, 8, seed=1)
        alpha = np.array([[0.7, 0.3], [0.4, 0.6]])
        report = empirical_bound(bundle, ds, pool, alpha)
        # independent recount of the weighted empirical error
        cols = alpha.mean(axis=0)
        recount = 0.0
        for j in range(2):
            feats = pool.labeled_features(j)
            pred = np.argmax(bundle.class_logits(feats), axis=1)
            recount += cols[j] * np.mean(pred != pool.labels(j))
        np.testing.assert_allclose(report.weighted_err, recount, atol=1e-12)
        assert report.total == (report.weighted_err + report.hoeffding
                                + report.mean_hdist + report.vlambda_proxy)
        for part in (report.weighted_err, report.hoeffding, report.mean_hdist,
                     report.vlambda_proxy):
            assert part >= 0.0


class TestOrderingDiag:
    def test_identical_reports_identical_rows(self):
        rep = BoundReport(0.1, 0.2, 0.3, 0.05)
        rows = bound_ordering_diag({"cal": rep, "vanilla": rep})
        assert len(rows) == 2
        assert rows[0]["total"] == rows[1]["total"]

    def test_sorted_by_total(self):
        rows = bound_ordering_diag({
            "a": BoundReport(0.5, 0.2, 0.3, 0.05),
            "b": BoundReport(0.1, 0.2, 0.3, 0.05),
        })
        assert [r["variant"] for r in rows] == ["b", "a"]

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no reports"):
            bound_ordering_diag({})

    def test_negative_component_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            BoundReport(-0.1, 0.2, 0.3, 0.05)
