import math

import numpy as np
import pytest
from scipy import stats

from vinevi import autodiff as ad
from vinevi.models import (
    BETA_TRUE,
    NEEDLE_C,
    WISHART_C1,
    DatasetKind,
    DatasetSpec,
    GaussianDist,
    GaussianTarget,
    RegressionTarget,
    conjugate_posterior,
    dataset_from_csv,
    dataset_to_csv,
    generate_dataset,
    log_evidence,
    random_vine_clayton,
    wishart_correlation,
)
from vinevi.numerics import LOG_2PI, make_rng


class TestJointDensity:
    def test_single_observation(self):
        m = RegressionTarget([[1.0]], [0.0], prior_var=1.0)
        assert m.joint_log_density([0.0]) == pytest.approx(-LOG_2PI, rel=1e-15)

    def test_gradient(self, rng):
        m = generate_dataset(DatasetSpec("needle", 50, 4))
        for _ in range(10):
            beta = rng.normal(size=4) * 5
            expected = -beta / m.prior_var + m.X.T @ (m.y - m.X @ beta)
            np.testing.assert_allclose(m.grad_log_joint(beta), expected, rtol=1e-12)
            h = 1e-5
            fd = [(m.joint_log_density(beta + h * e) - m.joint_log_density(beta - h * e)) / (2 * h) for e in np.eye(4)]
            np.testing.assert_allclose(m.grad_log_joint(beta), fd, rtol=1e-6, atol=1e-4)

    def test_stationary_at_posterior_mean(self):
        m = generate_dataset(DatasetSpec("needle", 50, 4))
        np.testing.assert_allclose(m.grad_log_joint(m.posterior.mean), 0.0, atol=1e-9)

    def test_column_form_matches_direct(self, rng):
        m = generate_dataset(DatasetSpec("wishart-gaussian", 300, 2, prior_var=1e4))
        z = m.posterior.mean + rng.normal(size=(20, 4)) * 0.1
        direct = np.array([m.joint_log_density(b) for b in z])
        np.testing.assert_allclose(m.log_joint(z), direct, rtol=1e-10)

    def test_column_form_on_tape(self, rng):
        m = generate_dataset(DatasetSpec("independence", 50, 1))
        beta = m.posterior.mean + rng.normal(size=4) * 0.3
        tape = ad.Tape()
        cols = [tape.variable(np.array([b])) for b in beta]
        out = ad.sum(m.log_joint_columns(cols))
        np.testing.assert_allclose(ad.gradient(tape, out, cols), m.grad_log_joint(beta), rtol=1e-9, atol=1e-9)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            RegressionTarget(np.zeros((0, 2)), [])
        with pytest.raises(ValueError):
            RegressionTarget([[1.0]], [0.0]).joint_log_density([0.0, 1.0])


class TestPosterior:
    def test_identity_design(self):
        post = conjugate_posterior(RegressionTarget(np.eye(2), [2.0, 4.0], prior_var=1.0))
        np.testing.assert_allclose(post.cov, 0.5 * np.eye(2))
        np.testing.assert_allclose(post.mean, [1.0, 2.0])

    def test_zero_design_gives_prior(self):
        post = RegressionTarget(np.zeros((3, 2)), [1.0, 2.0, 3.0], prior_var=2.5).posterior
        np.testing.assert_allclose(post.cov, 2.5 * np.eye(2))
        np.testing.assert_array_equal(post.mean, 0.0)

    def test_needle_is_strongly_correlated(self):
        R = generate_dataset(DatasetSpec("needle", 50, 1)).posterior.correlation
        assert np.max(np.abs(R - np.eye(4))) > 0.5


class TestEvidence:
    def test_zero_design(self):
        assert log_evidence(RegressionTarget([[0.0]], [0.0])) == pytest.approx(-0.5 * LOG_2PI, rel=1e-15)

    @pytest.mark.parametrize("kind,n,pv", [("independence", 50, 1.0), ("needle", 50, 1.0),
                                           ("wishart-gaussian", 300, 1e4), ("vine-clayton", 300, 1e4)])
    def test_bayes_identity(self, kind, n, pv, rng):
        m = generate_dataset(DatasetSpec(kind, n, 11, prior_var=pv))
        post = m.posterior
        for _ in range(50):
            z = post.mean + rng.normal(size=4) * post.stds * 3
            lhs = m.joint_log_density(z)
            rhs = post.logpdf(z)[0] + m.log_evidence
            assert lhs == pytest.approx(rhs, abs=1e-8 * max(1.0, abs(lhs)))

    def test_identity_design_cross_check(self):
        m = RegressionTarget(np.eye(2), [2.0, 4.0])
        z = np.array([0.3, -1.1])
        expected = m.joint_log_density(z) - stats.multivariate_normal([1, 2], 0.5 * np.eye(2)).logpdf(z)
        assert m.log_evidence == pytest.approx(expected, rel=1e-12)


class TestGenerators:
    def test_independence_spec(self):
        m = generate_dataset(DatasetSpec("independence", 50, 0))
        assert m.X.shape == (50, 4)
        np.testing.assert_allclose(m.y, m.X @ np.array(BETA_TRUE))
        assert DatasetSpec("independence", 50, 0).to_dict()["correlation"] == np.eye(4).tolist()

    def test_needle_matrix(self):
        doc = DatasetSpec("needle", 50, 0).to_dict()
        assert doc["correlation"][0] == [1.0, 0.9, 0.14, -0.85]
        np.testing.assert_array_equal(doc["correlation"], NEEDLE_C)

    @pytest.mark.parametrize("kind", ["independence", "needle"])
    def test_gaussian_rows_follow_c(self, kind):
        m = generate_dataset(DatasetSpec(kind, 100_000, 5))
        C = DatasetSpec(kind, 1, 0).resolved_correlation()
        np.testing.assert_allclose(np.cov(m.X.T), C, atol=0.02)

    def test_wishart_correlation(self):
        C = wishart_correlation(WISHART_C1, 5, make_rng(1))
        np.testing.assert_allclose(np.diag(C), 1.0)
        assert np.all(np.linalg.eigvalsh(C) > 0)
        spec = DatasetSpec("wishart-gaussian", 300, 1, prior_var=1e4)
        np.testing.assert_array_equal(generate_dataset(spec).X, generate_dataset(spec).X)

    def test_vine_clayton_marginals(self):
        m = generate_dataset(DatasetSpec("vine-clayton", 10_000, 3))
        for j in range(4):
            assert stats.kstest(m.X[:, j], "norm").pvalue > 0.01

    def test_vine_clayton_families(self):
        v = random_vine_clayton(4, make_rng(0))
        fams = [c.family.value for t in v.trees for c in t]
        assert len(fams) == 6 and set(fams) <= {"clayton", "gaussian"}
        for c in (c for t in v.trees for c in t):
            if c.family.value == "clayton":
                assert 1 <= c.param <= 8
            else:
                assert 0 <= c.param < 1

    def test_invalid_correlation(self):
        bad = [[1, 2, 0, 0], [2, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]
        with pytest.raises(ValueError):
            generate_dataset(DatasetSpec("needle", 10, 0, correlation=bad))

    def test_csv_round_trip(self):
        m = generate_dataset(DatasetSpec("needle", 20, 2))
        text = dataset_to_csv(m)
        assert text.splitlines()[0] == "x1,x2,x3,x4,y"
        back = dataset_from_csv(text)
        np.testing.assert_array_equal(back.X, m.X)
        np.testing.assert_array_equal(back.y, m.y)

    def test_kind_enum(self):
        assert DatasetSpec("vine-clayton", 5, 0).kind is DatasetKind.VINE_CLAYTON


def test_gaussian_target_normalizer(rng):
    t = GaussianTarget([1.0, -2.0], [[2.0, 0.3], [0.3, 0.5]], log_evidence=-3.2)
    z = rng.normal(size=(5, 2))
    np.testing.assert_allclose(t.log_joint(z), t.posterior.logpdf(z) - 3.2, rtol=1e-12)


def test_gaussian_dist_cache():
    g = GaussianDist([0.0, 1.0], [[4.0, 1.0], [1.0, 1.0]])
    np.testing.assert_allclose(g.precision @ g.cov, np.eye(2), atol=1e-12)
    assert g.logdet == pytest.approx(math.log(3.0))
    np.testing.assert_allclose(g.stds, [2.0, 1.0])
    assert g.correlation[0, 1] == pytest.approx(0.5)
