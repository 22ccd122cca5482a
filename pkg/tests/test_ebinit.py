# tests/test_ebinit.py
import numpy as np
import pytest

from bdcfm import ebinit, numkit, posterior, simgen
from bdcfm.errors import InvalidParameter, SingularGram, SingularTopBlock
from bdcfm.model import validate_state


def test_constrain_loadings_identity_top_block():
    B_tilde = np.array([[0.8, 0.3], [0.2, 0.9], [0.5, 0.5], [0.7, -0.1]])
    M, B_hat = ebinit.constrain_loadings(B_tilde)
    np.testing.assert_array_equal(B_hat[:2], np.eye(2))
    np.testing.assert_allclose(B_hat[2:], B_tilde[2:] @ M, atol=1e-12)
    np.testing.assert_allclose(M @ B_tilde[:2], np.eye(2), atol=1e-12)


def test_constrain_loadings_singular_top_block():
    B_tilde = np.array([[0.5, 0.5], [0.5, 0.5], [0.1, 0.9]])
    with pytest.raises(SingularTopBlock):
        ebinit.constrain_loadings(B_tilde)


def test_wls_scores_recover_noiseless_factors(rng):
    B = np.array([[1.0, 0.0], [0.4, 1.0], [0.3, -0.6], [1.2, 0.2]])
    X = rng.generator.standard_normal((50, 2))
    scores = ebinit.wls_scores(X @ B.T, B, np.array([0.5, 1.0, 2.0, 1.0]))
    np.testing.assert_allclose(scores, X, atol=1e-10)


def test_wls_scores_singular_gram():
    B = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(SingularGram):
        ebinit.wls_scores(np.ones((4, 3)), B, np.ones(3))


def test_extract_loadings_one_factor(rng):
    gen = rng.generator
    f = gen.standard_normal(4000)
    loadings = np.array([0.9, 0.8, 0.7, 0.6, 0.5])
    Y = f[:, None] * loadings + gen.standard_normal((4000, 5)) * np.sqrt(1 - loadings ** 2)
    B_tilde, V_hat = ebinit.extract_loadings(Y, 1)
    np.testing.assert_allclose(B_tilde[:, 0], loadings, atol=0.06)
    assert np.all((V_hat >= ebinit.UNIQUENESS_FLOOR) & (V_hat <= 1.0))


def test_extract_loadings_rejects_too_many_factors(rng):
    with pytest.raises(InvalidParameter):
        ebinit.extract_loadings(rng.generator.standard_normal((50, 3)), 4)


def _planted_blobs(rng):
    centers = np.array([[0.0, 0.0, 0.0], [20.0, 0.0, 0.0], [0.0, 20.0, 0.0], [0.0, 0.0, 20.0]])
    sizes = [40, 30, 20, 10]
    labels = np.repeat(np.arange(1, 5), sizes)
    X = centers[labels - 1] + rng.generator.standard_normal((labels.size, 3))
    order = rng.generator.permutation(labels.size)
    return X[order], labels[order]


def test_kmeans_recovers_planted_partition_ordered_by_size(rng):
    X, planted = _planted_blobs(rng)
    labels = ebinit.kmeans_cluster(X, 4, numkit.RngStream(3))
    np.testing.assert_array_equal(labels, planted)


def test_kmeans_single_cluster(rng):
    np.testing.assert_array_equal(ebinit.kmeans_cluster(np.zeros((5, 2)), 1, rng), np.ones(5))


def test_build_priors_diagonal_cluster_one(rng):
    X, planted = _planted_blobs(rng)
    priors, updates = ebinit.build_priors(X, planted, 4)
    cov1 = np.cov(updates["X_hat"][planted == 1], rowvar=False)
    off = cov1 - np.diag(np.diag(cov1))
    assert np.max(np.abs(off)) < 1e-8
    np.testing.assert_allclose(priors.C_mu[0], updates["D1"], atol=1e-12)
    np.testing.assert_allclose(np.diag(updates["L1"]), np.ones(3))
    assert priors.violations() == []
    assert priors.S_Omega.shape == (3, 3, 3)


def test_pipeline_on_simulated_panel():
    dataset, truth = simgen.simulate_dataset(simgen.benchmark_design(seed=21, S=100, T=4, R=12))
    priors, artifacts = ebinit.run_empirical_bayes(dataset, 4, 3, numkit.RngStream(21))
    assert priors.violations() == []
    assert list(artifacts.sizes) == sorted(artifacts.sizes, reverse=True)
    assert artifacts.X_hat.shape == (400, 3)

    for compensate in (True, False):
        state = ebinit.initialize_state(dataset, priors, artifacts, compensate_loadings=compensate)
        assert validate_state(state) == []
        assert np.all(state.tau2 >= ebinit.TAU2_FLOOR)


def test_pipeline_is_deterministic():
    dataset, _ = simgen.simulate_dataset(simgen.benchmark_design(seed=22, S=60, T=3, R=10))
    a = ebinit.run_empirical_bayes(dataset, 4, 3, numkit.RngStream(5))[1]
    b = ebinit.run_empirical_bayes(dataset, 4, 3, numkit.RngStream(5))[1]
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.X_hat, b.X_hat)


def test_extract_loadings_on_pure_noise(rng):
    Y = rng.generator.standard_normal((5000, 6))
    B_tilde, V_hat = ebinit.extract_loadings(Y, 1, max_iter=5000)
    assert np.all(np.sum(B_tilde ** 2, axis=1) < 0.1)
    assert np.all(V_hat > 0.9)


@pytest.fixture(scope="module")
def benchmark_fit():
    dataset, truth = simgen.simulate_dataset(simgen.benchmark_design(seed=21))
    priors, artifacts = ebinit.run_empirical_bayes(dataset, 4, 3, numkit.RngStream(21))
    perm = posterior.align_labels(artifacts.labels, truth.Z.ravel(), 4)
    return truth, priors, artifacts, perm


def test_kmeans_labels_recover_benchmark_clusters(benchmark_fit):
    truth, _, artifacts, perm = benchmark_fit
    assert np.mean(perm[artifacts.labels - 1] != truth.Z.ravel()) < 0.2


def test_prior_means_near_true_cluster_means(benchmark_fit):
    truth, priors, _, perm = benchmark_fit
    for e in range(4):
        sd = np.sqrt(np.diag(priors.C_mu[e]))
        assert np.all(np.abs(priors.m_mu[e] - truth.mu[perm[e] - 1]) < 3 * sd), f"cluster {e + 1}"


def test_prior_means_are_rescaled_cluster_means(benchmark_fit):
    _, priors, artifacts, _ = benchmark_fit
    raw = artifacts.X_hat @ artifacts.L1.T
    for g in range(1, 5):
        members = artifacts.labels == g
        np.testing.assert_allclose(priors.m_mu[g - 1], artifacts.X_hat[members].mean(axis=0), atol=1e-10)
        expected = np.linalg.solve(artifacts.L1, raw[members].mean(axis=0))
        np.testing.assert_allclose(priors.m_mu[g - 1], expected, atol=1e-10)
