# tests/test_simgen.py
import json
from dataclasses import replace

import numpy as np
import pytest

from bdcfm import ebinit, numkit, simgen
from bdcfm.errors import InvalidParameter
from bdcfm.model import compute_sweep_stats, validate_state


def test_benchmark_design_shapes_and_validity():
    dataset, truth = simgen.simulate_dataset(simgen.benchmark_design(seed=1))
    assert dataset.y.shape == (200, 5, 20)
    assert truth.X.shape == (200, 5, 3)
    assert truth.Z.min() >= 1 and truth.Z.max() <= 4
    np.testing.assert_array_equal(truth.B[:3], np.tril(truth.B[:3]))
    np.testing.assert_array_equal(np.diag(truth.B), np.ones(3))
    np.testing.assert_array_equal(truth.V, np.ones(20))
    assert validate_state(truth.to_state()) == []


def test_simulation_is_deterministic_per_seed():
    a, _ = simgen.simulate_dataset(simgen.benchmark_design(seed=3, S=20))
    b, _ = simgen.simulate_dataset(simgen.benchmark_design(seed=3, S=20))
    c, _ = simgen.simulate_dataset(simgen.benchmark_design(seed=4, S=20))
    np.testing.assert_array_equal(a.y, b.y)
    assert not np.array_equal(a.y, c.y)


def test_empirical_transitions_match_design():
    config = simgen.benchmark_design(seed=11)
    Z, _ = simgen.draw_latent_path(
        config.p, config.Q, config.mu, config.omega, S=10_000, T=50, rng=numkit.RngStream(11, 2)
    )
    counts = compute_sweep_stats(Z, 4).m_jg
    freq = counts / counts.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(freq, config.Q, atol=0.01)
    assert counts[0, 3] == 0
    np.testing.assert_allclose(np.bincount(Z[:, 0], minlength=5)[1:] / 10_000, config.p, atol=0.02)


def test_factor_moments_within_cluster():
    config = simgen.benchmark_design(seed=2)
    Z, X = simgen.draw_latent_path(
        config.p, config.Q, config.mu, config.omega, S=5000, T=5, rng=numkit.RngStream(2, 2)
    )
    members = X[Z == 4]
    np.testing.assert_allclose(members.mean(axis=0), config.mu[3], atol=0.2)
    np.testing.assert_allclose(np.cov(members, rowvar=False), config.omega[3], atol=0.5)


def test_truth_dict_survives_json(tmp_path):
    _, truth = simgen.simulate_dataset(simgen.benchmark_design(seed=5, S=10, T=2, R=6))
    path = tmp_path / "truth.json"
    path.write_text(json.dumps(simgen.to_truth_dict(truth)))
    back = simgen.from_truth_dict(json.loads(path.read_text()))
    np.testing.assert_array_equal(back.B, truth.B)
    np.testing.assert_array_equal(back.Z, truth.Z)
    np.testing.assert_array_equal(back.omega, truth.omega)
    assert back.Z.dtype.kind == "i"


def test_fixed_loadings_and_uniquenesses():
    B = np.tril(np.full((4, 2), 0.5))
    B[[0, 1], [0, 1]] = 1.0
    config = simgen.SimConfig(
        S=5, T=2, R=4, G=1, L=2, p=[1.0], Q=[[1.0]], mu=[[0.0, 0.0]], omega=[np.eye(2)],
        loadings=B, uniquenesses=[0.5, 1.0, 1.5, 2.0],
    )
    _, truth = simgen.simulate_dataset(config)
    np.testing.assert_array_equal(truth.B, B)
    np.testing.assert_array_equal(truth.V, [0.5, 1.0, 1.5, 2.0])
    assert np.all(truth.Z == 1)


def test_panel_like_shape():
    dataset, truth = simgen.simulate_dataset(simgen.panel_like(S=252, T=4, R=15, seed=0))
    assert dataset.y.shape == (252, 4, 15)
    assert validate_state(truth.to_state()) == []


@pytest.mark.parametrize(
    "overrides",
    [
        {"p": [0.5, 0.6]},
        {"Q": [[0.5, 0.4], [0.5, 0.5]]},
        {"omega": [[[1.0, 0.2], [0.2, 1.0]], np.eye(2)]},
        {"R": 1},
    ],
)
def test_invalid_design(overrides):
    base = dict(S=5, T=2, R=3, G=2, L=2, p=[0.5, 0.5], Q=[[0.5, 0.5], [0.5, 0.5]],
                mu=[[0.0, 0.0], [1.0, 1.0]], omega=[np.eye(2), np.eye(2)])
    base.update(overrides)
    with pytest.raises(InvalidParameter):
        simgen.SimConfig(**base)


def test_noiseless_limit():
    config = replace(simgen.benchmark_design(seed=8, S=50, T=3, R=10), uniquenesses=1e-10)
    dataset, truth = simgen.simulate_dataset(config)
    np.testing.assert_allclose(dataset.y, truth.X @ truth.B.T, atol=1e-3)
    scores = ebinit.wls_scores(dataset.stacked(), truth.B, truth.V)
    np.testing.assert_allclose(scores, truth.X.reshape(-1, 3), atol=1e-3)
