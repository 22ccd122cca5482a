# tests/test_model.py
import numpy as np
import pytest
from scipy import stats

from bdcfm.errors import DimensionMismatch, NonFiniteValue
from bdcfm.model import (
    ChainOutput,
    Dataset,
    block_columns,
    complete_data_loglik,
    compute_sweep_stats,
    validate_state,
)

from conftest import make_priors, make_state


def test_dataset_labels_default(tiny_dataset):
    assert (tiny_dataset.S, tiny_dataset.T, tiny_dataset.R) == (2, 2, 2)
    assert tiny_dataset.subject_ids == ["1", "2"]
    assert tiny_dataset.variable_names == ["y1", "y2"]
    assert tiny_dataset.stacked().shape == (4, 2)
    np.testing.assert_array_equal(tiny_dataset.stacked()[1], tiny_dataset.y[0, 1])


def test_dataset_rejects_non_finite():
    y = np.zeros((2, 2, 2))
    y[1, 0, 1] = np.nan
    with pytest.raises(NonFiniteValue):
        Dataset(y=y)


def test_dataset_rejects_wrong_rank():
    with pytest.raises(DimensionMismatch):
        Dataset(y=np.zeros((2, 2)))


def test_truth_state_is_valid(small_panel):
    _, truth, priors = small_panel
    assert validate_state(truth.to_state()) == []
    assert priors.violations() == []


@pytest.mark.parametrize(
    "corrupt,constraint",
    [
        (lambda s: s.B.__setitem__((0, 0), 2.0), "loadings diagonal"),
        (lambda s: s.B.__setitem__((0, 1), 0.3), "loadings upper triangle"),
        (lambda s: s.omega[0].__setitem__((0, 1), 0.1), "Ω₁ diagonality"),
        (lambda s: s.omega[1].__setitem__((0, 0), -5.0), "Ω SPD"),
        (lambda s: s.sigma2.__setitem__(2, -1.0), "sigma2 positive"),
        (lambda s: s.tau2.__setitem__(0, 0.0), "tau2 positive"),
        (lambda s: s.p.__setitem__(0, s.p[0] + 0.1), "initial probabilities"),
        (lambda s: s.Q.__setitem__((1, 1), s.Q[1, 1] + 0.1), "transition row stochastic"),
        (lambda s: s.Z.__setitem__((0, 0), 0), "assignment range"),
    ],
)
def test_validate_state_reports_each_violation(small_panel, corrupt, constraint):
    state = small_panel[1].to_state().copy()
    corrupt(state)
    found = {v.constraint for v in validate_state(state)}
    assert constraint in found


def test_validate_state_dimension_mismatch(small_panel):
    state = small_panel[1].to_state().copy()
    state.p = np.ones(3) / 3
    assert [v.constraint for v in validate_state(state)] == ["dimensions"]


def test_sweep_stats_hand_counts():
    stats_ = compute_sweep_stats(np.array([[1, 2, 2]]), 2)
    np.testing.assert_array_equal(stats_.n_tg, [[1, 0], [0, 1], [0, 1]])
    np.testing.assert_array_equal(stats_.m_jg, [[0, 1], [0, 1]])


def test_prior_defaults():
    priors = make_priors(np.zeros((2, 3)))
    assert priors.n_sigma * priors.s2_sigma == pytest.approx(0.1)
    assert priors.n_tau * priors.s2_tau == pytest.approx(1.0)
    assert priors.n_Omega == 5.0
    np.testing.assert_array_equal(priors.alpha, [2.0, 2.0])
    assert priors.violations() == []


def test_block_columns_names():
    assert block_columns("Omega", R=3, L=2, G=1) == ["Omega[1,1,1]", "Omega[1,2,1]", "Omega[1,2,2]"]
    assert block_columns("Q", R=3, L=2, G=2) == ["Q[1,1]", "Q[1,2]", "Q[2,1]", "Q[2,2]"]
    assert block_columns("B", R=2, L=1, G=1) == ["B[1,1]", "B[2,1]"]


def test_complete_data_loglik_by_hand():
    y = np.array([[[1.0, 0.5], [-0.5, 2.0]]])
    state = make_state(
        B=[[1.0], [0.5]],
        X=[[[0.8], [-0.2]]],
        Z=[[1, 2]],
        mu=[[0.0], [1.0]],
        omega=[[[1.0]], [[2.0]]],
        sigma2=[0.5, 1.5],
        p=[0.3, 0.7],
        Q=[[0.6, 0.4], [0.2, 0.8]],
    )
    expected = 0.0
    for t in range(2):
        mean = state.B @ state.X[0, t]
        expected += stats.norm(mean, np.sqrt(state.sigma2)).logpdf(y[0, t]).sum()
    expected += stats.norm(0.0, 1.0).logpdf(0.8) + stats.norm(1.0, np.sqrt(2.0)).logpdf(-0.2)
    expected += np.log(0.3) + np.log(0.4)
    assert complete_data_loglik(Dataset(y=y), state) == pytest.approx(expected, rel=1e-12)


def test_chain_records_and_mode_ties():
    state = make_state(B=[[1.0]], X=np.zeros((1, 1, 1)), Z=[[1]], mu=[[0.0], [1.0]], omega=[[[1.0]], [[1.0]]])
    chain = ChainOutput.allocate(2, S=1, T=1, R=1, L=1, G=2)
    chain.record(0, state, 1.5)
    state.Z = np.array([[2]])
    chain.record(1, state, 2.5)
    np.testing.assert_allclose(chain.z_probs[0, 0], [0.5, 0.5])
    assert chain.z_mode[0, 0] == 1
    values, names = chain.block("Omega")
    assert values.shape == (2, 2)
    assert names == ["Omega[1,1,1]", "Omega[2,1,1]"]
    np.testing.assert_array_equal(chain.loglik, [1.5, 2.5])



def test_chain_head_keeps_counts():
    state = make_state(B=[[1.0]], X=np.zeros((1, 1, 1)), Z=[[2]], mu=[[0.0], [1.0]], omega=[[[1.0]], [[1.0]]])
    chain = ChainOutput.allocate(3, S=1, T=1, R=1, L=1, G=2, meta={"thin": 1})
    for k in range(3):
        chain.record(k, state, float(k))
    head = chain.head(2)
    assert head.stored_iterations == 2
    np.testing.assert_array_equal(head.loglik, [0.0, 1.0])
    assert head.omega.shape == (2, 2, 1, 1)
    np.testing.assert_array_equal(head.z_counts, [[[0, 3]]])
    assert head.meta is chain.meta


def test_sweep_stats_match_brute_force():
    S, T, G = 60, 7, 3
    Z = np.random.default_rng(4).integers(1, G + 1, (S, T))
    counts = compute_sweep_stats(Z, G)
    for t in range(T):
        for g in range(G):
            assert counts.n_tg[t, g] == np.sum(Z[:, t] == g + 1)
    for j in range(G):
        for g in range(G):
            assert counts.m_jg[j, g] == np.sum((Z[:, :-1] == j + 1) & (Z[:, 1:] == g + 1))
    np.testing.assert_array_equal(counts.n_tg.sum(axis=1), S)
    assert counts.m_jg.sum() == S * (T - 1)


def test_sweep_stats_constant_chain():
    counts = compute_sweep_stats(np.full((5, 4), 2), 3)
    np.testing.assert_array_equal(counts.n_tg, np.tile([0, 5, 0], (4, 1)))
    np.testing.assert_array_equal(counts.m_jg, [[0, 0, 0], [0, 15, 0], [0, 0, 0]])
    single = compute_sweep_stats(np.full((5, 1), 2), 3)
    np.testing.assert_array_equal(single.m_jg, np.zeros((3, 3)))
