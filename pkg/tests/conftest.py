# tests/conftest.py
import numpy as np
import pytest

from bdcfm import numkit, simgen
from bdcfm.model import Dataset, ModelState, PriorSpec


def make_priors(m_mu, C_mu=None, s2_omega=None, S_Omega=None, **overrides):
    m_mu = np.atleast_2d(np.asarray(m_mu, dtype=float))
    G, L = m_mu.shape
    C_mu = np.array([np.eye(L)] * G) if C_mu is None else C_mu
    s2_omega = np.ones(L) if s2_omega is None else s2_omega
    S_Omega = np.array([np.eye(L)] * (G - 1)).reshape(G - 1, L, L) if S_Omega is None else S_Omega
    priors = PriorSpec.default(m_mu=m_mu, C_mu=C_mu, s2_omega=s2_omega, S_Omega=S_Omega)
    for name, value in overrides.items():
        setattr(priors, name, value)
    return priors


def make_state(B, X, Z, mu, omega, sigma2=None, tau2=None, p=None, Q=None):
    B = np.asarray(B, dtype=float)
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    G = mu.shape[0]
    return ModelState(
        B=B,
        sigma2=np.ones(B.shape[0]) if sigma2 is None else np.asarray(sigma2, dtype=float),
        tau2=np.ones(B.shape[1]) if tau2 is None else np.asarray(tau2, dtype=float),
        mu=mu,
        omega=np.asarray(omega, dtype=float),
        p=np.full(G, 1.0 / G) if p is None else np.asarray(p, dtype=float),
        Q=np.full((G, G), 1.0 / G) if Q is None else np.asarray(Q, dtype=float),
        X=np.asarray(X, dtype=float),
        Z=np.asarray(Z, dtype=int),
    )


@pytest.fixture
def rng():
    return numkit.RngStream(20240611)


@pytest.fixture
def small_panel():
    """Benchmark-design panel small enough for many sweeps, with its truth and priors."""
    dataset, truth = simgen.simulate_dataset(simgen.benchmark_design(seed=7, S=30, T=3, R=8))
    priors = make_priors(
        truth.mu,
        C_mu=np.array([4.0 * np.eye(3)] * 4),
        s2_omega=np.diag(truth.omega[0]).copy(),
        S_Omega=truth.omega[1:] * 2.0,
    )
    return dataset, truth, priors


@pytest.fixture
def tiny_dataset():
    y = np.arange(2 * 2 * 2, dtype=float).reshape(2, 2, 2)
    return Dataset(y=y)
