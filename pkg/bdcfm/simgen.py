# bdcfm/simgen.py
"""
Synthetic panels from fully specified model parameters.

Z_i1 ~ p, Z_it | Z_i,t-1 ~ Q[Z_i,t-1], x_it | Z_it = g ~ N(mu_g, Omega_g),
y_it = B x_it + e_it with e_it ~ N(0, diag(sigma2)).

The simulated study leaves the true loadings and uniquenesses unstated; by
default free loadings are drawn i.i.d. N(0, 1) from the config seed and
every uniqueness is 1. The realized values are part of the truth.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import DimensionMismatch, InvalidParameter
from .model import Dataset, ModelState, validate_state

logger = logging.getLogger(__name__)

PROB_TOL = 1e-9
SIM_STREAM = 2

BENCHMARK_P = [0.45, 0.26, 0.16, 0.13]
BENCHMARK_Q = [
    [0.75, 0.15, 0.10, 0.00],
    [0.20, 0.55, 0.15, 0.10],
    [0.25, 0.15, 0.50, 0.10],
    [0.10, 0.15, 0.20, 0.55],
]
BENCHMARK_MU = [[7, 4, 5], [-7, 3, -3], [6, -3, -2], [-6, -4, 3]]
BENCHMARK_OMEGA = [
    np.diag([1.9, 1.1, 1.3]),
    2.0 * np.eye(3) + 0.4 * (np.ones((3, 3)) - np.eye(3)),
    3.0 * np.eye(3) + 0.6 * (np.ones((3, 3)) - np.eye(3)),
    4.0 * np.eye(3) + 1.0 * (np.ones((3, 3)) - np.eye(3)),
]


@dataclass
class SimConfig:
    S: int
    T: int
    R: int
    G: int
    L: int
    p: np.ndarray
    Q: np.ndarray
    mu: np.ndarray
    omega: np.ndarray
    # None draws the free loadings from the seed; a float is a constant uniqueness
    loadings: np.ndarray = None
    uniquenesses: object = 1.0
    seed: int = 0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.Q = np.asarray(self.Q, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float).reshape(self.G, self.L)
        self.omega = np.asarray(self.omega, dtype=float).reshape(self.G, self.L, self.L)
        if min(self.S, self.T, self.R, self.G, self.L) < 1 or self.R < self.L:
            raise InvalidParameter(f"invalid dimensions S={self.S} T={self.T} R={self.R} G={self.G} L={self.L}")
        if self.p.shape != (self.G,) or self.Q.shape != (self.G, self.G):
            raise DimensionMismatch("p must have G entries and Q must be G x G")
        if np.any(self.p < 0) or abs(self.p.sum() - 1.0) > PROB_TOL:
            raise InvalidParameter(f"p is not a probability vector: {self.p}")
        if np.any(self.Q < 0) or np.any(np.abs(self.Q.sum(axis=1) - 1.0) > PROB_TOL):
            raise InvalidParameter("rows of Q must be probability vectors")
        if np.any(self.omega[0] != np.diag(np.diag(self.omega[0]))):
            raise InvalidParameter("the covariance of cluster 1 must be diagonal")
        for g in range(self.G):
            numkit.cholesky(self.omega[g])
        if self.loadings is not None:
            self.loadings = np.asarray(self.loadings, dtype=float)
            if self.loadings.shape != (self.R, self.L):
                raise DimensionMismatch(f"loadings must be {self.R} x {self.L}")
        u = np.asarray(self.uniquenesses, dtype=float)
        if u.ndim not in (0, 1) or (u.ndim == 1 and u.shape != (self.R,)) or np.any(u <= 0):
            raise InvalidParameter("uniquenesses must be a positive constant or R positive values")


@dataclass
class SimTruth:
    B: np.ndarray
    V: np.ndarray
    mu: np.ndarray
    omega: np.ndarray
    p: np.ndarray
    Q: np.ndarray
    Z: np.ndarray
    X: np.ndarray
    tau2: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.tau2 is None:
            self.tau2 = np.ones(self.B.shape[1])

    def to_state(self) -> ModelState:
        return ModelState(
            B=self.B, sigma2=self.V, tau2=self.tau2, mu=self.mu, omega=self.omega,
            p=self.p, Q=self.Q, X=self.X, Z=self.Z,
        )


def benchmark_design(seed: int = 0, S: int = 200, T: int = 5, R: int = 20) -> SimConfig:
    """The simulated study: G=4 clusters, L=3 factors, known p, Q, mu and Omega."""
    return SimConfig(
        S=S, T=T, R=R, G=4, L=3,
        p=BENCHMARK_P, Q=BENCHMARK_Q, mu=BENCHMARK_MU, omega=np.array(BENCHMARK_OMEGA),
        seed=seed,
    )


def panel_like(S: int, T: int, R: int, G: int = 4, L: int = 3, seed: int = 0) -> SimConfig:
    """
    Generic well-separated design of any shape, e.g. 252 x 4 x 15 to mimic a
    real cohort. Means are drawn N(0, 6^2) from the seed, cluster 1 has unit
    variances and the others a mild equicorrelation.
    """
    rng = numkit.RngStream(seed, SIM_STREAM, (99,))
    mu = 6.0 * rng.generator.standard_normal((G, L))
    omega = np.array([np.eye(L)] + [(1.0 + 0.5 * g) * np.eye(L) + 0.2 * (np.ones((L, L)) - np.eye(L)) for g in range(1, G)])
    Q = np.full((G, G), 0.3 / (G - 1)) + np.eye(G) * (0.7 - 0.3 / (G - 1)) if G > 1 else np.ones((1, 1))
    return SimConfig(S=S, T=T, R=R, G=G, L=L, p=np.full(G, 1.0 / G), Q=Q, mu=mu, omega=omega, seed=seed)


def random_loadings(R: int, L: int, rng: numkit.RngStream, scale: float = 1.0):
    """Loadings satisfying the constraint with free entries i.i.d. N(0, scale)."""
    B = np.tril(np.sqrt(scale) * rng.generator.standard_normal((R, L)), k=-1)
    B[np.arange(L), np.arange(L)] = 1.0
    return B


def draw_latent_path(p, Q, mu, omega, S: int, T: int, rng: numkit.RngStream):
    """Assignments Z (S x T, 1-based) from the Markov chain and factors X (S x T x L)."""
    p = np.asarray(p, dtype=float)
    Q = np.asarray(Q, dtype=float)
    mu = np.asarray(mu, dtype=float)
    L = mu.shape[1]
    gen = rng.generator

    Z = np.empty((S, T), dtype=int)
    if S:
        Z[:, 0] = numkit.categorical_from_uniforms(np.broadcast_to(p, (S, p.shape[0])), gen.random(S))
        for t in range(1, T):
            Z[:, t] = numkit.categorical_from_uniforms(Q[Z[:, t - 1] - 1], gen.random(S))

    noise = gen.standard_normal((S, T, L))
    X = np.empty((S, T, L))
    for g in range(mu.shape[0]):
        rows = Z == g + 1
        if np.any(rows):
            chol = numkit.cholesky(omega[g])
            X[rows] = mu[g] + noise[rows] @ chol.T
    return Z, X


def simulate_dataset(config: SimConfig):
    """Generate (Dataset, SimTruth); deterministic given ``config.seed``."""
    rng = numkit.RngStream(config.seed, SIM_STREAM)
    S, T, R, L = config.S, config.T, config.R, config.L

    B = config.loadings.copy() if config.loadings is not None else random_loadings(R, L, rng.substream(0))
    V = np.broadcast_to(np.asarray(config.uniquenesses, dtype=float), (R,)).copy()

    Z, X = draw_latent_path(config.p, config.Q, config.mu, config.omega, S, T, rng.substream(1))
    noise = rng.substream(2).generator.standard_normal((S, T, R))
    y = X @ B.T + noise * np.sqrt(V)

    truth = SimTruth(B=B, V=V, mu=config.mu.copy(), omega=config.omega.copy(), p=config.p.copy(), Q=config.Q.copy(), Z=Z, X=X)
    problems = validate_state(truth.to_state())
    if problems:
        raise InvalidParameter("simulated truth violates the model constraints", violations=[str(v) for v in problems])
    logger.info("simulated panel S=%d T=%d R=%d with initial cluster counts %s", S, T, R,
                np.bincount(Z[:, 0], minlength=config.G + 1)[1:].tolist())
    return Dataset(y=y), truth


def to_truth_dict(truth: SimTruth) -> dict:
    return {
        "B": truth.B.tolist(),
        "V": truth.V.tolist(),
        "tau2": truth.tau2.tolist(),
        "mu": truth.mu.tolist(),
        "Omega": truth.omega.tolist(),
        "p": truth.p.tolist(),
        "Q": truth.Q.tolist(),
        "Z": truth.Z.tolist(),
        "X": truth.X.tolist(),
    }


def from_truth_dict(blocks: dict) -> SimTruth:
    missing = [k for k in ("B", "V", "mu", "Omega", "p", "Q", "Z", "X") if k not in blocks]
    if missing:
        raise DimensionMismatch(f"truth file is missing blocks {missing}")
    return SimTruth(
        B=np.asarray(blocks["B"], dtype=float),
        V=np.asarray(blocks["V"], dtype=float),
        mu=np.asarray(blocks["mu"], dtype=float),
        omega=np.asarray(blocks["Omega"], dtype=float),
        p=np.asarray(blocks["p"], dtype=float),
        Q=np.asarray(blocks["Q"], dtype=float),
        Z=np.asarray(blocks["Z"], dtype=int),
        X=np.asarray(blocks["X"], dtype=float),
        tau2=np.asarray(blocks["tau2"], dtype=float) if "tau2" in blocks else None,
    )
