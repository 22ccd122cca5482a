# bdcfm/model.py
"""
Domain types: the observed panel, every model unknown, the prior
hyperparameters and the stored chain, plus structural validation.

Cluster indices are 1-based wherever they are visible (Z arrays, file
columns, reports); arrays indexed by cluster are 0-based internally, so
cluster g lives at position g - 1.

The order of the variables in a Dataset is the analyst's choice and matters:
the loadings constraint fixes the first L rows of B, so the leading
variables should be chosen carefully as the anchors of the factors.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit
from .errors import DimensionMismatch, InvalidParameter, NonFiniteValue, NotPositiveDefinite

PROB_TOL = 1e-12
SYMMETRY_RTOL = 1e-10

# prior defaults for the loadings variances, uniquenesses and cluster 1 variances
N_TAU = 1.0
N_TAU_S2_TAU = 1.0
N_SIGMA = 2.2
N_SIGMA_S2_SIGMA = 0.1
N_OMEGA = 4.0
ALPHA = 2.0


@dataclass
class Dataset:
    """Complete panel: ``y[i, t]`` is the R-vector of subject i at time t."""

    y: np.ndarray
    subject_ids: list = None
    variable_names: list = None
    times: list = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 3:
            raise DimensionMismatch(f"panel must be S x T x R, got shape {self.y.shape}")
        if not np.all(np.isfinite(self.y)):
            bad = np.argwhere(~np.isfinite(self.y))[:5].tolist()
            raise NonFiniteValue("panel contains non-finite values", cells=bad)
        S, T, R = self.y.shape
        if self.subject_ids is None:
            self.subject_ids = [str(i + 1) for i in range(S)]
        if self.variable_names is None:
            self.variable_names = [f"y{r + 1}" for r in range(R)]
        if self.times is None:
            self.times = list(range(1, T + 1))
        if len(self.subject_ids) != S or len(self.variable_names) != R or len(self.times) != T:
            raise DimensionMismatch("labels do not match the panel shape", shape=[S, T, R])

    @property
    def S(self):
        return self.y.shape[0]

    @property
    def T(self):
        return self.y.shape[1]

    @property
    def R(self):
        return self.y.shape[2]

    def stacked(self):
        """(S*T) x R matrix, rows ordered subject-major then time."""
        return self.y.reshape(self.S * self.T, self.R)


@dataclass
class FactorLoadings:
    B: np.ndarray
    tau2: np.ndarray


@dataclass
class Uniquenesses:
    sigma2: np.ndarray


@dataclass
class ClusterParams:
    mu: np.ndarray
    omega: np.ndarray

    @property
    def G(self):
        return self.mu.shape[0]


@dataclass
class MarkovParams:
    p: np.ndarray
    Q: np.ndarray


@dataclass
class LatentState:
    X: np.ndarray
    Z: np.ndarray


@dataclass
class ModelState:
    """One full Gibbs configuration. ``Z`` holds 1-based cluster labels."""

    B: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    mu: np.ndarray
    omega: np.ndarray
    p: np.ndarray
    Q: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    @property
    def S(self):
        return self.X.shape[0]

    @property
    def T(self):
        return self.X.shape[1]

    @property
    def R(self):
        return self.B.shape[0]

    @property
    def L(self):
        return self.B.shape[1]

    @property
    def G(self):
        return self.mu.shape[0]

    @property
    def loadings(self):
        return FactorLoadings(self.B, self.tau2)

    @property
    def uniquenesses(self):
        return Uniquenesses(self.sigma2)

    @property
    def clusters(self):
        return ClusterParams(self.mu, self.omega)

    @property
    def markov(self):
        return MarkovParams(self.p, self.Q)

    @property
    def latent(self):
        return LatentState(self.X, self.Z)

    def copy(self):
        return ModelState(**{name: np.array(getattr(self, name), copy=True) for name in self.__dataclass_fields__})


@dataclass
class PriorSpec:
    """
    Hyperparameters. ``S_Omega[k]`` is the inverse Wishart scale of cluster
    k + 2 (clusters 2..G); ``m_mu``/``C_mu`` are indexed by cluster - 1.
    """

    n_tau: float
    s2_tau: float
    n_sigma: float
    s2_sigma: float
    n_omega: np.ndarray
    s2_omega: np.ndarray
    n_Omega: float
    S_Omega: np.ndarray
    m_mu: np.ndarray
    C_mu: np.ndarray
    alpha: np.ndarray
    alpha_rows: np.ndarray

    @property
    def G(self):
        return self.m_mu.shape[0]

    @property
    def L(self):
        return self.m_mu.shape[1]

    @classmethod
    def default(cls, m_mu, C_mu, s2_omega, S_Omega):
        """Fill the fixed defaults around data-driven cluster hyperparameters."""
        m_mu = np.atleast_2d(np.asarray(m_mu, dtype=float))
        G, L = m_mu.shape
        return cls(
            n_tau=N_TAU,
            s2_tau=N_TAU_S2_TAU / N_TAU,
            n_sigma=N_SIGMA,
            s2_sigma=N_SIGMA_S2_SIGMA / N_SIGMA,
            n_omega=np.full(L, N_OMEGA),
            s2_omega=np.asarray(s2_omega, dtype=float).reshape(L),
            n_Omega=float(L + 2),
            S_Omega=np.asarray(S_Omega, dtype=float).reshape(max(G - 1, 0), L, L),
            m_mu=m_mu,
            C_mu=np.asarray(C_mu, dtype=float).reshape(G, L, L),
            alpha=np.full(G, ALPHA),
            alpha_rows=np.full((G, G), ALPHA),
        )

    def violations(self):
        found = []
        scalars = {"n_tau": self.n_tau, "s2_tau": self.s2_tau, "n_sigma": self.n_sigma, "s2_sigma": self.s2_sigma, "n_Omega": self.n_Omega}
        for name, value in scalars.items():
            if not np.isfinite(value) or value <= 0:
                found.append(Violation("prior positivity", name, f"{name}={value}"))
        for name in ("n_omega", "s2_omega", "alpha", "alpha_rows"):
            arr = np.asarray(getattr(self, name))
            if np.any(~np.isfinite(arr)) or np.any(arr <= 0):
                found.append(Violation("prior positivity", name, "entries must be positive"))
        matrices = [("C_mu", g + 1, m) for g, m in enumerate(self.C_mu)]
        matrices += [("S_Omega", g + 2, m) for g, m in enumerate(self.S_Omega)]
        for name, g, mat in matrices:
            if not _is_spd(mat):
                found.append(Violation("prior SPD", f"{name}[{g}]", "matrix is not symmetric positive definite"))
        return found


@dataclass
class Violation:
    constraint: str
    location: str
    detail: str = ""

    def __str__(self):
        return f"{self.constraint} at {self.location}: {self.detail}"


@dataclass
class SweepStats:
    n_tg: np.ndarray
    m_jg: np.ndarray


def compute_sweep_stats(Z, G: int) -> SweepStats:
    """Cluster sizes per time (T x G) and transition counts (G x G) of 1-based labels Z."""
    Z = np.asarray(Z, dtype=int)
    S, T = Z.shape
    n_tg = np.zeros((T, G), dtype=int)
    np.add.at(n_tg, (np.broadcast_to(np.arange(T), (S, T)), Z - 1), 1)
    m_jg = np.zeros((G, G), dtype=int)
    if T > 1:
        np.add.at(m_jg, (Z[:, :-1] - 1, Z[:, 1:] - 1), 1)
    return SweepStats(n_tg=n_tg, m_jg=m_jg)


def _is_spd(mat):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or not np.all(np.isfinite(mat)):
        return False
    scale = max(np.max(np.abs(mat)), 1e-300)
    if np.max(np.abs(mat - mat.T)) > SYMMETRY_RTOL * scale:
        return False
    try:
        numkit.cholesky(mat)
    except NotPositiveDefinite:
        return False
    return True


def _check_loadings(loadings: FactorLoadings, found):
    B = loadings.B
    R, L = B.shape
    if R < L:
        found.append(Violation("dimensions", "B", f"R={R} < L={L}"))
    if not np.all(np.isfinite(B)):
        found.append(Violation("finite loadings", "B"))
    for l in range(min(L, R)):
        if B[l, l] != 1.0:
            found.append(Violation("loadings diagonal", f"B[{l + 1},{l + 1}]", f"value {B[l, l]}"))
        for k in range(l + 1, L):
            if B[l, k] != 0.0:
                found.append(Violation("loadings upper triangle", f"B[{l + 1},{k + 1}]", f"value {B[l, k]}"))
    _check_positive("tau2", loadings.tau2, found)


def _check_positive(name, arr, found):
    for idx in np.flatnonzero(~(np.isfinite(arr) & (arr > 0))):
        found.append(Violation(f"{name} positive", f"{name}[{idx + 1}]", f"value {arr[idx]}"))


def _check_clusters(clusters: ClusterParams, found):
    omega1 = clusters.omega[0]
    off = omega1 - np.diag(np.diag(omega1))
    if np.any(off != 0.0):
        found.append(Violation("Ω₁ diagonality", "omega[1]", "off-diagonal entries are non-zero"))
    if np.any(~(np.diag(omega1) > 0)) or not np.all(np.isfinite(omega1)):
        found.append(Violation("Ω₁ positivity", "omega[1]", "diagonal entries must be positive"))
    for g in range(1, clusters.G):
        if not _is_spd(clusters.omega[g]):
            found.append(Violation("Ω SPD", f"omega[{g + 1}]", "not symmetric positive definite"))
    if not np.all(np.isfinite(clusters.mu)):
        found.append(Violation("finite means", "mu"))


def _check_markov(markov: MarkovParams, found):
    if np.any(markov.p < 0) or abs(markov.p.sum() - 1.0) > PROB_TOL:
        found.append(Violation("initial probabilities", "p", f"sum {markov.p.sum()!r}"))
    for j, row in enumerate(markov.Q):
        if np.any(row < 0) or abs(row.sum() - 1.0) > PROB_TOL:
            found.append(Violation("transition row stochastic", f"Q[{j + 1},:]", f"sum {row.sum()!r}"))


def _check_latent(latent: LatentState, G: int, found):
    Z = np.asarray(latent.Z)
    if not np.issubdtype(Z.dtype, np.integer):
        found.append(Violation("assignment range", "Z", "labels must be integers"))
    elif np.any(Z < 1) or np.any(Z > G):
        bad = np.argwhere((Z < 1) | (Z > G))[:5] + 1
        found.append(Violation("assignment range", "Z", f"out-of-range cells {bad.tolist()}"))
    if not np.all(np.isfinite(latent.X)):
        found.append(Violation("finite factors", "X"))


def validate_state(state: ModelState) -> list:
    """Every violated structural constraint of ``state``; an empty list means valid."""
    found = []
    R, L = state.B.shape
    G = state.mu.shape[0]
    S, T = state.Z.shape

    shapes = {
        "sigma2": (state.sigma2.shape, (R,)),
        "tau2": (state.tau2.shape, (L,)),
        "mu": (state.mu.shape, (G, L)),
        "omega": (state.omega.shape, (G, L, L)),
        "p": (state.p.shape, (G,)),
        "Q": (state.Q.shape, (G, G)),
        "X": (state.X.shape, (S, T, L)),
    }
    for name, (got, want) in shapes.items():
        if got != want:
            found.append(Violation("dimensions", name, f"shape {got}, expected {want}"))
    if found:
        return found

    _check_loadings(state.loadings, found)
    _check_positive("sigma2", state.uniquenesses.sigma2, found)
    _check_clusters(state.clusters, found)
    _check_markov(state.markov, found)
    _check_latent(state.latent, G, found)
    return found


def complete_data_loglik(dataset: Dataset, state: ModelState) -> float:
    """log p(Y | B, V, X) + log p(X | Z, mu, Omega) + log p(Z | p, Q)."""
    y = dataset.stacked()
    X = state.X.reshape(-1, state.L)
    Zf = state.Z.reshape(-1)
    resid = y - X @ state.B.T
    total = -0.5 * np.sum(np.log(2.0 * np.pi * state.sigma2)) * y.shape[0]
    total -= 0.5 * np.sum(resid ** 2 / state.sigma2)
    for g in range(state.G):
        rows = Zf == g + 1
        if np.any(rows):
            total += np.sum(numkit.mvn_logpdf(X[rows], state.mu[g], state.omega[g]))
    with np.errstate(divide="ignore"):
        total += np.sum(np.log(state.p[state.Z[:, 0] - 1]))
        if state.T > 1:
            total += np.sum(np.log(state.Q[state.Z[:, :-1] - 1, state.Z[:, 1:] - 1]))
    return float(total)


BLOCKS = ("B", "sigma2", "tau2", "mu", "Omega", "p", "Q")
DRAW_FIELDS = ("B", "sigma2", "tau2", "mu", "omega", "p", "Q", "loglik")


def block_columns(block: str, R: int, L: int, G: int) -> list:
    """Systematic 1-based column names of one parameter block."""
    if block == "B":
        return [f"B[{r + 1},{l + 1}]" for r in range(R) for l in range(L)]
    if block == "sigma2":
        return [f"sigma2[{r + 1}]" for r in range(R)]
    if block == "tau2":
        return [f"tau2[{l + 1}]" for l in range(L)]
    if block == "mu":
        return [f"mu[{g + 1},{l + 1}]" for g in range(G) for l in range(L)]
    if block == "Omega":
        return [f"Omega[{g + 1},{k + 1},{l + 1}]" for g in range(G) for k in range(L) for l in range(k + 1)]
    if block == "p":
        return [f"p[{g + 1}]" for g in range(G)]
    if block == "Q":
        return [f"Q[{j + 1},{g + 1}]" for j in range(G) for g in range(G)]
    raise InvalidParameter(f"unknown parameter block {block!r}")


def flatten_block(block: str, values) -> np.ndarray:
    """Flatten a stack of draws of one block to rows matching ``block_columns``."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if block == "Omega":
        L = values.shape[-1]
        rows, cols = np.tril_indices(L)
        return values[:, :, rows, cols].reshape(n, -1)
    return values.reshape(n, -1)


@dataclass
class ChainOutput:
    """
    Stored post-burn-in draws (one entry per stored iteration) plus the
    accumulated per-(i, t) cluster frequencies.

    When draws are streamed to disk the arrays hold one chunk only: row 0 is
    stored draw ``first_draw`` of the run, while ``z_counts`` covers every
    draw so far.
    """

    B: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    mu: np.ndarray
    omega: np.ndarray
    p: np.ndarray
    Q: np.ndarray
    loglik: np.ndarray
    z_counts: np.ndarray
    meta: dict = field(default_factory=dict)
    first_draw: int = 0

    @classmethod
    def allocate(cls, n_stored, S, T, R, L, G, meta=None):
        return cls(
            B=np.zeros((n_stored, R, L)),
            sigma2=np.zeros((n_stored, R)),
            tau2=np.zeros((n_stored, L)),
            mu=np.zeros((n_stored, G, L)),
            omega=np.zeros((n_stored, G, L, L)),
            p=np.zeros((n_stored, G)),
            Q=np.zeros((n_stored, G, G)),
            loglik=np.zeros(n_stored),
            z_counts=np.zeros((S, T, G), dtype=np.int64),
            meta=dict(meta or {}),
        )

    @property
    def stored_iterations(self):
        return self.B.shape[0]

    @property
    def dims(self):
        S, T, G = self.z_counts.shape
        R, L = self.B.shape[1:]
        return S, T, R, L, G

    def record(self, k: int, state: ModelState, loglik: float = np.nan):
        """Store ``state`` as the k-th (0-based) stored iteration."""
        self.B[k] = state.B
        self.sigma2[k] = state.sigma2
        self.tau2[k] = state.tau2
        self.mu[k] = state.mu
        self.omega[k] = state.omega
        self.p[k] = state.p
        self.Q[k] = state.Q
        self.loglik[k] = loglik
        S, T = state.Z.shape
        self.z_counts[np.arange(S)[:, None], np.arange(T)[None, :], state.Z - 1] += 1

    @property
    def z_probs(self):
        totals = self.z_counts.sum(axis=2, keepdims=True)
        if np.any(totals == 0):
            raise InvalidParameter("no assignment draws have been accumulated")
        return self.z_counts / totals

    @property
    def z_mode(self):
        # argmax returns the first maximum, so ties go to the smallest label
        return np.argmax(self.z_counts, axis=2) + 1

    def draws(self, block: str):
        key = "omega" if block == "Omega" else block
        return getattr(self, key)

    def block(self, block: str):
        """(stored x columns) array and column names for one parameter block."""
        S, T, R, L, G = self.dims
        return flatten_block(block, self.draws(block)), block_columns(block, R, L, G)

    def head(self, n: int) -> "ChainOutput":
        """The first ``n`` rows of every per-draw array, sharing z_counts and meta."""
        return replace(self, **{name: getattr(self, name)[:n] for name in DRAW_FIELDS})
