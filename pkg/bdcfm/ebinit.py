# bdcfm/ebinit.py
"""
Empirical-Bayes construction of the priors and of the sampler's starting point.

Pipeline: stack the panel -> unrotated factor extraction -> transform the
loadings to the lower-unitriangular constraint -> weighted least squares
(Thomson) scores -> k-means on the scores, clusters ordered by decreasing
size -> LDL rescaling so cluster 1's sample covariance is diagonal ->
cluster-specific priors. Anchoring each cluster's prior on its own k-means
group keeps the cluster labels from switching during sampling.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg
from sklearn.cluster import KMeans

from . import numkit
from .errors import (
    ConvergenceFailure,
    DimensionMismatch,
    EmptyCluster,
    InvalidParameter,
    NotPositiveDefinite,
    SingularGram,
    SingularTopBlock,
)
from .model import Dataset, ModelState, PriorSpec, compute_sweep_stats

logger = logging.getLogger(__name__)

UNIQUENESS_FLOOR = 0.005
PAF_TOL = 1e-5
PAF_MAX_ITER = 200
TOP_BLOCK_MAX_COND = 1e8
GRAM_MAX_COND = 1e12
KMEANS_RESTARTS = 20
KMEANS_MAX_ITER = 300
KMEANS_ATTEMPTS = 10
MIN_CLUSTER_SIZE = 2
TAU2_FLOOR = 0.1


@dataclass
class EbArtifacts:
    B_tilde: np.ndarray
    M: np.ndarray
    B_hat: np.ndarray
    V_hat: np.ndarray
    X_hat: np.ndarray
    labels: np.ndarray
    sizes: np.ndarray
    L1: np.ndarray = None
    D1: np.ndarray = None
    # column means and standard deviations used for the extraction step
    center: np.ndarray = None
    scale: np.ndarray = None


def extract_loadings(Y_stacked, L: int, tol: float = PAF_TOL, max_iter: int = PAF_MAX_ITER):
    """
    Unrotated loadings by iterated principal-axis factoring.

    Communalities start at the squared multiple correlations and are
    refined until their largest change drops below ``tol``. Returns
    (B_tilde, V_hat) with V_hat = 1 - communality clipped to [0.005, 1].
    """
    Y = np.asarray(Y_stacked, dtype=float)
    n, R = Y.shape
    if n <= R:
        raise DimensionMismatch(f"need more observations than variables, got n={n}, R={R}")
    if not 1 <= L <= R:
        raise InvalidParameter(f"number of factors must be in 1..{R}, got {L}")

    corr = np.atleast_2d(np.corrcoef(Y, rowvar=False))
    if not np.all(np.isfinite(corr)):
        raise InvalidParameter("a variable is constant; correlations are undefined")
    try:
        smc = 1.0 - 1.0 / np.diag(linalg.inv(corr))
    except linalg.LinAlgError:
        smc = 1.0 - 1.0 / np.diag(linalg.pinv(corr))
    h2 = np.clip(smc, 0.0, 1.0 - UNIQUENESS_FLOOR)

    for iteration in range(1, max_iter + 1):
        reduced = corr.copy()
        np.fill_diagonal(reduced, h2)
        vals, vecs = linalg.eigh(reduced)
        top = np.argsort(vals)[::-1][:L]
        loadings = vecs[:, top] * np.sqrt(np.clip(vals[top], 0.0, None))
        new_h2 = np.clip(np.sum(loadings ** 2, axis=1), 0.0, 1.0 - UNIQUENESS_FLOOR)
        change = np.max(np.abs(new_h2 - h2))
        h2 = new_h2
        if change < tol:
            logger.debug("factor extraction converged after %d iterations", iteration)
            break
    else:
        raise ConvergenceFailure(f"factor extraction did not converge in {max_iter} iterations", change=float(change))

    signs = np.where(loadings.sum(axis=0) < 0, -1.0, 1.0)
    B_tilde = loadings * signs
    V_hat = np.clip(1.0 - np.sum(B_tilde ** 2, axis=1), UNIQUENESS_FLOOR, 1.0)
    return B_tilde, V_hat


def constrain_loadings(B_tilde):
    """M = inverse of the top L x L block; B_hat = B_tilde M has an exact identity top block."""
    B_tilde = np.asarray(B_tilde, dtype=float)
    R, L = B_tilde.shape
    if R < L:
        raise DimensionMismatch(f"loadings have fewer rows ({R}) than factors ({L})")
    top = B_tilde[:L, :L]
    cond = np.linalg.cond(top)
    if not np.isfinite(cond) or cond > TOP_BLOCK_MAX_COND:
        raise SingularTopBlock(f"top {L}x{L} block of the loadings is ill-conditioned (cond={cond:.3g})", cond=float(cond))
    M = linalg.inv(top)
    B_hat = B_tilde @ M
    B_hat[:L, :L] = np.eye(L)
    return M, B_hat


def wls_scores(Y_stacked, B_hat, V_hat):
    """Per-observation (B' V^-1 B)^-1 B' V^-1 y, one row of scores per row of Y."""
    Y = np.asarray(Y_stacked, dtype=float)
    B_hat = np.asarray(B_hat, dtype=float)
    W = B_hat.T / np.asarray(V_hat, dtype=float)
    gram = W @ B_hat
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > GRAM_MAX_COND:
        raise SingularGram(f"B' V^-1 B is singular (cond={cond:.3g})", cond=float(cond))
    return linalg.solve(gram, W @ Y.T, assume_a="pos").T


def kmeans_cluster(X_hat, G: int, rng: numkit.RngStream):
    """
    1-based k-means labels, relabeled so label 1 is the largest cluster
    (ties broken by the smaller original label).
    """
    X_hat = np.asarray(X_hat, dtype=float)
    n = X_hat.shape[0]
    if G < 1 or n < G:
        raise InvalidParameter(f"need at least G={G} scores for k-means, got {n}")
    if G == 1:
        return np.ones(n, dtype=int)

    for attempt in range(KMEANS_ATTEMPTS):
        seed = int(rng.substream(attempt).generator.integers(0, 2 ** 31 - 1))
        fit = KMeans(
            n_clusters=G,
            init="k-means++",
            n_init=KMEANS_RESTARTS,
            max_iter=KMEANS_MAX_ITER,
            random_state=seed,
        ).fit(X_hat)
        counts = np.bincount(fit.labels_, minlength=G)
        if counts.min() >= MIN_CLUSTER_SIZE:
            order = sorted(range(G), key=lambda k: (-counts[k], k))
            relabel = np.empty(G, dtype=int)
            relabel[order] = np.arange(1, G + 1)
            return relabel[fit.labels_]
        logger.warning("k-means attempt %d left a cluster with %d members, retrying", attempt + 1, counts.min())
    raise EmptyCluster(
        f"k-means produced a cluster with fewer than {MIN_CLUSTER_SIZE} members in {KMEANS_ATTEMPTS} attempts",
        G=G,
    )


def build_priors(X_hat, labels, G: int):
    """
    Cluster-specific priors from labelled scores.

    Returns (PriorSpec, updates) where updates holds the rescaled scores
    ``X_hat`` (premultiplied by L1^-1) and the LDL factors ``L1``, ``D1``.
    """
    X_hat = np.asarray(X_hat, dtype=float)
    labels = np.asarray(labels, dtype=int)
    L = X_hat.shape[1]

    means, covs = [], []
    for g in range(1, G + 1):
        members = X_hat[labels == g]
        if members.shape[0] < MIN_CLUSTER_SIZE:
            raise EmptyCluster(f"cluster {g} has {members.shape[0]} members; its covariance is undefined", cluster=g)
        means.append(members.mean(axis=0))
        covs.append(np.atleast_2d(np.cov(members, rowvar=False)))

    try:
        L1, D1 = numkit.ldl(covs[0])
    except NotPositiveDefinite as err:
        raise NotPositiveDefinite("sample covariance of cluster 1 is not positive definite", cluster=1) from err
    L1_inv = linalg.solve_triangular(L1, np.eye(L), lower=True, unit_diagonal=True)

    m_mu = np.array([L1_inv @ m for m in means])
    C_mu = np.array([numkit.symmetrize(L1_inv @ c @ L1_inv.T) for c in covs])
    C_mu[0] = D1
    for g in range(1, G):
        try:
            numkit.cholesky(C_mu[g])
        except NotPositiveDefinite as err:
            raise NotPositiveDefinite(f"sample covariance of cluster {g + 1} is not positive definite", cluster=g + 1) from err

    priors = PriorSpec.default(m_mu=m_mu, C_mu=C_mu, s2_omega=np.diag(D1).copy(), S_Omega=C_mu[1:].copy())
    updates = {"X_hat": X_hat @ L1_inv.T, "L1": L1, "D1": D1}
    return priors, updates


def run_empirical_bayes(dataset: Dataset, G: int, L: int, rng: numkit.RngStream):
    """
    Run the whole empirical-Bayes pipeline on a panel.

    Extraction works on column-standardized data; the loadings and
    uniquenesses are mapped back to the panel's own units before scoring so
    the scores, priors and initial values share the sampler's scale.
    For an already standardized panel this mapping is the identity.
    """
    if dataset.R < L:
        raise DimensionMismatch(f"need R >= L, got R={dataset.R}, L={L}")
    Y = dataset.stacked()
    center = Y.mean(axis=0)
    scale = Y.std(axis=0)
    if np.any(scale <= 0):
        constant = [dataset.variable_names[r] for r in np.flatnonzero(scale <= 0)]
        raise InvalidParameter(f"constant variables cannot enter the factor model: {constant}")

    B_std, V_hat = extract_loadings((Y - center) / scale, L)
    B_tilde = B_std * scale[:, None]
    M, B_hat = constrain_loadings(B_tilde)
    X_hat = wls_scores(Y, B_hat, V_hat * scale ** 2)
    labels = kmeans_cluster(X_hat, G, rng.substream(0))
    logger.info("k-means cluster sizes: %s", np.bincount(labels, minlength=G + 1)[1:].tolist())

    priors, updates = build_priors(X_hat, labels, G)
    artifacts = EbArtifacts(
        B_tilde=B_tilde,
        M=M,
        B_hat=B_hat,
        V_hat=V_hat,
        X_hat=X_hat,
        labels=labels,
        sizes=np.bincount(labels, minlength=G + 1)[1:],
        center=center,
        scale=scale,
    )
    return priors, replace(artifacts, **updates)


def initialize_state(dataset: Dataset, priors: PriorSpec, artifacts: EbArtifacts, compensate_loadings: bool = False) -> ModelState:
    """
    Starting values for the sampler.

    With ``compensate_loadings`` the loadings are B_hat L1 so that B x is
    unchanged by the L1^-1 rescaling of the scores; otherwise B_hat is used
    as is. Either way rows 1..L are set to their exact constraint values.
    """
    S, T, R = dataset.S, dataset.T, dataset.R
    L, G = priors.L, priors.G

    B = artifacts.B_hat @ artifacts.L1 if compensate_loadings else artifacts.B_hat.copy()
    B[:L, :] = np.tril(B[:L, :], k=-1)
    B[np.arange(L), np.arange(L)] = 1.0

    tau2 = np.empty(L)
    for l in range(L):
        free = B[l + 1:, l]
        tau2[l] = max(np.var(free) if free.size else 0.0, TAU2_FLOOR)

    scale = artifacts.scale if artifacts.scale is not None else np.ones(R)
    sigma2 = artifacts.V_hat * scale ** 2

    X = artifacts.X_hat.reshape(S, T, L).copy()
    Z = artifacts.labels.reshape(S, T).astype(int)

    omega = priors.C_mu.copy()
    omega[0] = np.diag(np.diag(omega[0]))

    stats = compute_sweep_stats(Z, G)
    p = stats.n_tg[0] + priors.alpha
    p = p / p.sum()
    Q = stats.m_jg + priors.alpha_rows
    Q = Q / Q.sum(axis=1, keepdims=True)

    return ModelState(
        B=B,
        sigma2=sigma2,
        tau2=tau2,
        mu=priors.m_mu.copy(),
        omega=omega,
        p=p,
        Q=Q,
        X=X,
        Z=Z,
    )
