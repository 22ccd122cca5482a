# bdcfm/gibbs.py
"""
Gibbs sampler for the dynamic clustering factor model.

One sweep updates, in this order: factors X, cluster means mu, the diagonal
covariance of cluster 1, the covariances of clusters 2..G, loadings B,
uniquenesses sigma2, loadings variances tau2, initial probabilities p,
transition matrix Q and finally the assignments Z. Every update draws from
its exact full conditional; a cluster with no members gets a draw from its
prior.

Each update owns a child stream of the sweep's stream, so a sweep is a pure
function of (state, seed, iteration). With ``parallel_subjects`` the
per-subject noise comes from substreams keyed by subject and is generated in
joblib threads; the result does not depend on thread scheduling but differs
from the serial draw order.
"""

import logging
import time
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg
from tqdm import tqdm

from . import numkit, simgen
from .errors import BdcfmError, DimensionMismatch, InvalidParameter
from .model import (
    ChainOutput,
    Dataset,
    ModelState,
    PriorSpec,
    complete_data_loglik,
    compute_sweep_stats,
    validate_state,
)

logger = logging.getLogger(__name__)

DEFAULT_ITERATIONS = 50_000
DEFAULT_BURN_IN = 10_000
DEFAULT_THIN = 10
SAMPLER_STREAM = 1


@dataclass
class SamplerConfig:
    iterations: int = DEFAULT_ITERATIONS
    burn_in: int = DEFAULT_BURN_IN
    thin: int = DEFAULT_THIN
    seed: int = 0
    parallel_subjects: bool = False
    # multiply the t=1 assignment weight by p_g (off reproduces the published conditional)
    include_initial_prob_in_z1: bool = False
    n_jobs: int = -1

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidParameter(f"iterations must be positive, got {self.iterations}")
        if not 0 <= self.burn_in < self.iterations:
            raise InvalidParameter(f"burn-in must be in [0, {self.iterations}), got {self.burn_in}")
        if self.thin < 1:
            raise InvalidParameter(f"thin must be at least 1, got {self.thin}")
        if self.seed < 0:
            raise InvalidParameter(f"seed must be non-negative, got {self.seed}")

    @property
    def n_stored(self):
        return (self.iterations - self.burn_in) // self.thin


def _subject_normals(rng, S, shape, parallel, n_jobs=-1, uniform=False):
    """(S, *shape) array of noise, serial or one substream per subject."""
    if not parallel:
        size = (S,) + tuple(shape)
        return rng.generator.random(size) if uniform else rng.generator.standard_normal(size)

    def draw(i):
        gen = rng.substream(i).generator
        return gen.random(shape) if uniform else gen.standard_normal(shape)

    rows = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(draw)(i) for i in range(S))
    return np.array(rows).reshape((S,) + tuple(shape))


def update_factors(dataset: Dataset, state: ModelState, priors: PriorSpec, rng, parallel=False, n_jobs=-1):
    """x_it | rest ~ N(C (B'V^-1 y_it + Omega_g^-1 mu_g), C) with C = (B'V^-1 B + Omega_g^-1)^-1."""
    S, T, L = state.S, state.T, state.L
    BtVinv = state.B.T / state.sigma2
    gram = BtVinv @ state.B
    data_term = dataset.y @ BtVinv.T
    noise = _subject_normals(rng, S, (T, L), parallel, n_jobs)

    X = np.empty((S, T, L))
    for g in range(state.G):
        rows = state.Z == g + 1
        if not np.any(rows):
            continue
        omega_inv = numkit.spd_inverse(state.omega[g])
        chol = numkit.cholesky(gram + omega_inv)
        h = data_term[rows] + omega_inv @ state.mu[g]
        mean = linalg.cho_solve((chol, True), h.T, check_finite=False).T
        spread = linalg.solve_triangular(chol.T, noise[rows].T, lower=False, check_finite=False).T
        X[rows] = mean + spread
    return X


def update_cluster_means(dataset: Dataset, state: ModelState, priors: PriorSpec, rng):
    """mu_g | rest ~ N with precision C_mu^-1 + n_g Omega_g^-1, summing over every t."""
    X = state.X.reshape(-1, state.L)
    Zf = state.Z.reshape(-1)
    mu = np.empty_like(state.mu)
    for g in range(state.G):
        members = X[Zf == g + 1]
        prior_prec = numkit.spd_inverse(priors.C_mu[g])
        omega_inv = numkit.spd_inverse(state.omega[g])
        precision = prior_prec + members.shape[0] * omega_inv
        h = prior_prec @ priors.m_mu[g] + omega_inv @ members.sum(axis=0)
        mu[g] = numkit.sample_mvn_precision(precision, h, rng.substream(g))
    return mu


def update_omega1(dataset: Dataset, state: ModelState, priors: PriorSpec, rng):
    X = state.X.reshape(-1, state.L)
    resid = X[state.Z.reshape(-1) == 1] - state.mu[0]
    n_star = priors.n_omega + resid.shape[0]
    scale = priors.n_omega * priors.s2_omega + np.sum(resid ** 2, axis=0)
    return np.diag(numkit.sample_inverse_gamma(n_star / 2.0, scale / 2.0, rng))


def update_omega_g(dataset: Dataset, state: ModelState, priors: PriorSpec, rng):
    """Inverse Wishart draws for clusters 2..G; returns the full (G, L, L) stack."""
    X = state.X.reshape(-1, state.L)
    Zf = state.Z.reshape(-1)
    omega = state.omega.copy()
    for g in range(1, state.G):
        resid = X[Zf == g + 1] - state.mu[g]
        scale = priors.S_Omega[g - 1] + resid.T @ resid
        omega[g] = numkit.sample_inverse_wishart(priors.n_Omega + resid.shape[0], scale, rng.substream(g))
    return omega


def update_loadings(dataset: Dataset, state: ModelState, priors: PriorSpec, rng):
    """
    Row-wise Gaussian draws. Rows 2..L draw their r-1 free entries against
    the residual y_r - x_r (the fixed unit loading); rows beyond L draw the
    whole row. Row 1 is fully fixed.
    """
    R, L = state.R, state.L
    X = state.X.reshape(-1, L)
    Y = dataset.stacked()
    XtX = X.T @ X
    XtY = X.T @ Y
    B = state.B.copy()
    for r in range(1, R):
        k = min(r, L)
        if r < L:
            h = (XtY[:k, r] - XtX[:k, r]) / state.sigma2[r]
        else:
            h = XtY[:, r] / state.sigma2[r]
        precision = np.diag(1.0 / state.tau2[:k]) + XtX[:k, :k] / state.sigma2[r]
        B[r, :k] = numkit.sample_mvn_precision(precision, h, rng.substream(r))
    return B


def update_uniquenesses(dataset: Dataset, state: ModelState, priors: PriorSpec, rng):
    Y = dataset.stacked()
    resid = Y - state.X.reshape(-1, state.L) @ state.B.T
    shape = (priors.n_sigma + Y.shape[0]) / 2.0
    scale = (priors.n_sigma * priors.s2_sigma + np.sum(resid ** 2, axis=0)) / 2.0
    return numkit.sample_inverse_gamma(np.full(state.R, shape), scale, rng)


def update_tau(dataset: Dataset, state: ModelState, priors: PriorSpec, rng):
    """Column l has R - l free loadings below its unit entry."""
    R, L = state.R, state.L
    free_counts = R - np.arange(1, L + 1)
    norms = np.array([state.B[l + 1:, l] @ state.B[l + 1:, l] for l in range(L)])
    shape = (priors.n_tau + free_counts) / 2.0
    scale = (priors.n_tau * priors.s2_tau + norms) / 2.0
    return np.atleast_1d(numkit.sample_inverse_gamma(shape, scale, rng))


def update_initial_probs(dataset: Dataset, state: ModelState, priors: PriorSpec, rng):
    n_1 = np.bincount(state.Z[:, 0], minlength=state.G + 1)[1:] if state.S else np.zeros(state.G)
    return numkit.sample_dirichlet(n_1 + priors.alpha, rng)


def update_transition_matrix(dataset: Dataset, state: ModelState, priors: PriorSpec, rng):
    counts = compute_sweep_stats(state.Z, state.G).m_jg
    return np.array([numkit.sample_dirichlet(counts[j] + priors.alpha_rows[j], rng.substream(j)) for j in range(state.G)])


def normalize_log_weights(log_w):
    """Row-normalized probabilities from log weights (max-subtracted before exp)."""
    log_w = np.atleast_2d(np.asarray(log_w, dtype=float))
    top = np.max(log_w, axis=1, keepdims=True)
    if np.any(~np.isfinite(top)):
        rows = np.flatnonzero(~np.isfinite(top[:, 0])).tolist()
        raise InvalidParameter("every assignment weight is zero", rows=rows)
    w = np.exp(log_w - top)
    probs = w / w.sum(axis=1, keepdims=True)
    return probs


def assignment_log_weights(state: ModelState, t: int, Z, include_initial_prob=False):
    """
    S x G log weights of Z[:, t] given X, the cluster parameters and the
    neighbouring assignments in ``Z``.
    """
    S, T, G = state.S, state.T, state.G
    log_w = np.column_stack([numkit.mvn_logpdf(state.X[:, t], state.mu[g], state.omega[g]) for g in range(G)])
    with np.errstate(divide="ignore"):
        log_Q = np.log(state.Q)
        if t == 0 and (include_initial_prob or T == 1):
            log_w = log_w + np.log(state.p)
        if t > 0:
            log_w = log_w + log_Q[Z[:, t - 1] - 1]
        if t < T - 1:
            log_w = log_w + log_Q[:, Z[:, t + 1] - 1].T
    return log_w


def update_assignments(dataset: Dataset, state: ModelState, priors: PriorSpec, rng,
                       include_initial_prob=False, parallel=False, n_jobs=-1):
    """Single-site draws of Z_it, sequential in t and vectorized over subjects."""
    S, T = state.S, state.T
    Z = state.Z.copy()
    if state.G == 1:
        return np.ones_like(Z)
    uniforms = _subject_normals(rng, S, (T,), parallel, n_jobs, uniform=True)
    for t in range(T):
        probs = normalize_log_weights(assignment_log_weights(state, t, Z, include_initial_prob))
        Z[:, t] = numkit.categorical_from_uniforms(probs, uniforms[:, t])
    return Z


SWEEP_ORDER = ("X", "mu", "omega1", "omega_g", "B", "sigma2", "tau2", "p", "Q", "Z")


def gibbs_sweep(dataset: Dataset, state: ModelState, priors: PriorSpec, rng, config: SamplerConfig, after_update=None):
    """One full sweep, updating ``state`` in place; ``after_update(name, state)`` runs after each step."""
    parallel = config.parallel_subjects
    for step, name in enumerate(SWEEP_ORDER):
        sub = rng.substream(step)
        if name == "X":
            state.X = update_factors(dataset, state, priors, sub, parallel, config.n_jobs)
        elif name == "mu":
            state.mu = update_cluster_means(dataset, state, priors, sub)
        elif name == "omega1":
            omega = state.omega.copy()
            omega[0] = update_omega1(dataset, state, priors, sub)
            state.omega = omega
        elif name == "omega_g":
            state.omega = update_omega_g(dataset, state, priors, sub)
        elif name == "B":
            state.B = update_loadings(dataset, state, priors, sub)
        elif name == "sigma2":
            state.sigma2 = update_uniquenesses(dataset, state, priors, sub)
        elif name == "tau2":
            state.tau2 = update_tau(dataset, state, priors, sub)
        elif name == "p":
            state.p = update_initial_probs(dataset, state, priors, sub)
        elif name == "Q":
            state.Q = update_transition_matrix(dataset, state, priors, sub)
        else:
            state.Z = update_assignments(
                dataset, state, priors, sub, config.include_initial_prob_in_z1, parallel, config.n_jobs
            )
        if after_update is not None:
            after_update(name, state)
    return state


def _check_inputs(dataset: Dataset, priors: PriorSpec, state: ModelState):
    if (state.S, state.T, state.R) != (dataset.S, dataset.T, dataset.R):
        raise DimensionMismatch(
            "state does not match the panel",
            state=[state.S, state.T, state.R], panel=[dataset.S, dataset.T, dataset.R],
        )
    if (priors.G, priors.L) != (state.G, state.L):
        raise DimensionMismatch("priors do not match the state", priors=[priors.G, priors.L], state=[state.G, state.L])
    problems = validate_state(state) + priors.violations()
    if problems:
        raise InvalidParameter("invalid sampler inputs", violations=[str(v) for v in problems])


def run_gibbs(dataset: Dataset, priors: PriorSpec, state: ModelState, config: SamplerConfig, writer=None, progress=True):
    """
    Run ``config.iterations`` sweeps from ``state`` and keep every
    ``thin``-th sweep after burn-in. ``writer``, when given, is told about
    each stored draw (``writer.on_store(chain, k)``) and closed at the end
    (``writer.finish(chain)``). With a writer the buffer holds one chunk of
    ``writer.flush_every`` draws, reused in place, so the returned chain
    carries only the last chunk of draws but the assignment counts of the
    whole run; reload the full chain with ``storage.load_chain``.
    """
    _check_inputs(dataset, priors, state)
    state = state.copy()
    meta = {
        "seed": config.seed,
        "iterations": config.iterations,
        "burn_in": config.burn_in,
        "thin": config.thin,
        "parallel_subjects": config.parallel_subjects,
        "include_initial_prob_in_z1": config.include_initial_prob_in_z1,
    }
    chunk = config.n_stored if writer is None else max(1, min(writer.flush_every, config.n_stored))
    chain = ChainOutput.allocate(chunk, state.S, state.T, state.R, state.L, state.G, meta)
    root = numkit.RngStream(config.seed, SAMPLER_STREAM)
    logger.info(
        "running %d sweeps (burn-in %d, thin %d) on S=%d T=%d R=%d with G=%d L=%d",
        config.iterations, config.burn_in, config.thin, state.S, state.T, state.R, state.G, state.L,
    )

    started = time.perf_counter()
    k = 0
    for it in tqdm(range(1, config.iterations + 1), desc="gibbs", disable=None if progress else True):
        try:
            gibbs_sweep(dataset, state, priors, root.substream(it), config)
        except BdcfmError as err:
            err.context.setdefault("iteration", it)
            logger.error("sweep %d failed: %s", it, err.message)
            raise
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            slot = k - chain.first_draw
            if slot == chain.stored_iterations:
                chain.first_draw += slot
                slot = 0
            chain.record(slot, state, complete_data_loglik(dataset, state))
            if writer is not None:
                writer.on_store(chain, k)
            k += 1

    chain.meta["wall_time"] = time.perf_counter() - started
    chain.meta["stored"] = k
    if writer is not None:
        chain = writer.finish(chain)
    logger.info("stored %d draws in %.1f s", k, chain.meta["wall_time"])
    return chain


def redraw_data(state: ModelState, rng) -> Dataset:
    """y_it ~ N(B x_it, diag(sigma2)) for the current factors."""
    noise = rng.generator.standard_normal((state.S, state.T, state.R))
    return Dataset(y=state.X @ state.B.T + noise * np.sqrt(state.sigma2))


def sample_from_prior(priors: PriorSpec, S: int, T: int, R: int, rng) -> ModelState:
    """Every unknown drawn from its prior, then the latent path given those draws."""
    L, G = priors.L, priors.G
    if R < L:
        raise DimensionMismatch(f"need R >= L, got R={R}, L={L}")
    tau2 = np.atleast_1d(numkit.sample_inverse_gamma(
        np.full(L, priors.n_tau / 2.0), np.full(L, priors.n_tau * priors.s2_tau / 2.0), rng.substream(0)
    ))
    B = np.tril(simgen.random_loadings(R, L, rng.substream(1)), k=-1) * np.sqrt(tau2) + np.eye(R, L)
    sigma2 = numkit.sample_inverse_gamma(
        np.full(R, priors.n_sigma / 2.0), np.full(R, priors.n_sigma * priors.s2_sigma / 2.0), rng.substream(2)
    )
    omega = np.empty((G, L, L))
    omega[0] = np.diag(np.atleast_1d(numkit.sample_inverse_gamma(
        priors.n_omega / 2.0, priors.n_omega * priors.s2_omega / 2.0, rng.substream(3)
    )))
    for g in range(1, G):
        omega[g] = numkit.sample_inverse_wishart(priors.n_Omega, priors.S_Omega[g - 1], rng.substream(4, g))
    mu = np.array([numkit.sample_mvn(priors.m_mu[g], priors.C_mu[g], rng.substream(5, g)) for g in range(G)])
    p = numkit.sample_dirichlet(priors.alpha, rng.substream(6))
    Q = np.array([numkit.sample_dirichlet(priors.alpha_rows[j], rng.substream(7, j)) for j in range(G)])
    Z, X = simgen.draw_latent_path(p, Q, mu, omega, S, T, rng.substream(8))
    return ModelState(B=B, sigma2=np.atleast_1d(sigma2), tau2=tau2, mu=mu, omega=omega, p=p, Q=Q, X=X, Z=Z)
