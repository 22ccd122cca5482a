# bdcfm/numkit.py
"""
Random-variate generation and the dense linear-algebra kernels used by the
sampler, the empirical-Bayes pipeline and the simulator.

All samplers take an ``RngStream``; given the same stream state they return
bit-identical draws. Kernels are stateless and thread-safe, streams are not:
each thread must own its own stream.
"""

import copy

import numpy as np
from scipy import linalg
from scipy import stats

from .errors import InvalidParameter, NotPositiveDefinite

# relative diagonal jitter applied once when a factorization fails
JITTER_SCALE = 1e-10


class RngStream:
    """
    Counter-based (Philox) random stream identified by (seed, stream_id, keys).

    ``substream(*keys)`` derives an independent child stream, so per-subject
    or per-iteration draws do not depend on the order they are requested in.
    """

    def __init__(self, seed: int, stream_id: int = 0, keys: tuple = ()):
        if int(seed) < 0 or int(stream_id) < 0 or any(int(k) < 0 for k in keys):
            raise InvalidParameter("seed, stream id and keys must be non-negative integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.keys = tuple(int(k) for k in keys)
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,) + self.keys)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def substream(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.keys + tuple(keys))

    @property
    def state(self) -> dict:
        return copy.deepcopy(self.generator.bit_generator.state)

    def restore(self, state: dict) -> None:
        self.generator.bit_generator.state = copy.deepcopy(state)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, keys={self.keys})"


def symmetrize(A):
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + A.T)


def _check_square(A):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise InvalidParameter(f"expected a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    return A


def cholesky(A):
    """
    Lower Cholesky factor of a symmetric positive definite matrix.

    The input is symmetrized first. On failure the factorization is retried
    once with ``JITTER_SCALE * trace(A) / dim`` added to the diagonal.
    """
    A = symmetrize(_check_square(A))
    try:
        return linalg.cholesky(A, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    dim = A.shape[0]
    jitter = JITTER_SCALE * np.trace(A) / dim
    if jitter > 0:
        try:
            return linalg.cholesky(A + jitter * np.eye(dim), lower=True, check_finite=False)
        except linalg.LinAlgError:
            pass
    raise NotPositiveDefinite(f"matrix of dimension {dim} is not positive definite", dim=dim)


def ldl(A):
    """Return (L, D) with L unit lower triangular, D diagonal and A = L D L'."""
    C = cholesky(A)
    d = np.diag(C)
    return C / d, np.diag(d ** 2)


def spd_inverse(A):
    C = cholesky(A)
    return symmetrize(linalg.cho_solve((C, True), np.eye(C.shape[0]), check_finite=False))


def mvn_logpdf(x, m, C):
    """Gaussian log density of each row of ``x`` under N(m, C)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    chol = cholesky(C)
    resid = linalg.solve_triangular(chol, (x - np.asarray(m, dtype=float)).T, lower=True, check_finite=False)
    dim = chol.shape[0]
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (dim * np.log(2.0 * np.pi) + logdet + np.sum(resid ** 2, axis=0))


def sample_mvn(m, C, rng: RngStream):
    m = np.atleast_1d(np.asarray(m, dtype=float))
    chol = cholesky(C)
    if chol.shape[0] != m.shape[0]:
        raise InvalidParameter(f"mean has length {m.shape[0]} but covariance is {chol.shape}")
    return m + chol @ rng.generator.standard_normal(m.shape[0])


def sample_mvn_precision(P, h, rng: RngStream):
    """
    Draw from N(P^-1 h, P^-1) given the precision P and the linear term h,
    using a single Cholesky factorization of P.
    """
    h = np.atleast_1d(np.asarray(h, dtype=float))
    chol = cholesky(P)
    mean = linalg.cho_solve((chol, True), h, check_finite=False)
    z = rng.generator.standard_normal(h.shape[0])
    return mean + linalg.solve_triangular(chol.T, z, lower=False, check_finite=False)


def sample_inverse_gamma(a, b, rng: RngStream):
    """
    Draw from IG(a, b) with density proportional to x^(-a-1) exp(-b/x).

    ``a`` and ``b`` may be arrays of the same shape (one draw per entry).
    """
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    if np.any(~np.isfinite(a_arr)) or np.any(a_arr <= 0) or np.any(~np.isfinite(b_arr)) or np.any(b_arr <= 0):
        raise InvalidParameter(f"inverse gamma needs shape > 0 and scale > 0, got a={a}, b={b}")
    draw = b_arr / rng.generator.standard_gamma(a_arr)
    if draw.ndim == 0:
        return float(draw)
    return draw


def sample_inverse_wishart(n, S, rng: RngStream):
    """Draw from IW(n, S): density |W|^-(n+L+1)/2 exp(-tr(W^-1 S)/2), mean S/(n-L-1)."""
    S = symmetrize(_check_square(S))
    dim = S.shape[0]
    if not np.isfinite(n) or n <= dim - 1:
        raise InvalidParameter(f"inverse Wishart needs n > L - 1, got n={n}, L={dim}")
    cholesky(S)
    draw = stats.invwishart.rvs(df=n, scale=S, random_state=rng.generator)
    return symmetrize(np.atleast_2d(draw))


def sample_dirichlet(alpha, rng: RngStream):
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if np.any(~np.isfinite(alpha)) or np.any(alpha <= 0):
        raise InvalidParameter(f"Dirichlet parameters must be positive, got {alpha}")
    draw = rng.generator.dirichlet(alpha)
    return draw / draw.sum()


def _check_weights(weights):
    w = np.asarray(weights, dtype=float)
    if np.any(np.isnan(w)) or np.any(~np.isfinite(w)) or np.any(w < 0):
        raise InvalidParameter("categorical weights must be finite and non-negative")
    return w


def sample_categorical(weights, rng: RngStream) -> int:
    """Draw a 1-based index g with probability weights[g-1] / sum(weights)."""
    w = _check_weights(np.atleast_1d(weights))
    total = w.sum()
    if total <= 0:
        raise InvalidParameter("categorical weights are all zero")
    cum = np.cumsum(w)
    u = rng.generator.random() * total
    idx = int(np.searchsorted(cum, u, side="right"))
    idx = min(idx, len(w) - 1)
    # never land on a zero-weight category through roundoff at the top end
    while w[idx] == 0:
        idx -= 1
    return idx + 1


def categorical_from_uniforms(probs, uniforms):
    """1-based category of each row of ``probs`` selected by one uniform in [0, 1) per row."""
    probs = _check_weights(np.atleast_2d(probs))
    totals = probs.sum(axis=1)
    if np.any(totals <= 0):
        raise InvalidParameter("categorical weights are all zero", rows=np.flatnonzero(totals <= 0).tolist())
    cum = np.cumsum(probs, axis=1)
    u = np.asarray(uniforms, dtype=float) * totals
    idx = (cum <= u[:, None]).sum(axis=1)
    idx = np.minimum(idx, probs.shape[1] - 1)
    # step back over trailing zero-weight categories (roundoff only)
    bad = probs[np.arange(len(idx)), idx] == 0
    while np.any(bad):
        idx[bad] -= 1
        bad = probs[np.arange(len(idx)), idx] == 0
    return idx + 1
