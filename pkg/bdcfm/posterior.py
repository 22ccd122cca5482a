# bdcfm/posterior.py
"""
Posterior summaries and calibration metrics over a stored chain.

Intervals are equal-tailed and use linear interpolation between order
statistics. Comparisons with a simulated truth first align the estimated
cluster labels to the true ones by solving the assignment problem on the
confusion counts of the posterior mode path.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from .errors import DimensionMismatch, InsufficientDraws, InvalidParameter
from .model import BLOCKS, ChainOutput, Dataset, block_columns
from .simgen import SimTruth

logger = logging.getLogger(__name__)

CI_LEVEL = 0.95
COVERAGE_FAMILIES = ("loadings", "means", "transitions", "initial_probs", "uniquenesses")


@dataclass
class CoverageReport:
    fraction: float
    families: dict
    flags: pd.DataFrame

    @property
    def miss_rate(self):
        return 1.0 - self.fraction


@dataclass
class SummaryReport:
    n_draws: int
    parameters: dict
    z_mode: np.ndarray
    level: float = CI_LEVEL
    coverage: CoverageReport = None
    misclassification: float = None
    alignment: list = field(default=None)

    def to_dict(self) -> dict:
        out = {
            "n_draws": self.n_draws,
            "level": self.level,
            "parameters": {name: table.to_dict(orient="records") for name, table in self.parameters.items()},
            "z_mode": self.z_mode.tolist(),
        }
        if self.coverage is not None:
            out["truth"] = {
                "alignment": self.alignment,
                "misclassification": self.misclassification,
                "coverage_fraction": self.coverage.fraction,
                "miss_rate": self.coverage.miss_rate,
                "families": self.coverage.families,
            }
        return out


def credible_interval(draws, level: float = CI_LEVEL):
    """Equal-tailed (lower, upper) along axis 0."""
    if not 0.0 < level < 1.0:
        raise InvalidParameter(f"credible level must be in (0, 1), got {level}")
    draws = np.asarray(draws, dtype=float)
    tail = (1.0 - level) / 2.0
    lower, upper = np.quantile(draws, [tail, 1.0 - tail], axis=0)
    return lower, upper


def _block_table(values, names, level):
    lower, upper = credible_interval(values, level)
    return pd.DataFrame(
        {
            "parameter": names,
            "mean": values.mean(axis=0),
            "sd": values.std(axis=0, ddof=1),
            "lower": lower,
            "median": np.median(values, axis=0),
            "upper": upper,
        }
    )


def summarize(chain: ChainOutput, truth: SimTruth = None, level: float = CI_LEVEL) -> SummaryReport:
    """Per-parameter mean, sd and interval for every block, plus truth metrics when given."""
    n = chain.stored_iterations
    if n < 2:
        raise InsufficientDraws(f"need at least 2 stored draws to summarize, got {n}", stored=n)
    parameters = {}
    for name in BLOCKS:
        values, names = chain.block(name)
        parameters[name] = _block_table(values, names, level)

    report = SummaryReport(n_draws=n, parameters=parameters, z_mode=chain.z_mode, level=level)
    if truth is not None:
        _check_truth(chain, truth)
        perm = align_labels(chain.z_mode, truth.Z, chain.dims[4])
        report.alignment = perm.tolist()
        report.misclassification = misclassification(chain, truth)
        report.coverage = coverage_report(chain, truth, level)
        logger.info(
            "misclassification %.4f, interval miss rate %.4f", report.misclassification, report.coverage.miss_rate
        )
    return report


def align_labels(z_est, z_true, G: int):
    """
    Permutation ``perm`` (1-based) with perm[e - 1] the true label matched to
    estimated label e, maximizing the number of agreeing cells.
    """
    z_est = np.asarray(z_est, dtype=int)
    z_true = np.asarray(z_true, dtype=int)
    if z_est.shape != z_true.shape:
        raise DimensionMismatch(f"assignment shapes differ: {z_est.shape} vs {z_true.shape}")
    for name, z in (("estimated", z_est), ("true", z_true)):
        if z.size and (z.min() < 1 or z.max() > G):
            raise DimensionMismatch(f"{name} labels must lie in 1..{G}, got {z.min()}..{z.max()}", G=G)
    confusion = np.zeros((G, G), dtype=int)
    np.add.at(confusion, (z_est.ravel() - 1, z_true.ravel() - 1), 1)
    rows, cols = linear_sum_assignment(-confusion)
    perm = np.empty(G, dtype=int)
    perm[rows] = cols + 1
    return perm


def misclassification(chain: ChainOutput, truth: SimTruth) -> float:
    _check_truth(chain, truth)
    G = chain.dims[4]
    mode = chain.z_mode
    perm = align_labels(mode, truth.Z, G)
    return float(np.mean(perm[mode - 1] != truth.Z))


def _check_truth(chain: ChainOutput, truth: SimTruth):
    S, T, R, L, G = chain.dims
    expected = {"B": (R, L), "V": (R,), "mu": (G, L), "p": (G,), "Q": (G, G), "Z": (S, T)}
    for name, shape in expected.items():
        got = np.shape(getattr(truth, name))
        if got != shape:
            raise DimensionMismatch(f"truth block {name} has shape {got}, chain expects {shape}", block=name)
    z = np.asarray(truth.Z)
    if z.min() < 1 or z.max() > G:
        raise DimensionMismatch(f"true labels must lie in 1..{G}, got {z.min()}..{z.max()}", block="Z")


def coverage_report(chain: ChainOutput, truth: SimTruth, level: float = CI_LEVEL) -> CoverageReport:
    """
    Share of true values inside their interval over the free loadings, the
    cluster means, the transition matrix, the initial probabilities and the
    uniquenesses. Cluster-indexed truths are relabeled to the chain's labels.
    """
    _check_truth(chain, truth)
    S, T, R, L, G = chain.dims
    perm = align_labels(chain.z_mode, truth.Z, G) - 1

    rows, cols = np.tril_indices(R, k=-1, m=L)
    free = [f"B[{r + 1},{l + 1}]" for r, l in zip(rows, cols)]
    families = {
        "loadings": (chain.B[:, rows, cols], truth.B[rows, cols], free),
        "means": (chain.mu.reshape(chain.stored_iterations, -1), truth.mu[perm].ravel(), block_columns("mu", R, L, G)),
        "transitions": (
            chain.Q.reshape(chain.stored_iterations, -1),
            truth.Q[np.ix_(perm, perm)].ravel(),
            block_columns("Q", R, L, G),
        ),
        "initial_probs": (chain.p, truth.p[perm], block_columns("p", R, L, G)),
        "uniquenesses": (chain.sigma2, truth.V, block_columns("sigma2", R, L, G)),
    }

    frames = []
    summary = {}
    for family in COVERAGE_FAMILIES:
        draws, true_values, names = families[family]
        lower, upper = credible_interval(draws, level)
        covered = (lower <= true_values) & (true_values <= upper)
        summary[family] = {"covered": int(covered.sum()), "total": int(covered.size)}
        frames.append(pd.DataFrame({
            "family": family, "parameter": names, "truth": true_values,
            "lower": lower, "upper": upper, "covered": covered,
        }))
    flags = pd.concat(frames, ignore_index=True)
    fraction = float(flags["covered"].mean()) if len(flags) else 1.0
    return CoverageReport(fraction=fraction, families=summary, flags=flags)


def assignment_probabilities(chain: ChainOutput, subject_ids=None, times=None):
    """
    (probabilities S x T x G, mode path S x T, long table) where the long
    table has one row per (subject, time, cluster).
    """
    probs = chain.z_probs
    mode = chain.z_mode
    S, T, G = probs.shape
    subject_ids = list(subject_ids) if subject_ids is not None else [str(i + 1) for i in range(S)]
    times = list(times) if times is not None else list(range(1, T + 1))
    if len(subject_ids) != S or len(times) != T:
        raise DimensionMismatch("subject or time labels do not match the chain", S=S, T=T)

    ii, tt, gg = np.meshgrid(np.arange(S), np.arange(T), np.arange(G), indexing="ij")
    long = pd.DataFrame({
        "subject": np.asarray(subject_ids, dtype=object)[ii.ravel()],
        "time": np.asarray(times)[tt.ravel()],
        "cluster": gg.ravel() + 1,
        "probability": probs.ravel(),
        "mode": mode[ii.ravel(), tt.ravel()],
    })
    return probs, mode, long


def transition_table(chain: ChainOutput, level: float = CI_LEVEL) -> pd.DataFrame:
    """One row per transition j -> g with posterior mean and interval."""
    G = chain.dims[4]
    draws = chain.Q.reshape(chain.stored_iterations, -1)
    lower, upper = credible_interval(draws, level)
    j, g = np.divmod(np.arange(G * G), G)
    return pd.DataFrame({
        "from": j + 1,
        "to": g + 1,
        "label": [f"{a + 1}{b + 1}" for a, b in zip(j, g)],
        "mean": draws.mean(axis=0),
        "lower": lower,
        "upper": upper,
    })


def cluster_profiles(dataset: Dataset, mode):
    """
    Mean (SD) of every variable over the cells assigned to each cluster, and
    the number of subjects in each cluster at each time.
    """
    mode = np.asarray(mode, dtype=int)
    if mode.shape != (dataset.S, dataset.T):
        raise DimensionMismatch(f"mode path is {mode.shape}, panel is {(dataset.S, dataset.T)}")
    df = pd.DataFrame(dataset.stacked(), columns=dataset.variable_names)
    df["cluster"] = mode.ravel()
    df["time"] = np.tile(dataset.times, dataset.S)

    long = df.melt(id_vars=["cluster", "time"], var_name="variable", value_name="value")
    profiles = (
        long.groupby(["cluster", "variable"], sort=False)["value"]
        .agg(["mean", "std", "count"])
        .reset_index()
        .rename(columns={"std": "sd", "count": "n"})
        .sort_values(["cluster"], kind="stable")
        .reset_index(drop=True)
    )
    profiles["summary"] = [f"{m:.2f} ({s:.2f})" for m, s in zip(profiles["mean"], profiles["sd"].fillna(0.0))]

    counts = (
        df.groupby(["time", "cluster"])["cluster"]
        .count()
        .reset_index(name="count")
        .sort_values(["time", "cluster"])
        .reset_index(drop=True)
    )
    return profiles, counts


def trace_table(chain: ChainOutput) -> pd.DataFrame:
    """Complete-data log-likelihood per stored draw, keyed by sweep index."""
    draw = chain.first_draw + np.arange(1, chain.stored_iterations + 1)
    burn_in = chain.meta.get("burn_in", 0)
    thin = chain.meta.get("thin", 1)
    return pd.DataFrame({
        "draw": draw,
        "iteration": burn_in + thin * draw,
        "loglik": chain.loglik,
    })
