# bdcfm/cli.py
"""
Batch interface: ``bdcfm simulate|fit|summarize``.

simulate  -> <out>/data.csv, <out>/truth.json
fit       -> <out>/chain/*.csv, <out>/chain/meta.json, <out>/priors.json
summarize -> <out>/report.json, transitions.csv, assignment_long.csv and,
             when the panel is available, profiles.csv and cluster_counts.csv

Settings come from built-in defaults, then the BDCFM_OUT_DIR environment
variable, then a flat TOML file (--config), then command-line flags.
Errors are reported as one JSON line on stderr; exit status 2 for model and
input errors, 1 for anything unexpected.
"""

import argparse
import json
import logging
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, fields

import numpy as np
import pandas as pd

from . import gibbs, numkit, posterior, simgen, storage
from .ebinit import initialize_state, run_empirical_bayes
from .errors import (
    BdcfmError,
    ConfigError,
    DimensionMismatch,
    DuplicateCell,
    IncompletePanel,
    InvalidParameter,
    NonFiniteValue,
)
from .model import Dataset

logger = logging.getLogger(__name__)

MODES = ("simulate", "fit", "summarize")
DESIGNS = ("benchmark", "panel")
DEFAULT_OUT_DIR = "runs"
OUT_DIR_ENV = "BDCFM_OUT_DIR"
EB_STREAM = 0
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
MAX_LISTED = 20


@dataclass
class RunConfig:
    mode: str
    G: int = 4
    L: int = 3
    iterations: int = gibbs.DEFAULT_ITERATIONS
    burn_in: int = gibbs.DEFAULT_BURN_IN
    thin: int = gibbs.DEFAULT_THIN
    seed: int = 0
    parallel: bool = False
    n_jobs: int = -1
    # None means on for fit and off for simulate
    standardize: bool = None
    include_initial_prob_in_z1: bool = False
    compensate_loadings: bool = False
    data: str = None
    truth: str = None
    out: str = DEFAULT_OUT_DIR
    design: str = "benchmark"
    S: int = None
    T: int = None
    R: int = None
    progress: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.design not in DESIGNS:
            raise ConfigError(f"design must be one of {DESIGNS}, got {self.design!r}")
        for name in ("G", "L", "iterations", "thin"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigError(f"burn_in must be in [0, iterations), got {self.burn_in}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        for name in ("S", "T", "R"):
            value = getattr(self, name)
            if value is not None and int(value) < 1:
                raise ConfigError(f"{name} must be at least 1, got {value}")
        if not self.out:
            raise ConfigError("an output directory is required")

    @property
    def standardize_data(self):
        return self.mode == "fit" if self.standardize is None else bool(self.standardize)

    def sampler_config(self) -> gibbs.SamplerConfig:
        return gibbs.SamplerConfig(
            iterations=self.iterations,
            burn_in=self.burn_in,
            thin=self.thin,
            seed=self.seed,
            parallel_subjects=self.parallel,
            include_initial_prob_in_z1=self.include_initial_prob_in_z1,
            n_jobs=self.n_jobs,
        )


def load_config_file(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    known = {f.name for f in fields(RunConfig)} - {"mode"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}", path=path)
    return raw


def resolve_config(mode: str, file_values: dict = None, flag_values: dict = None) -> RunConfig:
    """Defaults < environment < config file < flags."""
    values = {}
    if os.environ.get(OUT_DIR_ENV):
        values["out"] = os.environ[OUT_DIR_ENV]
    values.update(file_values or {})
    values.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    try:
        return RunConfig(mode=mode, **values)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def ingest_csv(path, standardize: bool = False) -> Dataset:
    """
    Read a long-format panel ``subject,time,<var1..varR>``.

    Subjects keep their order of first appearance and times are sorted
    ascending. Every subject must be observed at every time exactly once.
    With ``standardize`` each variable is z-scored over all cells (ddof=0).
    """
    if not os.path.exists(path):
        raise ConfigError(f"data file not found: {path}. Run `bdcfm simulate` or pass --data.", path=str(path))
    df = pd.read_csv(path, float_precision="round_trip")
    if list(df.columns[:2]) != ["subject", "time"] or df.shape[1] < 3:
        raise DimensionMismatch("panel CSV must have columns subject,time followed by at least one variable", path=str(path))
    variables = [str(c) for c in df.columns[2:]]
    df["subject"] = df["subject"].astype(str)

    values = df[variables].apply(pd.to_numeric, errors="coerce")
    bad = ~np.isfinite(values.to_numpy(dtype=float))
    if bad.any():
        rows, cols = np.nonzero(bad)
        cells = [(df["subject"].iat[r], df["time"].iat[r], variables[c]) for r, c in zip(rows[:MAX_LISTED], cols[:MAX_LISTED])]
        raise NonFiniteValue(f"{int(bad.sum())} missing or non-numeric values in {path}", cells=cells)
    df[variables] = values

    dup = df.duplicated(["subject", "time"], keep=False)
    if dup.any():
        pairs = df.loc[dup, ["subject", "time"]].drop_duplicates().values.tolist()
        raise DuplicateCell(f"{len(pairs)} (subject, time) pairs appear more than once", pairs=pairs[:MAX_LISTED])

    subjects = list(pd.unique(df["subject"]))
    times = sorted(pd.unique(df["time"]).tolist())
    full = pd.MultiIndex.from_product([subjects, times], names=["subject", "time"])
    panel = df.set_index(["subject", "time"]).reindex(full)
    missing = panel[variables[0]].isna()
    if missing.any():
        pairs = [list(p) for p in panel.index[missing]]
        raise IncompletePanel(f"{len(pairs)} (subject, time) pairs are missing", missing=pairs[:MAX_LISTED])

    y = panel[variables].to_numpy(dtype=float).reshape(len(subjects), len(times), len(variables))
    if standardize:
        flat = y.reshape(-1, len(variables))
        sd = flat.std(axis=0)
        if np.any(sd <= 0):
            raise InvalidParameter(f"cannot standardize constant variables {[variables[i] for i in np.flatnonzero(sd <= 0)]}")
        y = ((flat - flat.mean(axis=0)) / sd).reshape(y.shape)
    logger.info("loaded panel %s: S=%d T=%d R=%d", path, len(subjects), len(times), len(variables))
    return Dataset(y=y, subject_ids=subjects, variable_names=variables, times=times)


def _simulation_config(config: RunConfig) -> simgen.SimConfig:
    if config.design == "benchmark":
        return simgen.benchmark_design(seed=config.seed, S=config.S or 200, T=config.T or 5, R=config.R or 20)
    return simgen.panel_like(
        S=config.S or 252, T=config.T or 4, R=config.R or 15, G=config.G, L=config.L, seed=config.seed
    )


def _simulate(config: RunConfig):
    dataset, truth = simgen.simulate_dataset(_simulation_config(config))
    if config.standardize:
        logger.warning("simulated data are written in model units; standardize is ignored for simulate")
    storage.write_panel_csv(dataset, os.path.join(config.out, "data.csv"))
    storage.save_truth(truth, os.path.join(config.out, "truth.json"))


def _data_path(config: RunConfig):
    return config.data or os.path.join(config.out, "data.csv")


def _truth_path(config: RunConfig):
    return config.truth or os.path.join(config.out, "truth.json")


def _fit_standardize(config: RunConfig) -> bool:
    """Standardize by default, except next to a simulated truth that is in model units."""
    if config.standardize is not None:
        return bool(config.standardize)
    truth_path = _truth_path(config)
    if os.path.exists(truth_path):
        logger.info("found %s; fitting in data units (pass --standardize to override)", truth_path)
        return False
    return config.standardize_data


def _fit(config: RunConfig):
    standardize = _fit_standardize(config)
    dataset = ingest_csv(_data_path(config), standardize=standardize)
    if config.L > dataset.R:
        raise DimensionMismatch(f"L={config.L} exceeds the number of variables R={dataset.R}")

    priors, artifacts = run_empirical_bayes(dataset, config.G, config.L, numkit.RngStream(config.seed, EB_STREAM))
    state = initialize_state(dataset, priors, artifacts, compensate_loadings=config.compensate_loadings)
    storage.write_json(asdict(priors), os.path.join(config.out, "priors.json"))

    settings = asdict(config)
    writer = storage.ChainWriter(
        config.out,
        subject_ids=dataset.subject_ids,
        times=dataset.times,
        extra_meta={
            "config": settings,
            "config_hash": storage.config_hash(settings),
            "standardize": standardize,
            "variables": dataset.variable_names,
            "versions": storage.package_versions(),
        },
    )
    gibbs.run_gibbs(dataset, priors, state, config.sampler_config(), writer=writer, progress=config.progress)


def _summarize(config: RunConfig):
    chain = storage.load_chain(config.out)
    truth_path = _truth_path(config)
    truth = None
    if config.truth or os.path.exists(truth_path):
        truth = storage.load_truth(truth_path)
        if chain.meta.get("standardize"):
            logger.warning("chain was fit to standardized data; comparisons with the simulated truth are not on the same scale")

    report = posterior.summarize(chain, truth)
    storage.write_json(report.to_dict(), os.path.join(config.out, "report.json"))

    subjects = chain.meta.get("subject_ids")
    times = chain.meta.get("times")
    transitions = posterior.transition_table(chain)
    transitions.to_csv(os.path.join(config.out, "transitions.csv"), index=False, float_format=storage.FLOAT_FORMAT)
    _, mode, long = posterior.assignment_probabilities(chain, subjects, times)
    long.to_csv(os.path.join(config.out, "assignment_long.csv"), index=False, float_format=storage.FLOAT_FORMAT)
    logger.info("Saved: %s", os.path.join(config.out, "transitions.csv"))
    logger.info("Saved: %s", os.path.join(config.out, "assignment_long.csv"))

    data_path = _data_path(config)
    if os.path.exists(data_path):
        dataset = ingest_csv(data_path, standardize=bool(chain.meta.get("standardize", False)))
        profiles, counts = posterior.cluster_profiles(dataset, mode)
        profiles.to_csv(os.path.join(config.out, "profiles.csv"), index=False)
        counts.to_csv(os.path.join(config.out, "cluster_counts.csv"), index=False)
        logger.info("Saved: %s", os.path.join(config.out, "profiles.csv"))

    if report.coverage is not None:
        print("misclassification:", round(report.misclassification, 4))
        print("interval miss rate:", round(report.coverage.miss_rate, 4))
        for family, tally in report.coverage.families.items():
            print(f"  {family}: {tally['covered']}/{tally['total']} covered")


def run_command(config: RunConfig) -> int:
    os.makedirs(config.out, exist_ok=True)
    logger.info("%s -> %s", config.mode, config.out)
    if config.mode == "simulate":
        _simulate(config)
    elif config.mode == "fit":
        _fit(config)
    else:
        _summarize(config)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdcfm", description="Bayesian dynamic clustering factor models")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", help="flat TOML file with RunConfig keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or {DEFAULT_OUT_DIR})")
        p.add_argument("--data", help="long-format panel CSV (subject,time,vars...)")
        p.add_argument("--truth", help="truth JSON written by simulate")
        p.add_argument("--G", type=int, dest="G", help="number of clusters")
        p.add_argument("--L", type=int, dest="L", help="number of factors")
        p.add_argument("--iterations", type=int)
        p.add_argument("--burn-in", type=int, dest="burn_in")
        p.add_argument("--thin", type=int)
        p.add_argument("--parallel", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--n-jobs", type=int, dest="n_jobs")
        p.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--include-initial-prob-in-z1", action=argparse.BooleanOptionalAction, default=None,
                       dest="include_initial_prob_in_z1")
        p.add_argument("--compensate-loadings", action=argparse.BooleanOptionalAction, default=None,
                       dest="compensate_loadings")
        p.add_argument("--design", choices=DESIGNS)
        p.add_argument("--S", type=int, dest="S")
        p.add_argument("--T", type=int, dest="T")
        p.add_argument("--R", type=int, dest="R")
        p.add_argument("--no-progress", action="store_false", dest="progress", default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    root = logging.getLogger("bdcfm")
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(level)


def _report_error(code, message, context=None):
    print(json.dumps({"error": code, "message": message, "context": context or {}}, default=str), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    flags = {k: v for k, v in vars(args).items() if k not in ("mode", "config", "verbose", "quiet")}
    try:
        file_values = load_config_file(args.config) if args.config else {}
        config = resolve_config(args.mode, file_values, flags)
        return run_command(config)
    except BdcfmError as err:
        print(json.dumps(err.to_dict(), default=str), file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        _report_error("FileNotFound", str(err))
        return 2
    except Exception as err:  # noqa: BLE001
        logger.debug("unexpected failure", exc_info=True)
        _report_error("InternalError", f"{type(err).__name__}: {err}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
