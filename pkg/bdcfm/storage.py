# bdcfm/storage.py
"""
Files on disk: the long-format panel CSV, the truth JSON, the chain
directory (one CSV per parameter block plus assignment frequencies, mode
path, log-likelihood trace and meta.json) and plain JSON reports.

Floats are written with 17 significant digits so a file read back gives the
same doubles.
"""

import hashlib
import json
import logging
import os
import platform

import numpy as np
import pandas as pd

from . import __version__
from .errors import DimensionMismatch, MissingChains
from .model import BLOCKS, ChainOutput, Dataset, block_columns
from .posterior import trace_table
from .simgen import SimTruth, from_truth_dict, to_truth_dict

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
FLUSH_EVERY = 1000
CHAIN_DIR = "chain"
META_FILE = "meta.json"


def write_json(obj, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
    logger.info("Saved: %s", path)


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def config_hash(config: dict) -> str:
    payload = json.dumps(config, sort_keys=True, default=_json_default)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def package_versions() -> dict:
    import joblib
    import scipy
    import sklearn
    import tqdm

    return {
        "bdcfm": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "scikit-learn": sklearn.__version__,
        "joblib": joblib.__version__,
        "tqdm": tqdm.__version__,
    }


def panel_frame(dataset: Dataset) -> pd.DataFrame:
    """Long format: one row per (subject, time) with one column per variable."""
    df = pd.DataFrame(dataset.stacked(), columns=dataset.variable_names)
    df.insert(0, "subject", np.repeat(dataset.subject_ids, dataset.T))
    df.insert(1, "time", np.tile(dataset.times, dataset.S))
    return df


def write_panel_csv(dataset: Dataset, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    panel_frame(dataset).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info("Saved: %s", path)


def save_truth(truth: SimTruth, path):
    write_json(to_truth_dict(truth), path)


def load_truth(path) -> SimTruth:
    if not os.path.exists(path):
        raise FileNotFoundError(f"truth file not found: {path}. Run `bdcfm simulate` first.")
    return from_truth_dict(read_json(path))


def _write_block(path, values, columns, header):
    pd.DataFrame(values, columns=columns).to_csv(
        path, mode="w" if header else "a", header=header, index=False, float_format=FLOAT_FORMAT
    )


class ChainWriter:
    """
    Streams stored draws to ``<out>/chain/<block>.csv`` and ``trace.csv``,
    appending each full chunk of ``flush_every`` stored iterations, and
    writes the assignment tables and meta.json when the run finishes.
    ``run_gibbs`` sizes its in-memory buffer to one chunk when a writer is
    attached, so memory does not grow with the number of stored draws.
    """

    def __init__(self, out_dir, subject_ids=None, times=None, extra_meta=None, flush_every=FLUSH_EVERY):
        self.chain_dir = os.path.join(out_dir, CHAIN_DIR)
        os.makedirs(self.chain_dir, exist_ok=True)
        self.subject_ids = subject_ids
        self.times = times
        self.extra_meta = dict(extra_meta or {})
        self.flush_every = flush_every
        self.flushed = 0

    def on_store(self, chain: ChainOutput, k: int):
        if k - chain.first_draw + 1 == chain.stored_iterations:
            self._flush(chain, chain.stored_iterations)

    def _flush(self, chain: ChainOutput, stop: int):
        start = self.flushed - chain.first_draw
        if stop <= start and self.flushed:
            return
        header = self.flushed == 0
        for name in BLOCKS:
            values, columns = chain.block(name)
            _write_block(os.path.join(self.chain_dir, f"{name}.csv"), values[start:stop], columns, header)
        trace_table(chain).iloc[start:stop].to_csv(
            os.path.join(self.chain_dir, "trace.csv"),
            mode="w" if header else "a", header=header, index=False, float_format=FLOAT_FORMAT,
        )
        logger.debug("flushed stored draws %d..%d", self.flushed + 1, chain.first_draw + stop)
        self.flushed = chain.first_draw + stop

    def finish(self, chain: ChainOutput) -> ChainOutput:
        """Flush the partial last chunk and write the run-level files; returns the chain trimmed to that chunk."""
        rows = chain.meta.get("stored", chain.first_draw + chain.stored_iterations) - chain.first_draw
        self._flush(chain, rows)
        chain = chain.head(rows)
        S, T, R, L, G = chain.dims
        subjects = self.subject_ids or [str(i + 1) for i in range(S)]
        times = self.times or list(range(1, T + 1))

        ii, tt, gg = np.meshgrid(np.arange(S), np.arange(T), np.arange(G), indexing="ij")
        totals = chain.z_counts.sum(axis=2, keepdims=True)
        probs = np.divide(chain.z_counts, totals, out=np.zeros(chain.z_counts.shape), where=totals > 0)
        pd.DataFrame({
            "subject": np.asarray(subjects, dtype=object)[ii.ravel()],
            "time": np.asarray(times)[tt.ravel()],
            "cluster": gg.ravel() + 1,
            "count": chain.z_counts.ravel(),
            "probability": probs.ravel(),
        }).to_csv(os.path.join(self.chain_dir, "z_probs.csv"), index=False, float_format=FLOAT_FORMAT)

        mode = np.argmax(chain.z_counts, axis=2) + 1
        pd.DataFrame({
            "subject": np.repeat(np.asarray(subjects, dtype=object), T),
            "time": np.tile(times, S),
            "cluster": mode.ravel(),
        }).to_csv(os.path.join(self.chain_dir, "mode_path.csv"), index=False)

        meta = dict(chain.meta)
        meta.update(self.extra_meta)
        meta["dims"] = {"S": S, "T": T, "R": R, "L": L, "G": G}
        meta["subject_ids"] = list(map(str, subjects))
        meta["times"] = [t.item() if isinstance(t, np.generic) else t for t in times]
        write_json(meta, os.path.join(self.chain_dir, META_FILE))
        logger.info("Saved: %s", self.chain_dir)
        return chain


def _unflatten_omega(values, G, L):
    n = values.shape[0]
    omega = np.zeros((n, G, L, L))
    rows, cols = np.tril_indices(L)
    tri = values.reshape(n, G, rows.size)
    omega[:, :, rows, cols] = tri
    omega[:, :, cols, rows] = tri
    return omega


def load_chain(out_dir) -> ChainOutput:
    """Rebuild a ChainOutput from ``<out>/chain``; raises MissingChains if it is absent."""
    chain_dir = os.path.join(out_dir, CHAIN_DIR)
    meta_path = os.path.join(chain_dir, META_FILE)
    if not os.path.exists(meta_path):
        raise MissingChains(f"no chain found in {chain_dir}. Run `bdcfm fit` first.", path=chain_dir)
    meta = read_json(meta_path)
    dims = meta["dims"]
    S, T, R, L, G = (dims[k] for k in ("S", "T", "R", "L", "G"))

    blocks = {}
    for name in BLOCKS:
        path = os.path.join(chain_dir, f"{name}.csv")
        if not os.path.exists(path):
            raise MissingChains(f"chain file {path} is missing. Run `bdcfm fit` again.", path=path)
        df = pd.read_csv(path, float_precision="round_trip")
        expected = block_columns(name, R, L, G)
        if list(df.columns) != expected:
            raise DimensionMismatch(f"{path} does not have the expected columns", block=name)
        blocks[name] = df.to_numpy(dtype=float)

    n = blocks["B"].shape[0]
    z = pd.read_csv(os.path.join(chain_dir, "z_probs.csv"), float_precision="round_trip")
    if len(z) != S * T * G:
        raise DimensionMismatch("z_probs.csv does not match the chain dimensions", rows=len(z))
    trace_path = os.path.join(chain_dir, "trace.csv")
    loglik = pd.read_csv(trace_path, float_precision="round_trip")["loglik"].to_numpy(dtype=float) if os.path.exists(trace_path) else np.full(n, np.nan)

    return ChainOutput(
        B=blocks["B"].reshape(n, R, L),
        sigma2=blocks["sigma2"].reshape(n, R),
        tau2=blocks["tau2"].reshape(n, L),
        mu=blocks["mu"].reshape(n, G, L),
        omega=_unflatten_omega(blocks["Omega"], G, L),
        p=blocks["p"].reshape(n, G),
        Q=blocks["Q"].reshape(n, G, G),
        loglik=loglik,
        z_counts=z["count"].to_numpy(dtype=np.int64).reshape(S, T, G),
        meta=meta,
    )
