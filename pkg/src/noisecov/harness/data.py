"""
Condition grids, datasets and their on-disk format.

A dataset directory holds

    grid.json       axes (name, topology, period) and condition coordinates
    manifest.json   N, C, trial counts, observation kind, SHA-256 of every CSV
    trials_XXX.csv  one file per condition, rows = trials, header = neuron ids
    truth/          optional ground-truth moments (synthetic data only)

Floats are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..model import MomentField

__all__ = [
    "Axis",
    "ConditionGrid",
    "Dataset",
    "write_dataset",
    "read_dataset",
    "write_matrix_csv",
    "read_matrix_csv",
    "write_moments",
    "read_moments",
    "dump_json",
]

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Axis:
    name: str
    topology: str = "linear"
    period: float | None = None

    def __post_init__(self):
        if self.topology not in ("linear", "periodic"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.topology == "periodic" and not (self.period and self.period > 0):
            raise ValueError("periodic axis needs a period > 0")

    def to_dict(self):
        d = {"name": self.name, "topology": self.topology}
        if self.period is not None:
            d["period"] = self.period
        return d


class ConditionGrid:
    """Condition coordinates with per-axis topology.

    Periodic coordinates are wrapped into ``[0, T)`` on construction.
    """

    def __init__(self, axes, coords):
        self.axes = tuple(a if isinstance(a, Axis) else Axis(**a) for a in axes)
        X = np.asarray(coords, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != len(self.axes):
            raise ValueError(f"coordinates have {X.shape[1]} columns for {len(self.axes)} axes")
        X = X.copy()
        for i, ax in enumerate(self.axes):
            if ax.topology == "periodic":
                X[:, i] = np.mod(X[:, i], ax.period)
                # np.mod can return T itself for tiny negative inputs
                X[X[:, i] >= ax.period, i] = 0.0
        self.coords = X

    def __len__(self):
        return self.coords.shape[0]

    @property
    def ndim(self):
        return len(self.axes)

    def subset(self, idx) -> "ConditionGrid":
        return ConditionGrid(self.axes, self.coords[np.asarray(idx, dtype=int)])

    def to_dict(self):
        return {"axes": [a.to_dict() for a in self.axes], "coords": self.coords.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls([Axis(**a) for a in d["axes"]], d["coords"])

    @classmethod
    def periodic_1d(cls, C: int, period: float = 2 * np.pi, name: str = "angle"):
        """``C`` equispaced conditions on ``[0, period)``."""
        return cls([Axis(name, "periodic", period)], np.arange(C) * (period / C))

    def __repr__(self):
        return f"ConditionGrid(C={len(self)}, axes={[a.name for a in self.axes]})"


@dataclass
class Dataset:
    """Trials per condition, possibly ragged, with optional ground truth."""

    grid: ConditionGrid
    trials: list
    truth: MomentField | None = None
    observation: str = "normal"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.trials = [np.atleast_2d(np.asarray(t, dtype=float)) for t in self.trials]
        if len(self.trials) != len(self.grid):
            raise ValueError(f"{len(self.trials)} trial blocks for {len(self.grid)} conditions")
        Ns = {t.shape[1] for t in self.trials}
        if len(Ns) != 1:
            raise ValueError("every condition must have the same number of neurons")
        if any(t.shape[0] < 1 for t in self.trials):
            raise ValueError("every condition needs at least one trial")

    @property
    def N(self) -> int:
        return self.trials[0].shape[1]

    @property
    def C(self) -> int:
        return len(self.trials)

    @property
    def counts(self) -> np.ndarray:
        return np.array([t.shape[0] for t in self.trials])

    def take_trials(self, idx) -> "Dataset":
        """Keep trials ``idx[c]`` in condition ``c``; conditions left empty are dropped."""
        keep = [c for c in range(self.C) if len(idx[c]) > 0]
        trials = [self.trials[c][np.asarray(idx[c], dtype=int)] for c in keep]
        return Dataset(self.grid.subset(keep), trials, _truth_subset(self.truth, keep),
                       self.observation, dict(self.meta))

    def take_conditions(self, idx) -> "Dataset":
        idx = list(np.asarray(idx, dtype=int))
        return Dataset(self.grid.subset(idx), [self.trials[c] for c in idx],
                       _truth_subset(self.truth, idx), self.observation, dict(self.meta))


def _truth_subset(truth, idx):
    if truth is None:
        return None
    idx = np.asarray(idx, dtype=int)
    prec = None if truth.precision is None else truth.precision[idx]
    return MomentField(truth.mu[idx], truth.Sigma[idx], prec)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_matrix_csv(path, M, header=None):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    buf = io.StringIO()
    if header is not None:
        buf.write(",".join(header) + "\n")
    for row in M:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    data = buf.getvalue().encode()
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def read_matrix_csv(path, header=True) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if header:
        lines = lines[1:]
    rows = [[float(v) for v in ln.split(",")] for ln in lines if ln.strip()]
    return np.array(rows, dtype=float)


def dump_json(obj, path=None) -> str:
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=True) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_moments(directory, moments: MomentField, prefix="sigma"):
    """One CSV per condition plus ``index.json`` listing files and means."""
    os.makedirs(directory, exist_ok=True)
    files = []
    for c in range(len(moments.mu)):
        name = f"{prefix}_{c:03d}.csv"
        write_matrix_csv(os.path.join(directory, name), moments.Sigma[c])
        files.append(name)
    index = {"format_version": FORMAT_VERSION, "conditions": len(files), "files": files,
             "mu": np.asarray(moments.mu).tolist()}
    dump_json(index, os.path.join(directory, "index.json"))
    return index


def read_moments(directory) -> MomentField:
    with open(os.path.join(directory, "index.json")) as fh:
        index = json.load(fh)
    Sig = np.stack([read_matrix_csv(os.path.join(directory, f), header=False) for f in index["files"]])
    return MomentField(np.asarray(index["mu"], dtype=float), Sig)


def write_dataset(ds: Dataset, directory):
    os.makedirs(directory, exist_ok=True)
    dump_json(ds.grid.to_dict(), os.path.join(directory, "grid.json"))
    header = [f"n{j}" for j in range(ds.N)]
    checksums = {}
    files = []
    for c, t in enumerate(ds.trials):
        name = f"trials_{c:03d}.csv"
        checksums[name] = write_matrix_csv(os.path.join(directory, name), t, header)
        files.append(name)
    manifest = {
        "format_version": FORMAT_VERSION,
        "N": ds.N,
        "C": ds.C,
        "K": ds.counts.tolist(),
        "observation": ds.observation,
        "files": files,
        "sha256": checksums,
        "meta": ds.meta,
        "has_truth": ds.truth is not None,
    }
    if ds.truth is not None:
        write_moments(os.path.join(directory, "truth"), ds.truth)
    dump_json(manifest, os.path.join(directory, "manifest.json"))


def read_dataset(directory, verify=True) -> Dataset:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    with open(os.path.join(directory, "grid.json")) as fh:
        grid = ConditionGrid.from_dict(json.load(fh))
    trials = []
    for name in manifest["files"]:
        path = os.path.join(directory, name)
        if verify:
            with open(path, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            if digest != manifest["sha256"][name]:
                raise ValueError(f"checksum mismatch for {name}")
        trials.append(read_matrix_csv(path))
    truth = read_moments(os.path.join(directory, "truth")) if manifest.get("has_truth") else None
    return Dataset(grid, trials, truth, manifest.get("observation", "normal"), manifest.get("meta", {}))
