"""Desk-scale spectrum-tracking experiments.

Three data sources are supported: a well-specified teacher network, random
+-1 labels and a user-supplied numeric CSV. Each run trains a two-layer network
by gradient flow and records the leading eigenvalues of the GD-kernel Gram
matrix ``K_t(X, X)`` at scheduled steps.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import Dataset, DivergenceError, FlowConfig, FlowResult, default_step, run_flow
from .io import atomic_write
from .kernels import gram
from .model import InitSpec, NetworkState, forward, init_network
from .spectral import Spectrum, eig_sym

__all__ = [
    "CsvParseError",
    "ExperimentSpec",
    "SpectrumSeries",
    "gen_random_labels",
    "gen_teacher",
    "geometric_schedule",
    "load_csv",
    "run_spectrum_experiment",
    "stabilization",
    "write_experiment",
]

log = logging.getLogger(__name__)

KINDS = ("teacher", "random-label", "csv")


class CsvParseError(ValueError):
    """A malformed CSV cell or row. ``row`` and ``col`` are 1-based data coordinates."""

    def __init__(self, message, row=None, col=None):
        self.row, self.col = row, col
        where = f" at ({row}, {col})" if col is not None else (f" at row {row}" if row else "")
        super().__init__(message + where)


# -- data ---------------------------------------------------------------------


def gen_teacher(n: int, d: int, J: int, seed: int = 0, teacher: Optional[NetworkState] = None):
    """Gaussian inputs labelled by a width-``J`` ReLU teacher with N(0, 1) weights.

    Returns ``(Dataset, teacher)``. Pass ``teacher`` to fix the target network.
    """
    if J < 1:
        raise ValueError("teacher width J must be >= 1")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    if teacher is None:
        teacher = NetworkState(rng.standard_normal(J), rng.standard_normal((J, d)), seed)
    Y = forward(teacher, X)
    prov = {"kind": "teacher", "n": n, "d": d, "J": J, "seed": seed}
    return Dataset(X, Y, provenance=prov), teacher


def gen_random_labels(n: int, d: int, seed: int = 0) -> Dataset:
    """Gaussian inputs with Rademacher labels."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    Y = rng.choice((-1.0, 1.0), size=n)
    return Dataset(X, Y, provenance={"kind": "random-label", "n": n, "d": d, "seed": seed})


def load_csv(path, target_column, normalize: bool = True) -> Dataset:
    """Read a rectangular numeric CSV with a header row.

    ``target_column`` is a header name or a 0-based column index. With
    ``normalize`` every feature column is centred and scaled to unit
    (population) variance; the target is left untouched.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvParseError(f"{path} is empty")
    header, body = [h.strip() for h in rows[0]], [r for r in rows[1:] if r]
    if isinstance(target_column, str) and not target_column.lstrip("-").isdigit():
        if target_column not in header:
            raise CsvParseError(f"target column {target_column!r} not in header {header}")
        tcol = header.index(target_column)
    else:
        tcol = int(target_column)
        if not 0 <= tcol < len(header):
            raise CsvParseError(f"target column index {tcol} out of range for {len(header)} columns")
    if not body:
        raise CsvParseError(f"{path} has a header but no data rows")
    data = np.empty((len(body), len(header)))
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise CsvParseError(f"ragged row: expected {len(header)} cells, got {len(row)}", row=i)
        for j, cell in enumerate(row, start=1):
            try:
                data[i - 1, j - 1] = float(cell)
            except ValueError:
                raise CsvParseError(f"non-numeric cell {cell!r}", row=i, col=j) from None
    if not np.all(np.isfinite(data)):
        i, j = np.argwhere(~np.isfinite(data))[0]
        raise CsvParseError("non-finite cell", row=int(i) + 1, col=int(j) + 1)
    Y = data[:, tcol]
    X = np.delete(data, tcol, axis=1)
    if normalize:
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        if np.any(sd == 0):
            warnings.warn("constant feature columns are centred but not scaled", stacklevel=2)
        X = (X - mu) / np.where(sd == 0, 1.0, sd)
    log.info("loaded %s: %d rows, %d features, target %r", path, X.shape[0], X.shape[1],
             header[tcol])
    for name, col in zip([h for k, h in enumerate(header) if k != tcol], X.T):
        log.debug("column %s: mean %.3g std %.3g", name, col.mean(), col.std())
    prov = {"kind": "csv", "path": str(path), "target": header[tcol], "normalize": normalize}
    return Dataset(X, Y, provenance=prov)


# -- experiment driver --------------------------------------------------------


def geometric_schedule(max_steps: int, per_decade: int = 1):
    """Snapshot steps 0, then ``10**(k / per_decade)`` rounded, capped at ``max_steps``."""
    steps = {0}
    k = 0
    while True:
        s = int(round(10 ** (k / per_decade)))
        if s > max_steps:
            break
        steps.add(s)
        k += 1
    steps.add(int(max_steps))
    return sorted(steps)


@dataclass
class ExperimentSpec:
    """Configuration of one spectrum-tracking run.

    ``schedule`` lists the training steps at which ``K_t`` is snapshot; a
    snapshot is also taken at termination. ``keep`` is the fraction of leading
    eigenvalues recorded.
    """

    kind: str = "teacher"
    n: int = 50
    d: int = 5
    m: int = 500
    J: int = 2
    seed: int = 0
    init: str = "gaussian-rademacher"
    radius: float = 1.0
    flow: FlowConfig = field(default_factory=lambda: FlowConfig(max_steps=100_000,
                                                                 eps_grad=1e-6))
    schedule: Optional[list] = None
    per_decade: int = 1
    keep: float = 0.8
    csv_path: Optional[str] = None
    target_column: Optional[str] = None
    normalize: bool = True
    experiment_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not 0 < self.keep <= 1:
            raise ValueError("keep fraction must lie in (0, 1]")
        if isinstance(self.flow, dict):
            self.flow = FlowConfig(**self.flow)
        if self.schedule is None:
            self.schedule = geometric_schedule(self.flow.max_steps, self.per_decade)
        self.schedule = [int(s) for s in self.schedule]
        if any(b <= a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValueError("snapshot schedule must be strictly increasing")
        if self.kind == "csv" and (self.csv_path is None or self.target_column is None):
            raise ValueError("csv experiments need csv_path and target_column")
        if self.experiment_id is None:
            tag = f"J{self.J}" if self.kind == "teacher" else ""
            self.experiment_id = f"{self.kind}{tag}-n{self.n}-m{self.m}-s{self.seed}"

    def dataset(self) -> Dataset:
        if self.kind == "teacher":
            return gen_teacher(self.n, self.d, self.J, self.seed)[0]
        if self.kind == "random-label":
            return gen_random_labels(self.n, self.d, self.seed)
        return load_csv(self.csv_path, self.target_column, self.normalize)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["flow"] = self.flow.to_dict()
        return out


def stabilization(prev: Spectrum, last: Spectrum) -> float:
    """Largest relative eigenvalue change between two snapshots over the kept indices."""
    k = min(len(prev), len(last))
    a, b = prev.values[:k], last.values[:k]
    return float(np.max(np.abs(b - a) / (np.abs(a) + 1e-12))) if k else 0.0


@dataclass
class SpectrumSeries:
    experiment_id: str
    snapshots: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    @property
    def times(self):
        return [s.t for s in self.snapshots]

    def diagnostics(self):
        """Relative change between each pair of consecutive snapshots."""
        return [stabilization(a, b) for a, b in zip(self.snapshots, self.snapshots[1:])]

    @property
    def stabilization(self) -> float:
        diag = self.diagnostics()
        return diag[-1] if diag else float("nan")

    def time_to_stabilization(self, tol: float = 0.05):
        """Earliest snapshot time after which every consecutive change stays below ``tol``."""
        diag = self.diagnostics()
        for k in range(len(diag)):
            if all(v < tol for v in diag[k:]):
                return self.snapshots[k].t
        return float("inf")

    def top_growth(self) -> float:
        return float(self.snapshots[-1].values[0] - self.snapshots[0].values[0])

    def rows(self):
        for s in self.snapshots:
            for t, i, v in s.rows():
                yield self.experiment_id, t, i, v

    def to_csv(self) -> str:
        lines = ["experiment_id,t,index,eigenvalue"]
        lines += [f"{e},{t!r},{i},{v!r}" for e, t, i, v in self.rows()]
        return "\n".join(lines) + "\n"


def run_spectrum_experiment(spec: ExperimentSpec, data: Optional[Dataset] = None):
    """Train per ``spec`` and snapshot the truncated ``K_t`` spectrum on schedule.

    Returns ``(SpectrumSeries, FlowResult)``. On divergence the raised
    :class:`DivergenceError` carries the partial series as ``err.series``.
    """
    data = data if data is not None else spec.dataset()
    init = InitSpec(spec.init, seed=spec.seed, radius=spec.radius)
    net0 = init_network(init, spec.m, data.d)
    series = SpectrumSeries(spec.experiment_id)

    def snap(step, t, net):
        G = gram("K", net, data.X, provenance={"experiment": spec.experiment_id, "step": step})
        series.snapshots.append(eig_sym(G, t=t).truncate(spec.keep))
        series.steps.append(step)
        return f"{spec.experiment_id}@{step}"

    flow = spec.flow
    if flow.eta is None:
        flow = FlowConfig(**{**flow.to_dict(), "eta": default_step(net0, data)})
    try:
        result = run_flow(net0, data, flow, callback=snap, callback_steps=spec.schedule)
    except DivergenceError as err:
        err.series = series
        raise
    if spec.kind == "teacher" and len(series.snapshots) > 1 and series.top_growth() <= 0:
        warnings.warn(f"{spec.experiment_id}: top eigenvalue of K_t did not grow during training",
                      stacklevel=2)
    return series, result


def write_experiment(outdir, spec: ExperimentSpec, series: SpectrumSeries,
                     result: FlowResult) -> Path:
    """Write spectra.csv, trajectory.csv, spec.json and network.json into ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    atomic_write(outdir / "spectra.csv", series.to_csv())
    atomic_write(outdir / "trajectory.csv", result.log.to_csv())
    echo = spec.to_dict()
    echo["resolved_eta"] = result.eta
    echo["result"] = {**result.summary(), "stabilization": series.stabilization}
    atomic_write(outdir / "spec.json", json.dumps(echo, indent=2, default=float))
    atomic_write(outdir / "network.json", result.net.to_json())
    return outdir
