"""Experiment runners: representation comparison tables, weight-decay sweeps,
ARD precision histograms, and the two-cluster toy."""
from __future__ import annotations

import csv
import io
import json
import logging
import re
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from scipy.signal import find_peaks
from scipy.stats import gaussian_kde

from .dataset import (DEFAULT_MIN_COUNT, DEFAULT_TRAIN_FRACTION, ProbingDataset,
                      prepare_dataset)
from .evidence import MarglikConfig, optimize_marglik, select_probe
from .laplace import LOG_PREC_BOUNDS, PosteriorFit, compute_curvature, log_evidence
from .probes import (PriorPrecisions, ProbeArchitecture, architectures_for, nll, predict_proba,
                     save_checkpoint)
from .representations import RepresentationSpec, embed_dataset, random_rows
from .synthetic import ring_task
from .training import TrainConfig, train_map

log = logging.getLogger(__name__)

_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")

TABLE_FIELDS = ["task", "representation", "log_evidence_per_example", "spread", "depth",
                "n_runs", "n_failed", "best"]
SWEEP_FIELDS = ["lambda", "train_ce", "test_ce", "log_evidence_per_example", "log_evidence",
                "theta_norm"]
HIST_FIELDS = ["bin_lo", "bin_hi", "weights", "biases", "count"]
TOY_GRID_FIELDS = ["x1", "x2", "probe", "p0", "p1"]


def default_decay_grid() -> np.ndarray:
    return np.logspace(-4, 8, 13)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    path: str
    min_count: int = DEFAULT_MIN_COUNT
    train_fraction: float = DEFAULT_TRAIN_FRACTION
    split_seed: int = 0

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ValueError(f"task name {self.name!r} must match {_NAME_RE.pattern}")


@dataclass
class ExperimentConfig:
    tasks: list[TaskSpec]
    representations: list[RepresentationSpec]
    depths: tuple[int, ...] = (0, 1, 2)
    hidden_width: int = 100
    train: TrainConfig = field(default_factory=TrainConfig)
    marglik: MarglikConfig = field(default_factory=MarglikConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("config needs at least one task")
        if not self.representations:
            raise ValueError("config needs at least one representation")
        if not self.seeds:
            raise ValueError("config needs at least one seed")
        for kind, names in (("task", [t.name for t in self.tasks]),
                            ("representation", [r.name for r in self.representations])):
            dup = [n for n, c in Counter(names).items() if c > 1]
            if dup:
                raise ValueError(f"duplicate {kind} name {dup[0]!r}")
        for r in self.representations:
            if not _NAME_RE.match(r.name):
                raise ValueError(f"representation name {r.name!r} must match {_NAME_RE.pattern}")
        if not self.depths or any(d not in (0, 1, 2) for d in self.depths):
            raise ValueError("depths must be a non-empty subset of {0, 1, 2}")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {"tasks", "representations", "depths", "hidden_width", "train",
                            "marglik", "seeds", "output_dir", "workers"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = Path(base_dir) if base_dir is not None else None

        def resolve(p):
            if p is None or base is None or Path(p).is_absolute():
                return p
            return str(base / p)

        tasks = [TaskSpec(**{**t, "path": resolve(t["path"])}) for t in d.pop("tasks", [])]
        reps = []
        for r in d.pop("representations", []):
            r = dict(r)
            if "source_path" in r:
                r["source_path"] = resolve(r["source_path"])
            reps.append(RepresentationSpec.from_dict(r))
        train = TrainConfig(**d.pop("train", {}) or {})
        mg = dict(d.pop("marglik", {}) or {})
        if "log_prec_bounds" in mg:
            mg["log_prec_bounds"] = tuple(mg["log_prec_bounds"])
        if "output_dir" in d:
            d["output_dir"] = resolve(d["output_dir"])
        if "depths" in d:
            d["depths"] = tuple(d["depths"])
        return cls(tasks, reps, train=train, marglik=MarglikConfig(**mg), **d)

    def to_dict(self) -> dict:
        """Everything except ``output_dir`` and ``workers``, which do not affect results."""
        return {
            "tasks": [dict(t.__dict__) for t in self.tasks],
            "representations": [dict(r.__dict__) for r in self.representations],
            "depths": list(self.depths),
            "hidden_width": self.hidden_width,
            "train": self.train.to_dict(),
            "marglik": self.marglik.to_dict(),
            "seeds": list(self.seeds),
        }


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_records_csv(records: Sequence[dict], fields: Sequence[str], path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in records:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                    for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_records_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


@dataclass
class TaskData:
    dataset: ProbingDataset
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    rep_fingerprint: str


def load_task_matrix(task: TaskSpec, rep: RepresentationSpec,
                     dataset: ProbingDataset | None = None) -> TaskData:
    ds = dataset or prepare_dataset(task.path, task.min_count, task.train_fraction,
                                    task.split_seed)
    dm = embed_dataset(rep, ds)
    train, test = ds.split("train"), ds.split("test") if "test" in ds.splits else []
    return TaskData(ds, dm.select([e.id for e in train]), ds.label_indices(train),
                    dm.select([e.id for e in test]), ds.label_indices(test), dm.rep_fingerprint)


# ---------------------------------------------------------------- comparison

def _job_stem(task: str, rep: str, seed: int) -> str:
    return f"{task}__{rep}__seed{seed}"


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**cfg.to_dict(), "shuffle_seed": seed, "init_seed": seed})


def _run_job(cfg: ExperimentConfig, task: TaskSpec, rep: RepresentationSpec, seed: int,
             data: TaskData | None, prep_error: str | None, ckpt_dir: Path | None) -> dict:
    record = {"task": task.name, "representation": rep.name, "seed": seed,
              "status": "failed", "error": prep_error, "selection": None}
    if data is None:
        return record
    record.update(dataset_fingerprint=data.dataset.fingerprint(),
                  representation_fingerprint=data.rep_fingerprint,
                  n_train=int(len(data.y_train)), num_classes=data.dataset.num_classes)
    archs = architectures_for(data.X_train.shape[1], data.dataset.num_classes, cfg.depths,
                              cfg.hidden_width)
    try:
        result = select_probe(data.X_train, data.y_train, archs, _seeded(cfg.train, seed),
                              cfg.marglik)
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        record["error"] = str(exc)
        return record
    record["selection"] = result.to_dict()
    if result.errors:
        record["error"] = "; ".join(f"{k}: {v}" for k, v in sorted(result.errors.items()))
    else:
        record["status"] = "ok"
    if ckpt_dir is not None:
        for fit in result.fits:
            save_checkpoint(ckpt_dir / f"{_job_stem(task.name, rep.name, seed)}__"
                            f"{fit.theta_map.arch.name}.json",
                            fit.theta_map, fit.precisions, seed, extra=fit.summary())
    return record


def _cell(records: list[dict]) -> dict:
    runs = [r for r in records if r["selection"] is not None]
    per_example = [r["selection"]["inductive_bias"] / r["n_train"] for r in runs]
    depths = Counter(r["selection"]["chosen_depth"] for r in runs)
    cell = {
        "n_runs": len(runs),
        "n_failed": sum(r["status"] != "ok" for r in records),
        "errors": sorted({r["error"] for r in records if r["error"]}),
    }
    if runs:
        top = max(depths.values())
        cell.update(log_evidence_per_example=float(np.mean(per_example)),
                    spread=float(np.std(per_example)),
                    depth=min(d for d, c in depths.items() if c == top),
                    runs=[float(v) for v in per_example])
    else:
        cell.update(log_evidence_per_example=None, spread=None, depth=None, runs=[])
    return cell


def build_table(records: Sequence[dict], task_names: Sequence[str],
                rep_names: Sequence[str]) -> dict:
    """Aggregate job records into representation-by-task cells.

    Each run contributes the per-example log evidence of its selected probe;
    a cell reports the mean and standard deviation over runs and the most
    frequent selected depth (ties to the shallower probe).
    """
    cells = []
    best = {}
    for t in task_names:
        row = []
        for r in rep_names:
            cell = _cell([rec for rec in records
                          if rec["task"] == t and rec["representation"] == r])
            cell.update(task=t, representation=r, best=False)
            row.append(cell)
        scored = [c for c in row if c["log_evidence_per_example"] is not None]
        if scored:
            winner = max(scored, key=lambda c: c["log_evidence_per_example"])
            winner["best"] = True
            best[t] = winner["representation"]
        cells.extend(row)
    failed = sum(rec["status"] != "ok" for rec in records)
    return {"tasks": list(task_names), "representations": list(rep_names), "cells": cells,
            "best": best, "n_jobs": len(records), "failed_jobs": failed}


def table_csv(table: dict) -> str:
    rows = []
    for c in table["cells"]:
        rows.append({k: ("" if c[k] is None else c[k]) for k in TABLE_FIELDS})
        rows[-1]["best"] = int(c["best"])
    return write_records_csv(rows, TABLE_FIELDS)


def report(output_dir) -> dict:
    """Rebuild comparison.json and comparison.csv from the serialized job records."""
    out = Path(output_dir)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    records = [json.loads((out / "fits" / f"{stem}.json").read_text(encoding="utf-8"))
               for stem in manifest["jobs"]]
    table = build_table(records, manifest["tasks"], manifest["representations"])
    (out / "comparison.json").write_text(dumps_json(table), encoding="utf-8")
    (out / "comparison.csv").write_text(table_csv(table), encoding="utf-8")
    return table


def run_comparison(cfg: ExperimentConfig, checkpoints: bool = True) -> dict:
    """Run select_probe for every (task, representation, seed) and write the table.

    Outputs under ``cfg.output_dir``: ``fits/<job>.json`` per job, optional
    probe checkpoints, ``manifest.json``, ``comparison.json`` and ``comparison.csv``.
    A failing job is recorded in its cell and does not stop the others.
    """
    out = Path(cfg.output_dir)
    (out / "fits").mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints" if checkpoints else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(exist_ok=True)

    jobs = []
    for task in cfg.tasks:
        try:
            ds, ds_err = prepare_dataset(task.path, task.min_count, task.train_fraction,
                                         task.split_seed), None
        except (OSError, ValueError) as exc:
            ds, ds_err = None, f"dataset: {exc}"
        for rep in cfg.representations:
            data, err = None, ds_err
            if ds is not None:
                try:
                    data = load_task_matrix(task, rep, ds)
                except (OSError, ValueError) as exc:
                    err = f"representation: {exc}"
            for seed in cfg.seeds:
                jobs.append((task, rep, seed, data, err))

    args = [(cfg, t, r, s, d, e, ckpt_dir) for t, r, s, d, e in jobs]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            records = list(pool.map(_run_job, *zip(*args)))
    else:
        records = [_run_job(*a) for a in args]

    stems = []
    for rec in records:
        stem = _job_stem(rec["task"], rec["representation"], rec["seed"])
        (out / "fits" / f"{stem}.json").write_text(dumps_json(rec), encoding="utf-8")
        stems.append(stem)
    manifest = {"config": cfg.to_dict(), "tasks": [t.name for t in cfg.tasks],
                "representations": [r.name for r in cfg.representations], "jobs": stems}
    (out / "manifest.json").write_text(dumps_json(manifest), encoding="utf-8")
    return report(out)


# ---------------------------------------------------------------- decay sweep

def cross_entropy(params, X, y) -> float:
    return nll(params, X, y) / len(y) if len(y) else float("nan")


def run_decay_sweep(X_train, y_train, X_test, y_test, arch: ProbeArchitecture,
                    lam_grid: Sequence[float], cfg: TrainConfig = TrainConfig(),
                    curvature: str = "kron") -> list[dict]:
    """Train at each fixed scalar prior precision and record fit, generalization and evidence."""
    lam_grid = [float(v) for v in lam_grid]
    if not lam_grid:
        raise ValueError("lambda grid is empty")
    if any(v <= 0 for v in lam_grid):
        raise ValueError("lambda grid must be positive")
    records = []
    for lam in lam_grid:
        prec = PriorPrecisions.scalar(lam)
        params, _ = train_map(arch, X_train, y_train, prec, cfg)
        fit = log_evidence(params, compute_curvature(curvature, params, X_train, y_train),
                           prec, X_train, y_train)
        records.append({
            "lambda": lam,
            "train_ce": cross_entropy(params, X_train, y_train),
            "test_ce": cross_entropy(params, X_test, y_test),
            "log_evidence_per_example": fit.log_evidence_per_example,
            "log_evidence": fit.log_evidence,
            "theta_norm": float(np.linalg.norm(params.theta)),
        })
        log.info("lambda=%g train_ce=%.4f test_ce=%.4f logZ/N=%.4f", lam,
                 records[-1]["train_ce"], records[-1]["test_ce"],
                 records[-1]["log_evidence_per_example"])
    return records


def evidence_choice(records: Sequence[dict]) -> dict:
    return max(records, key=lambda r: float(r["log_evidence"]))


# ---------------------------------------------------------------- ARD

def count_modes(values, grid_size: int = 801, prominence: float = 0.05) -> int:
    """Number of peaks of a Gaussian KDE (Scott bandwidth) whose prominence is at
    least ``prominence`` times the highest density."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3 or np.ptp(v) == 0:
        return 1
    kde = gaussian_kde(v)
    pad = 3.0 * float(np.sqrt(kde.covariance[0, 0]))
    dens = kde(np.linspace(v.min() - pad, v.max() + pad, grid_size))
    peaks, _ = find_peaks(dens, prominence=prominence * dens.max())
    return max(len(peaks), 1)


def is_bimodal(values) -> bool:
    return count_modes(values) >= 2


@dataclass
class ArdResult:
    fit: PosteriorFit
    log_prec: np.ndarray
    is_weight: np.ndarray
    curvature_diag: np.ndarray
    histogram: list[dict]
    summary: dict

    def zeroed(self, rule: str = "prior_dominated") -> np.ndarray:
        """Mask of parameters the prior has effectively switched off.

        ``bound``: log precision within 1 of the upper bound.
        ``prior_dominated``: precision exceeds the data curvature, so the
        posterior shrinks the parameter by more than half toward zero.
        """
        if rule == "bound":
            return self.log_prec >= LOG_PREC_BOUNDS[1] - 1.0
        if rule == "prior_dominated":
            return np.exp(self.log_prec) > self.curvature_diag
        raise ValueError(f"unknown rule {rule!r}")


def run_ard(X, y, cfg: TrainConfig = TrainConfig(), mcfg: MarglikConfig | None = None,
            bins: int = 40, relevant_dims: Sequence[int] | None = None) -> ArdResult:
    """Linear probe with one prior precision per parameter and diagonal curvature."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    mcfg = mcfg or MarglikConfig(prior_mode="per_parameter", curvature="diagonal")
    if mcfg.prior_mode != "per_parameter" or mcfg.curvature != "diagonal":
        raise ValueError("ARD needs per_parameter precisions and diagonal curvature")
    arch = ProbeArchitecture(X.shape[1], int(y.max()) + 1, depth=0)
    fit = optimize_marglik(arch, X, y, cfg, mcfg)
    layout = fit.theta_map.layout
    log_prec = np.log(fit.precisions.values)
    weight = layout.is_weight()
    lo, hi = mcfg.log_prec_bounds
    edges = np.linspace(lo, hi, bins + 1)
    w_counts, _ = np.histogram(log_prec[weight], edges)
    b_counts, _ = np.histogram(log_prec[~weight], edges)
    histogram = [{"bin_lo": float(edges[k]), "bin_hi": float(edges[k + 1]),
                  "weights": int(w_counts[k]), "biases": int(b_counts[k]),
                  "count": int(w_counts[k] + b_counts[k])} for k in range(bins)]
    res = ArdResult(fit, log_prec, weight, fit.curvature.diag, histogram, {})

    summary = {"n_params": int(log_prec.size), "n_weights": int(weight.sum()),
               "logZ": float(fit.log_evidence),
               "logZ_per_example": float(fit.log_evidence_per_example),
               "weight_modes": count_modes(log_prec[weight])}
    for rule in ("bound", "prior_dominated"):
        summary[f"fraction_zeroed_{rule}"] = float(res.zeroed(rule)[weight].mean())
    if relevant_dims is not None:
        input_dim = np.arange(weight.sum()) % arch.input_dim
        irrelevant = ~np.isin(input_dim, np.asarray(relevant_dims))
        for rule in ("bound", "prior_dominated"):
            z = res.zeroed(rule)[weight]
            summary[f"irrelevant_zeroed_{rule}"] = float(z[irrelevant].mean())
            summary[f"relevant_zeroed_{rule}"] = float(z[~irrelevant].mean())
    res.summary = summary
    return res


# ---------------------------------------------------------------- toy

@dataclass
class ToyResult:
    fits: dict[str, PosteriorFit]
    grid_axis: np.ndarray
    grid_probs: dict[str, np.ndarray]

    def log_evidence(self, rep: str, probe: str) -> float:
        return self.fits[f"{rep}/{probe}"].log_evidence

    def best(self, rep: str) -> float:
        return max(self.log_evidence(rep, p) for p in ("neural", "linear"))

    def to_dict(self) -> dict:
        return {"log_evidence": {k: float(f.log_evidence) for k, f in self.fits.items()},
                "best": {r: float(self.best(r)) for r in ("informative", "random")},
                "fits": {k: f.summary() for k, f in self.fits.items()}}


def run_toy(output_dir=None, seed: int = 0, n: int = 400, grid_size: int = 50,
            extent: float = 3.0, cfg: TrainConfig | None = None,
            mcfg: MarglikConfig = MarglikConfig()) -> ToyResult:
    """Binary 2-D task (a cluster inside a ring) under an informative representation
    (the coordinates) and a random one, each probed by a linear and a one-hidden-layer
    probe. The predictive grid covers the informative representation's input plane."""
    cfg = cfg or TrainConfig(shuffle_seed=seed, init_seed=seed)
    X, y = ring_task(n, seed)
    reps = {"informative": X, "random": random_rows(seed, n, 2)}
    probes = {"neural": 1, "linear": 0}
    fits = {}
    for rname, R in reps.items():
        for pname, depth in probes.items():
            fits[f"{rname}/{pname}"] = optimize_marglik(ProbeArchitecture(2, 2, depth), R, y,
                                                        cfg, mcfg)
    axis = np.linspace(-extent, extent, grid_size)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    grid = {p: predict_proba(fits[f"informative/{p}"].theta_map, pts).reshape(grid_size,
                                                                             grid_size, 2)
            for p in probes}
    result = ToyResult(fits, axis, grid)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "toy.json").write_text(dumps_json({"seed": seed, "n": n, **result.to_dict()}),
                                      encoding="utf-8")
        rows = [{"x1": float(pts[k, 0]), "x2": float(pts[k, 1]), "probe": p,
                 "p0": float(grid[p].reshape(-1, 2)[k, 0]),
                 "p1": float(grid[p].reshape(-1, 2)[k, 1])}
                for p in probes for k in range(len(pts))]
        write_records_csv(rows, TOY_GRID_FIELDS, out / "toy_grid.csv")
    return result
