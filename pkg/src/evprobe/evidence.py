"""Evidence framework: interleave MAP training with ascent on log prior precisions,
and pick the evidence-maximizing probe architecture for a representation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .laplace import (LOG_PREC_BOUNDS, EvidenceGeometry, PosteriorFit, compute_curvature,
                      data_fingerprint, input_factor, log_evidence)
from .probes import (LOG_2PI, ParameterLayout, PriorPrecisions, ProbeArchitecture, ProbeParams,
                     nll_theta)
from .training import AdamState, TrainConfig, TrainTrace, adam_update, train_map

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MarglikConfig:
    frequency: int = 1
    steps_per_phase: int = 100
    hyper_lr: float = 0.1
    burn_in: int = 0
    precision_init: float = 1.0
    prior_mode: str = "per_group"
    curvature: str = "kron"
    hyper_optimizer: str = "adam"
    log_prec_bounds: tuple[float, float] = LOG_PREC_BOUNDS

    def __post_init__(self):
        if self.frequency < 1 or self.steps_per_phase < 1:
            raise ValueError("frequency and steps_per_phase must be positive")
        if self.hyper_optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown hyper optimizer {self.hyper_optimizer!r}")
        if self.prior_mode == "per_parameter" and self.curvature != "diagonal":
            raise ValueError("per-parameter precisions require diagonal curvature")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["log_prec_bounds"] = list(self.log_prec_bounds)
        return d


class HyperOptimizer:
    """Ascent on log precisions with the curvature and theta held fixed.

    ``gd`` is plain gradient ascent; ``adam`` keeps moment estimates across
    phases, which makes the step size insensitive to group sizes.
    """

    def __init__(self, mcfg: MarglikConfig, n: int):
        self.mcfg = mcfg
        self.state = AdamState.zeros(n)

    def run_phase(self, geom: EvidenceGeometry, logv: np.ndarray, theta: np.ndarray) -> np.ndarray:
        lo, hi = self.mcfg.log_prec_bounds
        lr = self.mcfg.hyper_lr
        sq = geom.squared_norms(theta)
        for _ in range(self.mcfg.steps_per_phase):
            grad = geom.grad_log_evidence(logv, theta, sq)
            if self.mcfg.hyper_optimizer == "gd":
                logv = logv + lr * grad
            else:
                self.state, delta = adam_update(self.state, -grad, lr)
                logv = logv + delta
            logv = np.clip(logv, lo, hi)
        return logv


def optimize_marglik(arch: ProbeArchitecture, X, y, cfg: TrainConfig = TrainConfig(),
                     mcfg: MarglikConfig = MarglikConfig()) -> PosteriorFit:
    """MAP training with online evidence maximization over prior precisions.

    The returned fit carries the training trace as ``fit.trace``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    layout = ParameterLayout.for_architecture(arch)
    prec0 = PriorPrecisions.init(mcfg.prior_mode, layout, mcfg.precision_init)
    hyper = HyperOptimizer(mcfg, prec0.values.size)
    logv_box = [np.log(prec0.values)]
    first = input_factor(X) if mcfg.curvature == "kron" else None

    def hook(epoch, theta, prec):
        if epoch <= mcfg.burn_in or (epoch - mcfg.burn_in) % mcfg.frequency:
            return None
        params = ProbeParams(theta, arch)
        curv = compute_curvature(mcfg.curvature, params, X, y, first)
        geom = EvidenceGeometry(curv, layout, mcfg.prior_mode)
        logv = hyper.run_phase(geom, logv_box[0], theta)
        logv_box[0] = logv
        logz = (-nll_theta(theta, arch, X, y) + geom.log_prior(logv, theta)
                + 0.5 * layout.n_params * LOG_2PI - 0.5 * geom.logdet(logv))
        return PriorPrecisions.from_log(mcfg.prior_mode, logv), logz

    params, trace = train_map(arch, X, y, prec0, cfg, hyper_hook=hook)
    prec = PriorPrecisions.from_log(mcfg.prior_mode, logv_box[0])
    curv = compute_curvature(mcfg.curvature, params, X, y, first)
    fit = log_evidence(params, curv, prec, X, y)
    fit.trace = trace
    return fit


@dataclass
class SelectionResult:
    fits: list[PosteriorFit]
    chosen_index: int
    errors: dict = field(default_factory=dict)

    @property
    def chosen_fit(self) -> PosteriorFit:
        return self.fits[self.chosen_index]

    @property
    def chosen_arch(self) -> ProbeArchitecture:
        return self.chosen_fit.theta_map.arch

    @property
    def inductive_bias(self) -> float:
        return self.chosen_fit.log_evidence

    def to_dict(self) -> dict:
        return {
            "architectures": [f.summary() for f in self.fits],
            "chosen_arch": self.chosen_arch.name,
            "chosen_depth": self.chosen_arch.depth,
            "inductive_bias": float(self.inductive_bias),
            "errors": dict(self.errors),
        }


def choose_best(log_evidences: Sequence[float], archs: Sequence[ProbeArchitecture],
                tol: float = 1e-6) -> int:
    """Argmax of log evidence; near-ties go to fewer layers, then fewer parameters."""
    best = max(log_evidences)
    candidates = [i for i, z in enumerate(log_evidences) if z >= best - tol]
    return min(candidates, key=lambda i: (archs[i].depth, archs[i].n_params, i))


def select_probe(X, y, arch_list: Sequence[ProbeArchitecture], cfg: TrainConfig = TrainConfig(),
                 mcfg: MarglikConfig = MarglikConfig()) -> SelectionResult:
    if not arch_list:
        raise ValueError("arch_list is empty")
    fits, errors = [], {}
    for arch in arch_list:
        try:
            fits.append(optimize_marglik(arch, X, y, cfg, mcfg))
        except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            log.warning("architecture %s failed: %s", arch.name, exc)
            errors[arch.name] = str(exc)
    if not fits:
        raise RuntimeError(f"all architectures failed: {errors}")
    idx = choose_best([f.log_evidence for f in fits], [f.theta_map.arch for f in fits])
    return SelectionResult(fits, idx, errors)


def likelihood_ratio(fit_a: PosteriorFit, fit_b: PosteriorFit) -> float:
    """Evidence ratio of two equally probable models on the same data."""
    if fit_a.data_fingerprint != fit_b.data_fingerprint:
        raise ValueError("fits were computed on different data")
    return math.exp(fit_a.log_evidence - fit_b.log_evidence)


__all__ = ["MarglikConfig", "optimize_marglik", "SelectionResult", "select_probe",
           "likelihood_ratio", "choose_best", "data_fingerprint", "TrainTrace"]
