"""MAP training of probes with minibatch Adam.

The per-step objective is ``(N / n_batch) * batch_nll - log_prior`` so that a
minibatch gradient is an unbiased estimate of the full negative log joint.
Batch sums are plain numpy reductions over the batch in permutation order.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .probes import (PriorPrecisions, ProbeArchitecture, ProbeParams, init_params,
                     log_prior_theta, nll_and_grad)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 512
    epochs: int = 500
    shuffle_seed: int = 0
    init_seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(state: AdamState, grad: np.ndarray, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam step. Returns the new state and the parameter delta."""
    if state.m.shape != grad.shape:
        raise ValueError(f"state has shape {state.m.shape}, gradient {grad.shape}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    delta = -lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(m, v, t), delta


TRACE_FIELDS = ["epoch", "train_nll", "log_prior", "grad_norm",
                "log_evidence", "prec_min", "prec_median", "prec_max"]


@dataclass
class TrainTrace:
    records: list[dict] = field(default_factory=list)

    def append(self, **rec) -> None:
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.records], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=TRACE_FIELDS, restval="", extrasaction="ignore")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# Called after every epoch with (epoch, theta, prec); may return
# (new_precisions, log_evidence) to replace the prior for subsequent epochs.
HyperHook = Callable[[int, np.ndarray, PriorPrecisions], Optional[tuple]]


def negative_log_joint(theta, arch, X, y, lam) -> tuple[float, np.ndarray]:
    value, grad = nll_and_grad(theta, arch, X, y)
    value -= log_prior_theta(theta, lam)
    grad += lam * theta
    return value, grad


def train_map(arch: ProbeArchitecture, X_train, y_train, prec: PriorPrecisions,
              cfg: TrainConfig = TrainConfig(), hyper_hook: HyperHook | None = None,
              init: ProbeParams | None = None) -> tuple[ProbeParams, TrainTrace]:
    X = np.asarray(X_train, dtype=np.float64)
    y = np.asarray(y_train, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("training data is empty")
    if len(np.unique(y)) < 2:
        raise ValueError("training labels contain fewer than 2 classes")
    if y.min() < 0 or y.max() >= arch.num_classes:
        raise ValueError("labels out of range for the architecture")

    params = init.copy() if init is not None else init_params(arch, cfg.init_seed)
    layout = params.layout
    theta = params.theta
    lam = prec.expand(layout)
    state = AdamState.zeros(theta.size)
    rng = np.random.default_rng(cfg.shuffle_seed)
    trace = TrainTrace()
    bs = cfg.batch_size

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for bi, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            value, grad = nll_and_grad(theta, arch, X[idx], y[idx], weight=n / len(idx))
            value -= log_prior_theta(theta, lam)
            grad += lam * theta
            if not (np.isfinite(value) and np.all(np.isfinite(grad))):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            state, delta = adam_update(state, grad, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            theta = theta + delta

        full_nll, g = nll_and_grad(theta, arch, X, y)
        lp = log_prior_theta(theta, lam)
        g += lam * theta
        rec = dict(epoch=epoch, train_nll=full_nll, log_prior=lp,
                   grad_norm=float(np.linalg.norm(g)))
        if hyper_hook is not None:
            out = hyper_hook(epoch, theta, prec)
            if out is not None:
                prec, logz = out
                lam = prec.expand(layout)
                rec.update(log_evidence=logz, prec_min=float(prec.values.min()),
                           prec_median=float(np.median(prec.values)),
                           prec_max=float(prec.values.max()))
        trace.append(**rec)
        if epoch % 100 == 0:
            log.debug("epoch %d nll %.4f log_prior %.4f", epoch, full_nll, lp)

    return ProbeParams(theta, arch), trace
