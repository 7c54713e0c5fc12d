"""Laplace approximation of the log evidence for probes.

Curvature is the generalized Gauss-Newton (GGN) matrix of the softmax
likelihood, either its exact diagonal or a layerwise Kronecker factorization
``G (x) A`` where ``A`` is the second moment of the bias-extended layer input
and ``G`` the second moment of back-propagated loss-Hessian factors.

In Kronecker mode the weight matrix and bias of a layer share one block; the
block precision is the parameter-count weighted geometric mean of the two
group precisions (exact when they are equal).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .probes import (LOG_2PI, ParameterLayout, PriorPrecisions, ProbeParams,
                     backprop, forward_batch, log_prior, nll, softmax)

LOG_PREC_BOUNDS = (-8.0, 12.0)


class LaplaceError(ArithmeticError):
    pass


@dataclass
class KronBlock:
    """Eigendecomposed Kronecker factors of one layer's [W | b] block."""

    weight_group: int
    bias_group: int
    a_eigvals: np.ndarray
    a_eigvecs: np.ndarray
    g_eigvals: np.ndarray
    g_eigvecs: np.ndarray

    @property
    def size(self) -> int:
        return self.a_eigvals.size * self.g_eigvals.size

    def eig_products(self) -> np.ndarray:
        return np.outer(self.g_eigvals, self.a_eigvals).ravel()

    def factors(self) -> tuple[np.ndarray, np.ndarray]:
        A = (self.a_eigvecs * self.a_eigvals) @ self.a_eigvecs.T
        G = (self.g_eigvecs * self.g_eigvals) @ self.g_eigvecs.T
        return A, G


@dataclass
class CurvatureApprox:
    kind: str
    diag: Optional[np.ndarray] = None
    blocks: list[KronBlock] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("diagonal", "kron"):
            raise ValueError(f"unknown curvature kind {self.kind!r}")


@dataclass
class PosteriorFit:
    theta_map: ProbeParams
    curvature: CurvatureApprox
    precisions: PriorPrecisions
    log_evidence: float
    parts: dict
    n_data: int
    data_fingerprint: str = ""

    @property
    def log_evidence_per_example(self) -> float:
        return self.log_evidence / self.n_data if self.n_data else 0.0

    def summary(self) -> dict:
        """JSON-ready record without curvature or parameters."""
        layout = self.theta_map.layout
        vals = self.precisions.values
        if self.precisions.mode == "scalar":
            groups = {"all": vals}
        elif self.precisions.mode == "per_group":
            groups = {name: vals[i:i + 1] for i, name in enumerate(layout.names)}
        else:
            groups = {name: vals[off:off + n] for name, off, n in layout.groups}
        prec_summary = {
            name: {"min": float(v.min()), "median": float(np.median(v)), "max": float(v.max())}
            for name, v in groups.items()
        }
        return {
            "arch": self.theta_map.arch.to_dict(),
            "logZ": float(self.log_evidence),
            "logZ_per_example": float(self.log_evidence_per_example),
            "n_data": int(self.n_data),
            "parts": {k: float(v) for k, v in self.parts.items()},
            "curvature": self.curvature.kind,
            "precision_mode": self.precisions.mode,
            "precisions": prec_summary,
            "data_fingerprint": self.data_fingerprint,
        }


def data_fingerprint(X, y) -> str:
    h = hashlib.sha256()
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    h.update(str(X.shape).encode())
    h.update(X.tobytes())
    h.update(y.tobytes())
    return h.hexdigest()[:16]


def _loss_hessian_factors(p: np.ndarray) -> np.ndarray:
    """B with B @ B.T = diag(p) - p p^T per example; shape (N, C, C), columns first.

    Column c is sqrt(p_c) * (e_c - p); returned as ``out[n, c, :]``.
    """
    N, C = p.shape
    sq = np.sqrt(p)
    out = -sq[:, :, None] * p[:, None, :]
    out[:, np.arange(C), np.arange(C)] += sq
    return out


def _sensitivities(params: ProbeParams, X):
    X = np.asarray(X, dtype=np.float64).reshape(-1, params.arch.input_dim)
    logits, inputs = forward_batch(params.theta, params.arch, X)
    B = _loss_hessian_factors(softmax(logits))
    return inputs, backprop(params.theta, params.arch, inputs, B)


def ggn_diagonal(params: ProbeParams, X, y=None) -> np.ndarray:
    """Exact diagonal of sum_n J_n^T Lambda_n J_n (likelihood term only)."""
    out = np.zeros(params.arch.n_params)
    if np.asarray(X).size == 0:
        return out
    inputs, sens = _sensitivities(params, X)
    off = 0
    for a, s in zip(inputs, sens):
        s2 = (s * s).sum(axis=1)  # (N, fan_out)
        fo, fi = s2.shape[1], a.shape[1]
        out[off:off + fo * fi] = (s2.T @ (a * a)).ravel()
        off += fo * fi
        out[off:off + fo] = s2.sum(axis=0)
        off += fo
    return out


def _eigh_psd(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    M = 0.5 * (M + M.T)
    if not np.all(np.isfinite(M)):
        raise LaplaceError("non-finite Kronecker factor")
    w, V = np.linalg.eigh(M)
    return np.clip(w, 0.0, None), V


def input_factor(X) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposed first-layer A factor; depends only on the inputs."""
    X = np.asarray(X, dtype=np.float64)
    a_ext = np.hstack([X, np.ones((X.shape[0], 1))])
    return _eigh_psd(a_ext.T @ a_ext)


def ggn_kron(params: ProbeParams, X, y=None, first_factor=None) -> CurvatureApprox:
    """Layerwise KFAC factors: A summed over examples, G averaged, so G (x) A ~ N * E[.].

    ``first_factor`` may carry a cached result of :func:`input_factor` for ``X``.
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, params.arch.input_dim)
    N = X.shape[0]
    blocks = []
    if N == 0:
        for k, (fi, fo) in enumerate(params.arch.layer_dims):
            blocks.append(KronBlock(2 * k, 2 * k + 1, np.zeros(fi + 1), np.eye(fi + 1),
                                    np.zeros(fo), np.eye(fo)))
        return CurvatureApprox("kron", blocks=blocks)
    inputs, sens = _sensitivities(params, X)
    for k, (a, s) in enumerate(zip(inputs, sens)):
        if k == 0 and first_factor is not None:
            aw, aV = first_factor
        else:
            a_ext = np.hstack([a, np.ones((N, 1))])
            aw, aV = _eigh_psd(a_ext.T @ a_ext)
        s_flat = s.reshape(-1, s.shape[-1])
        gw, gV = _eigh_psd((s_flat.T @ s_flat) / N)
        blocks.append(KronBlock(2 * k, 2 * k + 1, aw, aV, gw, gV))
    return CurvatureApprox("kron", blocks=blocks)


def compute_curvature(kind: str, params: ProbeParams, X, y=None,
                      first_factor=None) -> CurvatureApprox:
    if kind == "diagonal":
        return CurvatureApprox("diagonal", diag=ggn_diagonal(params, X, y))
    if kind == "kron":
        return ggn_kron(params, X, y, first_factor)
    raise ValueError(f"unknown curvature kind {kind!r}")


def kron_block_permutation(layout: ParameterLayout, block: KronBlock) -> np.ndarray:
    """Flat-parameter indices in the row-major order of the block matrix [W | b]."""
    _, w_off, _ = layout.groups[block.weight_group]
    _, b_off, _ = layout.groups[block.bias_group]
    fi = block.a_eigvals.size - 1
    fo = block.g_eigvals.size
    idx = np.empty((fo, fi + 1), dtype=np.int64)
    idx[:, :fi] = w_off + np.arange(fo)[:, None] * fi + np.arange(fi)[None, :]
    idx[:, fi] = b_off + np.arange(fo)
    return idx.ravel()


class EvidenceGeometry:
    """Curvature spectrum paired with a precision mode, working on log precisions.

    Used both for the log-determinant and its gradient; the evidence-framework
    inner loop calls it many times with the curvature held fixed.
    """

    def __init__(self, curvature: CurvatureApprox, layout: ParameterLayout, mode: str):
        self.kind = curvature.kind
        self.layout = layout
        self.mode = mode
        self.group_index = layout.group_index()
        self.sizes = layout.sizes().astype(np.float64)
        if self.kind == "diagonal":
            if curvature.diag.shape != (layout.n_params,):
                raise ValueError("diagonal curvature does not match the layout")
            self.diag = curvature.diag
        else:
            if mode == "per_parameter":
                raise ValueError("per-parameter precisions require diagonal curvature")
            self.eigs = [b.eig_products() for b in curvature.blocks]
            self.block_groups = [(b.weight_group, b.bias_group) for b in curvature.blocks]

    def expand(self, logv: np.ndarray) -> np.ndarray:
        if self.mode == "scalar":
            return np.full(self.layout.n_params, logv[0])
        if self.mode == "per_group":
            return logv[self.group_index]
        return logv

    def reduce(self, per_param: np.ndarray) -> np.ndarray:
        """Chain rule from per-parameter log precisions to the mode's values."""
        if self.mode == "scalar":
            return np.array([per_param.sum()])
        if self.mode == "per_group":
            return np.bincount(self.group_index, weights=per_param,
                               minlength=self.layout.n_groups)
        return per_param

    def _block_log_prec(self, logv, gw, gb):
        if self.mode == "scalar":
            return logv[0]
        dw, db = self.sizes[gw], self.sizes[gb]
        return (dw * logv[gw] + db * logv[gb]) / (dw + db)

    def logdet(self, logv: np.ndarray) -> float:
        if self.kind == "diagonal":
            lam = np.exp(self.expand(logv))
            post = self.diag + lam
            if np.any(post <= 0):
                raise LaplaceError("non-positive posterior precision")
            return float(np.sum(np.log(post)))
        total = 0.0
        for e, (gw, gb) in zip(self.eigs, self.block_groups):
            lam = math.exp(self._block_log_prec(logv, gw, gb))
            total += float(np.sum(np.log(e + lam)))
        return total

    def grad_logdet(self, logv: np.ndarray) -> np.ndarray:
        """d logdet / d log precisions."""
        if self.kind == "diagonal":
            lam = np.exp(self.expand(logv))
            return self.reduce(lam / (self.diag + lam))
        out = np.zeros_like(logv)
        for e, (gw, gb) in zip(self.eigs, self.block_groups):
            lam = math.exp(self._block_log_prec(logv, gw, gb))
            t = float(np.sum(lam / (e + lam)))
            if self.mode == "scalar":
                out[0] += t
            else:
                dw, db = self.sizes[gw], self.sizes[gb]
                out[gw] += t * dw / (dw + db)
                out[gb] += t * db / (dw + db)
        return out

    def squared_norms(self, theta: np.ndarray) -> np.ndarray:
        """Sum of theta^2 per precision value (group, parameter, or all)."""
        return self.reduce(theta * theta)

    def log_prior(self, logv: np.ndarray, theta: np.ndarray) -> float:
        loglam = self.expand(logv)
        return float(0.5 * np.sum(loglam - LOG_2PI - np.exp(loglam) * theta * theta))

    def grad_log_prior(self, logv: np.ndarray, sq: np.ndarray) -> np.ndarray:
        """d log prior / d log precisions given :meth:`squared_norms` of theta."""
        return 0.5 * (self._counts() - np.exp(logv) * sq)

    def _counts(self) -> np.ndarray:
        if self.mode == "scalar":
            return np.array([float(self.layout.n_params)])
        if self.mode == "per_group":
            return self.sizes
        return np.ones(self.layout.n_params)

    def grad_log_evidence(self, logv: np.ndarray, theta: np.ndarray,
                          sq: np.ndarray | None = None) -> np.ndarray:
        if sq is None:
            sq = self.squared_norms(theta)
        return self.grad_log_prior(logv, sq) - 0.5 * self.grad_logdet(logv)


def log_det_posterior(curvature: CurvatureApprox, precisions: PriorPrecisions,
                      layout: ParameterLayout) -> float:
    """log det of (curvature + prior precision), diagonal or Kronecker-eigen form."""
    precisions.check(layout)
    geom = EvidenceGeometry(curvature, layout, precisions.mode)
    return geom.logdet(np.log(precisions.values))


def laplace_log_evidence(nll_value: float, log_prior_value: float, logdet: float,
                         n_params: int) -> tuple[float, dict]:
    """Combine the Laplace terms; returns log Z and its decomposition."""
    parts = {
        "nll_at_map": float(nll_value),
        "log_prior_at_map": float(log_prior_value),
        "half_logdet_posterior": 0.5 * float(logdet),
        "half_d_log_2pi": 0.5 * n_params * LOG_2PI,
    }
    logz = (-parts["nll_at_map"] + parts["log_prior_at_map"]
            + parts["half_d_log_2pi"] - parts["half_logdet_posterior"])
    if not all(math.isfinite(v) for v in parts.values()):
        raise LaplaceError(f"non-finite evidence terms: {parts}")
    return logz, parts


def log_evidence(theta_map: ProbeParams, curvature: CurvatureApprox,
                 precisions: PriorPrecisions, X, y) -> PosteriorFit:
    X = np.asarray(X, dtype=np.float64).reshape(-1, theta_map.arch.input_dim)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    layout = theta_map.layout
    logz, parts = laplace_log_evidence(
        nll(theta_map, X, y), log_prior(theta_map, precisions),
        log_det_posterior(curvature, precisions, layout), layout.n_params)
    return PosteriorFit(theta_map, curvature, precisions, logz, parts, X.shape[0],
                        data_fingerprint(X, y))


def marglik_grad_log_prec(fit: PosteriorFit, layout: ParameterLayout | None = None) -> np.ndarray:
    """Gradient of the Laplace log evidence w.r.t. log precisions, theta held fixed."""
    layout = layout or fit.theta_map.layout
    geom = EvidenceGeometry(fit.curvature, layout, fit.precisions.mode)
    return geom.grad_log_evidence(np.log(fit.precisions.values), fit.theta_map.theta)


def logistic_laplace_evidence(X, y, lam: float, iters: int = 100) -> tuple[float, np.ndarray]:
    """Laplace log evidence of a bias-free single-logit logistic model.

    ``p(y=1 | x) = sigmoid(w . x)`` with prior ``w ~ N(0, I / lam)``. The MAP is
    found by Newton's method; for this model the GGN equals the Hessian.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = X.shape[1]
    w = np.zeros(d)
    for _ in range(iters):
        s = expit(X @ w)
        g = X.T @ (s - y) + lam * w
        H = (X * (s * (1 - s))[:, None]).T @ X + lam * np.eye(d)
        step = np.linalg.solve(H, g)
        w = w - step
        if np.max(np.abs(step)) < 1e-13:
            break
    z = X @ w
    nll_value = float(np.sum(np.logaddexp(0.0, z) - y * z))
    lp = 0.5 * float(np.sum(math.log(lam) - LOG_2PI - lam * w * w))
    s = expit(z)
    H = (X * (s * (1 - s))[:, None]).T @ X + lam * np.eye(d)
    _, logdet = np.linalg.slogdet(H)
    logz, _ = laplace_log_evidence(nll_value, lp, logdet, d)
    return logz, w
