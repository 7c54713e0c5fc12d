"""Probe family: linear and tanh MLP classifiers over a flat parameter vector.

Parameters of every layer are stored as ``W`` (fan_out x fan_in, row-major)
followed by ``b`` (fan_out), layer after layer. Each weight matrix and each
bias vector forms its own regularization group.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_MAGIC = "EVPROBE1"
PRIOR_MODES = ("scalar", "per_group", "per_parameter")


@dataclass(frozen=True)
class ProbeArchitecture:
    input_dim: int
    num_classes: int
    depth: int = 0
    hidden_width: int = 100
    activation: str = "tanh"

    def __post_init__(self):
        if self.depth not in (0, 1, 2):
            raise ValueError(f"depth must be 0, 1 or 2, got {self.depth}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("a probe needs at least 2 classes")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be positive")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def name(self) -> str:
        return "linear" if self.depth == 0 else f"mlp-{self.depth}"

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of each affine layer, input to output."""
        sizes = [self.input_dim] + [self.hidden_width] * self.depth + [self.num_classes]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "depth": self.depth,
            "hidden_width": self.hidden_width,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeArchitecture":
        return cls(**d)


@dataclass(frozen=True)
class ParameterLayout:
    groups: tuple[tuple[str, int, int], ...]

    @classmethod
    def for_architecture(cls, arch: ProbeArchitecture) -> "ParameterLayout":
        groups = []
        offset = 0
        for k, (fi, fo) in enumerate(arch.layer_dims):
            groups.append((f"layer{k}.weight", offset, fi * fo))
            offset += fi * fo
            groups.append((f"layer{k}.bias", offset, fo))
            offset += fo
        return cls(tuple(groups))

    @property
    def n_params(self) -> int:
        if not self.groups:
            return 0
        _, off, n = self.groups[-1]
        return off + n

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def names(self) -> list[str]:
        return [g[0] for g in self.groups]

    def slices(self) -> list[slice]:
        return [slice(off, off + n) for _, off, n in self.groups]

    def sizes(self) -> np.ndarray:
        return np.array([n for _, _, n in self.groups], dtype=np.int64)

    def group_index(self) -> np.ndarray:
        """Group id of every entry of the flat vector."""
        return np.repeat(np.arange(self.n_groups), self.sizes())

    def is_weight(self) -> np.ndarray:
        """Boolean mask over the flat vector selecting weight-matrix entries."""
        mask = np.zeros(self.n_params, dtype=bool)
        for (name, off, n) in self.groups:
            if name.endswith(".weight"):
                mask[off:off + n] = True
        return mask

    def to_list(self) -> list:
        return [list(g) for g in self.groups]


@dataclass
class PriorPrecisions:
    """Gaussian prior precisions (weight decay) in one of three granularities."""

    mode: str
    values: np.ndarray

    def __post_init__(self):
        if self.mode not in PRIOR_MODES:
            raise ValueError(f"unknown precision mode {self.mode!r}")
        self.values = np.atleast_1d(np.asarray(self.values, dtype=np.float64)).copy()
        if self.mode == "scalar" and self.values.size != 1:
            raise ValueError("scalar mode takes exactly one value")
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            raise ValueError("prior precisions must be positive and finite")

    @classmethod
    def scalar(cls, value: float) -> "PriorPrecisions":
        return cls("scalar", np.array([value]))

    @classmethod
    def init(cls, mode: str, layout: ParameterLayout, value: float = 1.0) -> "PriorPrecisions":
        n = {"scalar": 1, "per_group": layout.n_groups, "per_parameter": layout.n_params}[mode]
        return cls(mode, np.full(n, float(value)))

    @classmethod
    def from_log(cls, mode: str, log_values: np.ndarray) -> "PriorPrecisions":
        return cls(mode, np.exp(log_values))

    def check(self, layout: ParameterLayout) -> None:
        expected = {"scalar": 1, "per_group": layout.n_groups,
                    "per_parameter": layout.n_params}[self.mode]
        if self.values.size != expected:
            raise ValueError(
                f"{self.mode} precisions need {expected} values, got {self.values.size}")

    def expand(self, layout: ParameterLayout) -> np.ndarray:
        """Per-parameter precision vector."""
        self.check(layout)
        if self.mode == "scalar":
            return np.full(layout.n_params, self.values[0])
        if self.mode == "per_group":
            return np.repeat(self.values, layout.sizes())
        return self.values.copy()

    def to_dict(self) -> dict:
        return {"mode": self.mode, "values": [float(v) for v in self.values]}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorPrecisions":
        return cls(d["mode"], np.asarray(d["values"], dtype=np.float64))


@dataclass
class ProbeParams:
    theta: np.ndarray
    arch: ProbeArchitecture
    layout: ParameterLayout = field(init=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.layout = ParameterLayout.for_architecture(self.arch)
        if self.theta.shape != (self.arch.n_params,):
            raise ValueError(
                f"expected {self.arch.n_params} parameters, got shape {self.theta.shape}")

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unflatten(self.theta, self.arch)

    def copy(self) -> "ProbeParams":
        return ProbeParams(self.theta.copy(), self.arch)


def unflatten(theta: np.ndarray, arch: ProbeArchitecture) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) into ``theta`` for every layer."""
    out = []
    off = 0
    for fi, fo in arch.layer_dims:
        W = theta[off:off + fi * fo].reshape(fo, fi)
        off += fi * fo
        b = theta[off:off + fo]
        off += fo
        out.append((W, b))
    return out


def init_params(arch: ProbeArchitecture, seed: int) -> ProbeParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(arch.n_params)
    for W, _ in unflatten(theta, arch):
        fo, fi = W.shape
        bound = math.sqrt(6.0 / (fi + fo))
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    return ProbeParams(theta, arch)


def forward_batch(theta: np.ndarray, arch: ProbeArchitecture, X: np.ndarray):
    """Logits for a batch plus the input of every layer (for backprop)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise ValueError(f"expected inputs of dimension {arch.input_dim}, got shape {X.shape}")
    layers = unflatten(theta, arch)
    inputs = []
    a = X
    for k, (W, b) in enumerate(layers):
        inputs.append(a)
        z = a @ W.T + b
        a = np.tanh(z) if k < len(layers) - 1 else z
    return a, inputs


def forward(params: ProbeParams, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (params.arch.input_dim,):
        raise ValueError(f"expected a vector of dimension {params.arch.input_dim}, got {h.shape}")
    logits, _ = forward_batch(params.theta, params.arch, h[None, :])
    return logits[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def predict_proba(params: ProbeParams, X: np.ndarray) -> np.ndarray:
    logits, _ = forward_batch(params.theta, params.arch, X)
    return softmax(logits)


def _check_xy(X, y, arch):
    X = np.asarray(X, dtype=np.float64).reshape(-1, arch.input_dim)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} labels")
    return X, y


def nll_theta(theta: np.ndarray, arch: ProbeArchitecture, X, y) -> float:
    X, y = _check_xy(X, y, arch)
    if X.shape[0] == 0:
        return 0.0
    logits, _ = forward_batch(theta, arch, X)
    return float(-log_softmax(logits)[np.arange(len(y)), y].sum())


def nll(params: ProbeParams, X, y) -> float:
    """Summed categorical negative log-likelihood in nats."""
    return nll_theta(params.theta, params.arch, X, y)


def backprop(theta: np.ndarray, arch: ProbeArchitecture, inputs: Sequence[np.ndarray],
             delta: np.ndarray) -> list[np.ndarray]:
    """Back-propagate output-space vectors through the network.

    ``delta`` has shape (N, K, C): K vectors per example at the logits. Returns,
    for each layer, the pre-activation sensitivities with shape (N, K, fan_out).
    """
    layers = unflatten(theta, arch)
    out = [None] * len(layers)
    out[-1] = delta
    for k in range(len(layers) - 1, 0, -1):
        W, _ = layers[k]
        a = inputs[k]
        out[k - 1] = (out[k] @ W) * (1.0 - a * a)[:, None, :]
    return out


def nll_and_grad(theta: np.ndarray, arch: ProbeArchitecture, X, y,
                 weight: float = 1.0) -> tuple[float, np.ndarray]:
    """``weight`` times the summed nll, and its gradient w.r.t. ``theta``."""
    X, y = _check_xy(X, y, arch)
    grad = np.zeros_like(theta)
    if X.shape[0] == 0:
        return 0.0, grad
    logits, inputs = forward_batch(theta, arch, X)
    logp = log_softmax(logits)
    n = len(y)
    value = -logp[np.arange(n), y].sum()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    deltas = backprop(theta, arch, inputs, d[:, None, :])
    for (gW, gb), a, dl in zip(unflatten(grad, arch), inputs, deltas):
        dl = dl[:, 0, :]
        gW[...] = dl.T @ a
        gb[...] = dl.sum(axis=0)
    return weight * float(value), weight * grad


def log_prior_theta(theta: np.ndarray, lam: np.ndarray) -> float:
    return float(0.5 * np.sum(np.log(lam) - LOG_2PI - lam * theta * theta))


def log_prior(params: ProbeParams, prec: PriorPrecisions) -> float:
    """Log density of the zero-mean Gaussian prior at ``params``."""
    return log_prior_theta(params.theta, prec.expand(params.layout))


def architectures_for(input_dim: int, num_classes: int,
                      depths: Sequence[int] = (0, 1, 2),
                      hidden_width: int = 100) -> list[ProbeArchitecture]:
    return [ProbeArchitecture(input_dim, num_classes, d, hidden_width) for d in depths]


def save_checkpoint(path, params: ProbeParams, prec: PriorPrecisions | None = None,
                    seed: int | None = None, extra: dict | None = None) -> None:
    record = {
        "magic": CHECKPOINT_MAGIC,
        "arch": params.arch.to_dict(),
        "layout": params.layout.to_list(),
        "theta": [float(t) for t in params.theta],
        "precisions": prec.to_dict() if prec is not None else None,
        "seed": seed,
    }
    if extra:
        record["extra"] = extra
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f)


def load_checkpoint(path) -> tuple[ProbeParams, PriorPrecisions | None, dict]:
    with open(path, encoding="utf-8") as f:
        record = json.load(f)
    if record.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a probe checkpoint (bad magic)")
    params = ProbeParams(np.asarray(record["theta"]), ProbeArchitecture.from_dict(record["arch"]))
    if [list(g) for g in params.layout.groups] != record["layout"]:
        raise ValueError(f"{path}: parameter layout does not match architecture")
    prec = record.get("precisions")
    return params, (PriorPrecisions.from_dict(prec) if prec else None), record


def iter_groups(layout: ParameterLayout, v: np.ndarray) -> Iterator[tuple[str, np.ndarray]]:
    for name, off, n in layout.groups:
        yield name, v[off:off + n]
