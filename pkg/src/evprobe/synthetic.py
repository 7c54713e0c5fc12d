"""Synthetic classification tasks used by the experiments and tests."""
from __future__ import annotations

import numpy as np

from .probes import softmax


def sample_labels(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    p = softmax(logits)
    u = rng.random(p.shape[0])[:, None]
    return np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), p.shape[1] - 1)


def linear_task(n: int, dim: int, num_classes: int, seed: int, weight_scale: float = 1.0):
    """Gaussian inputs, labels drawn from a softmax-linear teacher with N(0, scale^2) weights."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, dim))
    W = weight_scale * rng.standard_normal((num_classes, dim))
    return X, sample_labels(X @ W.T, rng), W


def sparse_task(n: int, dim: int, num_classes: int, seed: int, n_relevant: int = 10,
                weight_scale: float = 2.0):
    """Only the first ``n_relevant`` input dimensions carry label information."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, dim))
    W = np.zeros((num_classes, dim))
    W[:, :n_relevant] = weight_scale * rng.standard_normal((num_classes, n_relevant))
    return X, sample_labels(X @ W.T, rng), np.arange(n_relevant)


def random_label_task(n: int, dim: int, num_classes: int, seed: int):
    """Inputs and labels drawn independently; labels uniform over classes."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, dim)), rng.integers(0, num_classes, n)


def xor_task(n: int, seed: int, spread: float = 0.25):
    """Four 2-D clusters at (+-1, +-1); the label is the XOR of the coordinate signs."""
    rng = np.random.default_rng(seed)
    sx = rng.integers(0, 2, n)
    sy = rng.integers(0, 2, n)
    centers = np.stack([2.0 * sx - 1.0, 2.0 * sy - 1.0], axis=1)
    X = centers + spread * rng.standard_normal((n, 2))
    return X, (sx ^ sy).astype(np.int64)


def ring_task(n: int, seed: int, noise: float = 0.15):
    """Two 2-D classes: a central cluster surrounded by a ring. Not linearly separable."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    radius = np.where(y == 0, 0.0, 2.0) + noise * rng.standard_normal(n)
    angle = rng.uniform(0.0, 2.0 * np.pi, n)
    X = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    X += noise * rng.standard_normal((n, 2))
    return X, y.astype(np.int64)


def write_embedding_task(directory, n: int, dim: int, num_classes: int, seed: int,
                         weight_scale: float = 1.0, name: str = "synth"):
    """Write a linear-teacher task as a JSON-lines dataset plus an embedding file.

    Each example is a single unique token whose embedding row is the teacher's
    input vector, so a file representation is informative and a random one is not.
    Returns ``(dataset_path, embedding_path)``.
    """
    from pathlib import Path

    from .dataset import write_jsonl
    from .representations import save_embedding_file

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    X, y, _ = linear_task(n, dim, num_classes, seed, weight_scale)
    tokens = [f"{name}{k}" for k in range(n)]
    labels = [f"C{c}" for c in range(num_classes)]
    ds_path = write_jsonl(({"id": f"{name}-{k}", "tokens": [t], "label": labels[y[k]]}
                           for k, t in enumerate(tokens)), directory / f"{name}.jsonl")
    emb_path = directory / f"{name}.vec"
    save_embedding_file(emb_path, dict(zip(tokens, X)))
    return ds_path, emb_path
