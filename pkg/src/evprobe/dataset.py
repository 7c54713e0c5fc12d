"""Probing datasets: JSON-lines I/O, rare-label filtering, type-disjoint splits."""
from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "test")
DEFAULT_MIN_COUNT = 20
DEFAULT_TRAIN_FRACTION = 0.65


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ProbingExample:
    id: str
    tokens: tuple[str, ...]
    label: str
    type_key: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise DatasetError(f"example {self.id!r} has no tokens")
        if not self.label:
            raise DatasetError(f"example {self.id!r} has an empty label")
        if not self.type_key:
            object.__setattr__(self, "type_key", " ".join(self.tokens))


@dataclass(frozen=True)
class ProbingDataset:
    """Examples plus named splits. ``label_set`` is sorted lexicographically,
    so class index ``k`` always refers to ``label_set[k]``."""

    examples: tuple[ProbingExample, ...]
    splits: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    label_set: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        object.__setattr__(self, "splits", {k: tuple(v) for k, v in self.splits.items()})
        object.__setattr__(self, "label_set", tuple(sorted({e.label for e in self.examples})))
        ids = [e.id for e in self.examples]
        dup = [i for i, c in Counter(ids).items() if c > 1]
        if dup:
            raise DatasetError(f"duplicate example id {dup[0]!r}")
        known = set(ids)
        seen: set[str] = set()
        for name, members in self.splits.items():
            for i in members:
                if i not in known:
                    raise DatasetError(f"split {name!r} refers to unknown id {i!r}")
                if i in seen:
                    raise DatasetError(f"id {i!r} assigned to more than one split")
                seen.add(i)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def num_classes(self) -> int:
        return len(self.label_set)

    def by_id(self) -> dict[str, ProbingExample]:
        return {e.id: e for e in self.examples}

    def split(self, name: str) -> list[ProbingExample]:
        if name not in self.splits:
            raise KeyError(f"dataset has no split {name!r}")
        idx = self.by_id()
        return [idx[i] for i in self.splits[name]]

    def label_indices(self, examples: Iterable[ProbingExample]) -> np.ndarray:
        index = {lab: k for k, lab in enumerate(self.label_set)}
        return np.array([index[e.label] for e in examples], dtype=np.int64)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for e in self.examples:
            h.update(json.dumps([e.id, list(e.tokens), e.label, e.type_key]).encode())
        h.update(json.dumps({k: list(v) for k, v in sorted(self.splits.items())}).encode())
        return h.hexdigest()[:16]


def _parse_line(obj, lineno: int, path) -> tuple[ProbingExample, str | None]:
    if not isinstance(obj, dict):
        raise DatasetError(f"{path}:{lineno}: expected a JSON object")
    for key in ("id", "tokens", "label"):
        if key not in obj:
            raise DatasetError(f"{path}:{lineno}: missing field {key!r}")
    if not isinstance(obj["id"], str) or not isinstance(obj["label"], str):
        raise DatasetError(f"{path}:{lineno}: 'id' and 'label' must be strings")
    tokens = obj["tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise DatasetError(f"{path}:{lineno}: 'tokens' must be a list of strings")
    split = obj.get("split")
    if split is not None and split not in SPLIT_NAMES:
        raise DatasetError(f"{path}:{lineno}: unknown split {split!r}")
    type_key = obj.get("type_key") or ""
    try:
        ex = ProbingExample(obj["id"], tuple(tokens), obj["label"], type_key)
    except DatasetError as exc:
        raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return ex, split


def load_dataset(path) -> ProbingDataset:
    """Read a JSON-lines dataset. Splits given in the file are kept."""
    examples = []
    splits: dict[str, list[str]] = defaultdict(list)
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            ex, split = _parse_line(obj, lineno, path)
            examples.append(ex)
            if split is not None:
                splits[split].append(ex.id)
    if not examples:
        raise DatasetError(f"{path}: dataset is empty")
    return ProbingDataset(tuple(examples), dict(splits))


def save_dataset(ds: ProbingDataset, path) -> None:
    where = {i: name for name, members in ds.splits.items() for i in members}
    with open(path, "w", encoding="utf-8") as f:
        for e in ds.examples:
            rec = {"id": e.id, "tokens": list(e.tokens), "label": e.label, "type_key": e.type_key}
            if e.id in where:
                rec["split"] = where[e.id]
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def filter_rare_labels(ds: ProbingDataset, min_count: int = DEFAULT_MIN_COUNT) -> ProbingDataset:
    """Drop labels with fewer than ``min_count`` examples.

    With splits, a label must reach ``min_count`` in every split; examples
    outside all splits are dropped along with their label but not counted.
    """
    if min_count < 1:
        raise ValueError("min_count must be positive")
    labels = {e.id: e.label for e in ds.examples}
    if ds.splits:
        populations = [[labels[i] for i in members] for members in ds.splits.values()]
    else:
        populations = [list(labels.values())]
    keep = set(ds.label_set)
    for pop in populations:
        counts = Counter(pop)
        keep &= {lab for lab in ds.label_set if counts[lab] >= min_count}
    if len(keep) < 2:
        raise DatasetError(
            f"fewer than 2 labels with at least {min_count} examples (kept {sorted(keep)})")
    examples = tuple(e for e in ds.examples if e.label in keep)
    splits = {name: tuple(i for i in members if labels[i] in keep)
              for name, members in ds.splits.items()}
    return ProbingDataset(examples, splits)


def split_by_type(ds: ProbingDataset, train_fraction: float = DEFAULT_TRAIN_FRACTION,
                  seed: int = 0) -> ProbingDataset:
    """Assign whole type_keys to train/test so the train share of examples is
    close to ``train_fraction``.

    Types are shuffled with ``seed``, stably sorted by descending frequency, and
    each goes to the split currently furthest below its example quota.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    freq = Counter(e.type_key for e in ds.examples)
    if len(freq) < 2:
        raise DatasetError("need at least 2 distinct type keys to split")
    types = sorted(freq)
    rng = np.random.default_rng(seed)
    types = [types[i] for i in rng.permutation(len(types))]
    types.sort(key=lambda t: -freq[t])

    n = len(ds.examples)
    quota = {"train": train_fraction * n, "test": (1.0 - train_fraction) * n}
    filled = {"train": 0, "test": 0}
    assign = {}
    for t in types:
        name = max(SPLIT_NAMES, key=lambda s: (quota[s] - filled[s], s == "train"))
        assign[t] = name
        filled[name] += freq[t]
    splits = {name: tuple(e.id for e in ds.examples if assign[e.type_key] == name)
              for name in SPLIT_NAMES}
    return ProbingDataset(ds.examples, splits)


def prepare_dataset(path, min_count: int = DEFAULT_MIN_COUNT,
                    train_fraction: float = DEFAULT_TRAIN_FRACTION,
                    split_seed: int = 0) -> ProbingDataset:
    """Load, split by type unless the file carries splits, then filter rare labels."""
    ds = load_dataset(path)
    if not ds.splits:
        ds = split_by_type(ds, train_fraction, split_seed)
    return filter_rare_labels(ds, min_count)


def dataset_from_records(records: Sequence[dict]) -> ProbingDataset:
    examples, splits = [], defaultdict(list)
    for lineno, rec in enumerate(records, start=1):
        ex, split = _parse_line(rec, lineno, "<records>")
        examples.append(ex)
        if split is not None:
            splits[split].append(ex.id)
    return ProbingDataset(tuple(examples), dict(splits))


def write_jsonl(records: Iterable[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return path
